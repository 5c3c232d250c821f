import itertools

import numpy as np
import pytest

from asymml import ConfigurationError
from asymml.dataset import RetrievalTask, SyntheticConfig, generate_synthetic
from asymml.evaluation import (EvalReport, WhiteningTransform, append_results, apply_whitening,
                               average_precision, evaluate, fit_whitening, fit_whitening_arrays,
                               fit_whitening_for, precision_at_k, rank_database)
from asymml.models import StudentModel, build_synthetic_teacher, snapshot_teacher


def brute_ap(ranked, positives):
    hits, total = 0, 0.0
    for r, z in enumerate(ranked, start=1):
        if z in positives:
            hits += 1
            total += hits / r
    return total / len(positives)


def test_ap_examples():
    assert average_precision([1, 2, 3], {1, 2}) == 1.0
    for r in range(1, 6):
        assert average_precision(list(range(10, 10 + r - 1)) + [1], {1}) == pytest.approx(1 / r)
    assert average_precision([1, 7, 2, 8], {1, 2}) == pytest.approx(5 / 6)
    with pytest.raises(ValueError):
        average_precision([1], set())


def test_ap_oracle(rng):
    for _ in range(300):
        n = int(rng.integers(1, 40))
        ranked = list(rng.permutation(n))
        pos = set(int(p) for p in rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        assert average_precision(ranked, pos) == pytest.approx(brute_ap(ranked, pos), abs=1e-12)


def test_precision_at_k():
    assert precision_at_k(list(range(20)), {0, 1, 2}) == 1.0
    assert precision_at_k(list(range(20)), {0, 15}) == 0.5
    assert precision_at_k(list(range(20)), set(range(5, 30))) == 0.5
    assert precision_at_k([3, 4], {4}, k=1) == 0.0


def test_rank_database():
    assert list(rank_database([1.0, 0], [7], np.array([[0.3, 1.0]]))) == [7]
    db = np.array([[0, 1.0], [1.0, 0], [0, -1.0]])
    assert rank_database([2.0, 0], [4, 5, 6], db)[0] == 5
    # equal similarity: ascending id
    assert list(rank_database([1.0, 0], [9, 2, 5], np.array([[1.0, 1], [1, 1], [1, -1]]))) == [2, 5, 9]
    assert list(rank_database([1.0, 0], [9, 2, 5], np.array([[1.0, 1], [1, 1], [1, -2]]))) == [2, 9, 5]
    assert list(rank_database([1.0, 0], [1, 2], np.eye(2), ignore={1})) == [2]


def test_rank_database_oracle(rng):
    ids = rng.permutation(100)[:30]
    db = rng.normal(size=(30, 4))
    q = rng.normal(size=4)
    sims = [q @ v / np.linalg.norm(q) / np.linalg.norm(v) for v in db]
    expected = [i for _, i in sorted(zip([-s for s in sims], ids))]
    assert list(rank_database(q, ids, db)) == expected


def test_whitening_whitens_pair_differences(rng):
    d = 6
    A = rng.normal(size=(d, d))
    x = rng.normal(size=(300, d)) @ A.T
    diffs = rng.normal(size=(200, d)) @ rng.normal(size=(d, d)).T
    w = fit_whitening_arrays(x, diffs)
    t = apply_whitening(w, diffs + w.mean) - apply_whitening(w, np.zeros(d) + w.mean)
    assert np.allclose(t.T @ t / len(t), np.eye(d), atol=1e-6)
    # whitened data is decorrelated, variance descending
    z = w.apply(x)
    c = z.T @ z / len(z)
    assert np.allclose(c, np.diag(np.diag(c)), atol=1e-8)
    assert np.all(np.diff(np.diag(c)) <= 1e-12)


def test_whitening_already_white_is_signed_permutation(rng):
    d = 4
    diffs = np.sqrt(d) * np.vstack([np.eye(d), -np.eye(d)])
    assert np.allclose(diffs.T @ diffs / len(diffs), np.eye(d))
    x = rng.normal(size=(400, d)) * np.array([1.0, 3.0, 0.5, 2.0])
    x -= x.mean(axis=0)
    # force an exactly diagonal data covariance
    q, _ = np.linalg.qr(x)
    x = q * np.sqrt(len(x)) * np.array([1.0, 3.0, 0.5, 2.0])
    w = fit_whitening_arrays(x, diffs)
    p = np.abs(w.projection)
    assert np.allclose(np.sort(p, axis=1)[:, :-1], 0, atol=1e-8)
    assert np.allclose(p.max(axis=1), 1, atol=1e-8)
    assert list(np.argmax(p, axis=1)) == [1, 3, 0, 2]


def test_whitening_scalar_case(rng):
    diffs = rng.normal(scale=2.5, size=(50, 1))
    x = rng.normal(size=(30, 1))
    w = fit_whitening_arrays(x, diffs)
    sigma = np.sqrt(np.mean(diffs ** 2))
    assert abs(w.projection[0, 0]) == pytest.approx(1 / sigma, rel=1e-12)


def test_whitening_apply_contracts(rng):
    ident = WhiteningTransform.identity(3)
    v = rng.normal(size=3)
    assert np.array_equal(ident.apply(v), v)
    w = fit_whitening_arrays(rng.normal(size=(50, 3)), rng.normal(size=(40, 3)))
    assert np.allclose(w.apply(w.mean), 0)
    back = np.linalg.solve(w.projection, w.apply(v)) + w.mean
    assert np.allclose(back, v, atol=1e-9)
    with pytest.raises(ValueError):
        w.apply(np.ones(4))


def test_whitening_floor_handles_rank_deficient(rng):
    diffs = np.zeros((10, 3))
    diffs[:, 0] = rng.normal(size=10)
    w = fit_whitening_arrays(rng.normal(size=(20, 3)), diffs)
    assert np.all(np.isfinite(w.projection))
    w = fit_whitening_arrays(rng.normal(size=(20, 3)), np.zeros((10, 3)))
    assert np.all(np.isfinite(w.projection))


def test_fit_whitening_from_pairs(rng):
    table = {i: rng.normal(size=3) for i in range(10)}
    pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (1, 2)]
    w = fit_whitening(table, pairs, space="teacher")
    assert w.space == "teacher"
    with pytest.raises(ValueError):
        fit_whitening(table, [(0, 1)])


def test_student_equal_teacher_protocols_agree(small_data):
    data, _ = small_data
    s = StudentModel.init([6, 8, 5], 0)
    t = snapshot_teacher(s, data.all_ids, data.inputs)
    for whiten in (False, True):
        reps = {}
        for p in ("symmetric", "asymmetric"):
            w = fit_whitening_for(p, s, t, data.training_set) if whiten else None
            reps[p] = evaluate(p, s, t, data.task, w)
        assert abs(reps["symmetric"].mAP - reps["asymmetric"].mAP) <= 1e-12
        assert np.allclose(reps["symmetric"].aps, reps["asymmetric"].aps, atol=1e-12)


def test_random_student_near_chance():
    data = generate_synthetic(SyntheticConfig(seed=5))
    teacher = build_synthetic_teacher(data)
    s = StudentModel.init([32, 64, 32], 11)
    rep = evaluate("asymmetric", s, teacher, data.task)
    rng = np.random.default_rng(0)
    base = []
    for q in data.task.query_ids:
        pos = set(data.task.positives[int(q)])
        for _ in range(20):
            base.append(brute_ap(list(rng.permutation(data.task.db_ids)), pos))
    assert abs(rep.mAP - np.mean(base)) <= 0.05


def test_zero_noise_teacher_perfect():
    data = generate_synthetic(SyntheticConfig(num_classes=10, train_size=100, db_size=50,
                                              num_queries=10, d_in=8, d_teacher=8,
                                              intra_class_noise=0.0))
    t = build_synthetic_teacher(data)
    for p in ("symmetric", "asymmetric"):
        assert evaluate(p, t, t, data.task).mAP == 1.0
        w = fit_whitening_for(p, t, t, data.training_set)
        assert evaluate(p, t, t, data.task, w).mAP == 1.0


def test_protocol_and_whitening_checks(small_data):
    data, t = small_data
    w = fit_whitening_for("asymmetric", t, t, data.training_set)
    with pytest.raises(ConfigurationError):
        evaluate("symmetric", t, t, data.task, w)
    with pytest.raises(ConfigurationError):
        evaluate("both", t, t, data.task)


def test_queries_without_positives_skipped(caplog):
    task = RetrievalTask([0, 1], np.eye(2), [2, 3], np.array([[1.0, 0], [0, 1.0]]), {2: [0], 3: []})
    rep = evaluate("symmetric", lambda ids, x: x, None, task)
    assert rep.query_ids == [2] and rep.mAP == 1.0
    assert "no positives" in caplog.text


def test_ignore_removed_from_ranking():
    db = np.array([[1.0, 0], [0.9, 0.1], [0, 1.0]])
    task = RetrievalTask([0, 1, 2], db, [3], np.array([[1.0, 0]]), {3: [1]}, {3: [0]})
    assert evaluate("symmetric", lambda ids, x: x, None, task).mAP == 1.0


def test_results_csv(tmp_path):
    rep = EvalReport("symmetric", [1.0], [1.0], [5], 1.0, 1.0, "abc")
    append_results(tmp_path / "r.csv", [rep.csv_row("regression", "asym", 0, "t1")])
    append_results(tmp_path / "r.csv", [rep.csv_row("regression", "asym", 0, "t2")])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# asymml results v1"
    assert lines[1].startswith("protocol,")
    assert len(lines) == 4 and lines[2][:-2] == lines[3][:-2]

import numpy as np
import pytest

from asymml.dataset import TrainingSet
from asymml.mining import MiningConfig, mine_hard_negatives, refresh_epoch_pool, top_k
from asymml.models import StudentModel, TeacherModel, snapshot_teacher


def random_problem(rng, n=60, d_in=4, d=3, classes=None):
    ids = rng.permutation(np.arange(1000, 1000 + 3 * n))[:n]
    x = rng.normal(size=(n, d_in))
    pos = {int(a): [int(p) for p in rng.choice(ids[ids != a], size=2, replace=False)] for a in ids}
    class_of = {int(i): int(rng.integers(classes)) for i in ids} if classes else {}
    ts = TrainingSet(ids, x, pos, class_of=class_of)
    student = StudentModel.init([d_in, 5, d], int(rng.integers(100)))
    teacher = TeacherModel(ids, rng.normal(size=(n, d)))
    return ts, student, teacher


def brute_force(a, ts, student, teacher, pool, cfg):
    fa = student.forward(ts.input_of(a))
    banned = {a, *ts.positives[a]}
    scored = []
    for c in pool:
        c = int(c)
        if c in banned:
            continue
        if cfg.exclude_same_class and ts.class_of and ts.class_of[c] == ts.class_of[a]:
            continue
        v = teacher.embed(c) if cfg.mode.value == "asym" else student.forward(ts.input_of(c))
        scored.append((-(fa @ v) / np.linalg.norm(fa) / np.linalg.norm(v), c))
    scored.sort()
    return [c for _, c in scored[:cfg.k_negatives]]


@pytest.mark.parametrize("mode", ["asym", "sym"])
@pytest.mark.parametrize("classes", [None, 4])
def test_matches_exhaustive_scan(mode, classes, rng):
    ts, student, teacher = random_problem(rng, classes=classes)
    cfg = MiningConfig(pool_size=40, k_negatives=5, mode=mode)
    pool = refresh_epoch_pool(ts, cfg, 1)
    anchors = ts.ids[:10]
    mined = mine_hard_negatives(anchors, student, teacher, ts, pool, cfg)
    for a in anchors:
        assert [c for c, _ in mined[int(a)]] == brute_force(int(a), ts, student, teacher, pool, cfg)
        sims = [s for _, s in mined[int(a)]]
        assert sims == sorted(sims, reverse=True)


def test_pool_of_exactly_k():
    ids = np.arange(8)
    x = np.eye(8)
    ts = TrainingSet(ids, x, {0: [1]})
    teacher = TeacherModel(ids, np.random.default_rng(0).normal(size=(8, 3)))
    student = StudentModel.init([8, 3], 0)
    cfg = MiningConfig(pool_size=8, k_negatives=6)
    mined = mine_hard_negatives([0], student, teacher, ts, ids, cfg)[0]
    assert sorted(c for c, _ in mined) == [2, 3, 4, 5, 6, 7]
    assert [s for _, s in mined] == sorted((s for _, s in mined), reverse=True)
    with pytest.raises(ValueError):
        mine_hard_negatives([0], student, teacher, ts, ids, MiningConfig(pool_size=8, k_negatives=7))


def test_ties_broken_by_id():
    ids = np.array([5, 3, 9, 1])
    assert list(ids[top_k(ids, np.array([0.5, 0.5, 0.9, 0.5]), 3)]) == [9, 1, 3]


def test_student_equals_teacher_modes_agree(rng):
    ts, student, _ = random_problem(rng)
    teacher = snapshot_teacher(student, ts.ids, ts.inputs)
    pool = ts.ids
    sym = mine_hard_negatives(ts.ids[:5], student, teacher, ts, pool, MiningConfig(pool_size=60, mode="sym"))
    asym = mine_hard_negatives(ts.ids[:5], student, teacher, ts, pool, MiningConfig(pool_size=60, mode="asym"))
    for a in sym:
        assert [c for c, _ in sym[a]] == [c for c, _ in asym[a]]
        assert np.allclose([s for _, s in sym[a]], [s for _, s in asym[a]], atol=1e-12)


def test_asymmetric_mining_leaves_teacher_untouched(rng):
    ts, student, teacher = random_problem(rng)
    before = teacher.content_hash()
    mine_hard_negatives(ts.ids, student, teacher, ts, ts.ids, MiningConfig(pool_size=60))
    assert teacher.content_hash() == before


def test_pool_sampling(rng):
    ts, _, _ = random_problem(rng, n=200)
    cfg = MiningConfig(pool_size=20, seed=3)
    a = refresh_epoch_pool(ts, cfg, 1)
    assert np.array_equal(a, refresh_epoch_pool(ts, cfg, 1))
    assert set(a) != set(refresh_epoch_pool(ts, cfg, 2))
    assert len(set(a)) == 20 and set(a) <= set(ts.ids.tolist())
    full = refresh_epoch_pool(ts, MiningConfig(pool_size=200), 5)
    assert np.array_equal(full, ts.ids)
    with pytest.raises(ValueError):
        refresh_epoch_pool(ts, MiningConfig(pool_size=201), 1)

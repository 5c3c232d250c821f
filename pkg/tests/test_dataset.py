import numpy as np
import pytest

from asymml import ConfigurationError
from asymml.dataset import (RetrievalTask, SyntheticConfig, TrainingSet, generate_synthetic,
                            load_dataset, sample_unlabeled, save_dataset)
from asymml.models import build_synthetic_teacher


def tiny(**kw):
    base = dict(num_classes=5, train_size=40, db_size=20, num_queries=6, d_in=4, d_teacher=3, seed=1)
    base.update(kw)
    return SyntheticConfig(**base)


def test_sizes_and_id_layout():
    data = generate_synthetic(tiny())
    assert data.inputs.shape == (66, 4)
    assert list(data.training_set.ids) == list(range(40))
    assert list(data.task.db_ids) == list(range(40, 60))
    assert list(data.task.query_ids) == list(range(60, 66))


def test_positives_share_class_and_exclude_anchor():
    data = generate_synthetic(tiny())
    for a, ps in data.training_set.positives.items():
        assert 1 <= len(ps) <= 2 and a not in ps
        assert all(data.class_of[p] == data.class_of[a] for p in ps)
    for q, ps in data.task.positives.items():
        assert ps and all(data.class_of[p] == data.class_of[q] for p in ps)


def test_single_class_every_pair_valid():
    data = generate_synthetic(tiny(num_classes=1, train_size=10))
    assert all(len(p) >= 1 for p in data.training_set.positives.values())
    assert len(set(data.class_of.values())) == 1


def test_zero_noise_collapses_classes():
    data = generate_synthetic(tiny(intra_class_noise=0.0))
    by_class = {}
    for i in data.training_set.ids:
        by_class.setdefault(data.class_of[int(i)], []).append(data.inputs[i])
    for rows in by_class.values():
        assert np.all(np.array(rows) == rows[0])


def test_same_seed_identical(tmp_path):
    a, b = generate_synthetic(tiny()), generate_synthetic(tiny())
    assert np.array_equal(a.inputs, b.inputs)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for f in ("meta.json", "inputs.f32", "pairs.json", "splits.json", "classes.json", "centers.npy"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert not np.array_equal(a.inputs, generate_synthetic(tiny(seed=2)).inputs)


def test_save_load_round_trip(tmp_path):
    data = generate_synthetic(tiny(hard_noise=2.0))
    save_dataset(data, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.inputs, data.inputs)
    assert back.training_set.positives == data.training_set.positives
    assert back.task.positives == data.task.positives
    assert back.hard_task is not None and back.config == data.config


def test_train_size_constraint_named():
    with pytest.raises(ConfigurationError, match="train_size"):
        tiny(train_size=9).validate()


def test_teacher_separates_classes_nearest_neighbor():
    # nearest-neighbour label accuracy of teacher embeddings on the db
    data = generate_synthetic(SyntheticConfig(seed=0))
    t = build_synthetic_teacher(data)
    db = t.embed_many(data.task.db_ids)
    sims = db @ db.T
    np.fill_diagonal(sims, -np.inf)
    nn = data.task.db_ids[np.argmax(sims, axis=1)]
    labels = np.array([data.class_of[int(i)] for i in data.task.db_ids])
    pred = np.array([data.class_of[int(i)] for i in nn])
    assert np.mean(pred == labels) > 0.95


def test_training_set_validation():
    with pytest.raises(ValueError):
        TrainingSet([0, 1], np.zeros((2, 2)), {0: [0]})
    with pytest.raises(ValueError):
        TrainingSet([0, 1], np.zeros((2, 2)), {0: [5]})
    with pytest.raises(ValueError):
        TrainingSet([0, 0], np.zeros((2, 2)), {})
    with pytest.raises(ValueError):
        TrainingSet([0, 1, 2], np.zeros((3, 2)), {0: [1]}, negatives={0: [1]})


def test_retrieval_task_rejects_overlapping_ignore():
    with pytest.raises(ValueError):
        RetrievalTask([1, 2], np.eye(2), [3], np.ones((1, 2)), {3: [1]}, {3: [1]})


def test_sample_unlabeled():
    ts = TrainingSet([7, 9], np.eye(2), {7: [9], 9: [7]})
    assert ts.sample_unlabeled(7, 1, np.random.default_rng(0)) == [9]
    assert sample_unlabeled(ts, 7, 0, np.random.default_rng(0)) == []
    big = TrainingSet(np.arange(50), np.zeros((50, 2)), {})
    a = big.sample_unlabeled(3, 10, np.random.default_rng(4))
    b = big.sample_unlabeled(3, 10, np.random.default_rng(4))
    assert a == b and 3 not in a and len(set(a)) == 10
    with pytest.raises(ValueError):
        big.sample_unlabeled(3, 50, np.random.default_rng(0))

"""Training sets with per-anchor supervision, retrieval tasks, synthetic data."""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from asymml.errors import ConfigurationError
from asymml.io import read_json, read_matrix, write_json, write_matrix

FORMAT_VERSION = 1


@dataclass
class TrainingSet:
    """Training examples with per-anchor positives and (optionally mined) negatives.

    ``inputs[i]`` is the input vector of example ``ids[i]``.  ``class_of`` is
    synthetic ground truth; losses never read it.
    """

    ids: np.ndarray
    inputs: np.ndarray
    positives: dict
    negatives: dict = field(default_factory=dict)
    class_of: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.ids.shape[0]:
            raise ValueError("inputs must be a matrix with one row per id")
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise ValueError("duplicate example ids")
        for a, pos in self.positives.items():
            if a in pos:
                raise ValueError(f"anchor {a} listed as its own positive")
            missing = [p for p in pos if p not in self._row]
            if missing:
                raise ValueError(f"positives of {a} reference unknown ids {missing}")
        for a, neg in self.negatives.items():
            if a in neg or set(neg) & set(self.positives.get(a, ())):
                raise ValueError(f"negatives of {a} overlap the anchor or its positives")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def row(self, example_id):
        return self._row[int(example_id)]

    def input_of(self, example_id):
        return self.inputs[self._row[int(example_id)]]

    def inputs_of(self, example_ids):
        return self.inputs[[self._row[int(i)] for i in example_ids]]

    def __contains__(self, example_id):
        return int(example_id) in self._row

    def sample_unlabeled(self, anchor, k, rng):
        """Draw ``k`` ids uniformly without replacement from ``X \\ {anchor}``."""
        if k < 0 or k > len(self.ids) - 1:
            raise ValueError(f"cannot draw {k} unlabeled examples from {len(self.ids) - 1}")
        if k == 0:
            return []
        row = self._row[int(anchor)]
        picks = rng.choice(len(self.ids) - 1, size=k, replace=False)
        # skip over the anchor's own row
        picks = picks + (picks >= row)
        return [int(self.ids[p]) for p in picks]


def sample_unlabeled(training_set, anchor, k, rng):
    return training_set.sample_unlabeled(anchor, k, rng)


@dataclass
class RetrievalTask:
    """Database ``Z``, queries ``Q`` and per-query positives/ignore sets."""

    db_ids: np.ndarray
    db_inputs: np.ndarray
    query_ids: np.ndarray
    query_inputs: np.ndarray
    positives: dict
    ignore: dict = field(default_factory=dict)

    def __post_init__(self):
        self.db_ids = np.asarray(self.db_ids, dtype=np.int64)
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.db_inputs = np.asarray(self.db_inputs, dtype=np.float64)
        self.query_inputs = np.asarray(self.query_inputs, dtype=np.float64)
        db = set(self.db_ids.tolist())
        if db & set(self.query_ids.tolist()):
            raise ValueError("queries and database overlap")
        for q, pos in self.positives.items():
            if not set(pos) <= db:
                raise ValueError(f"positives of query {q} are not all in the database")
            if set(pos) & set(self.ignore.get(q, ())):
                raise ValueError(f"ignore set of query {q} intersects its positives")


@dataclass
class SyntheticConfig:
    num_classes: int = 50
    train_size: int = 2000
    db_size: int = 500
    num_queries: int = 50
    d_in: int = 32
    d_teacher: int = 32
    intra_class_noise: float = 1.0
    teacher_signal: float = 1.0
    hard_noise: float = None
    seed: int = 0

    def validate(self):
        for name in ("num_classes", "train_size", "db_size", "num_queries", "d_in", "d_teacher"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.train_size < 2 * self.num_classes:
            raise ConfigurationError(
                f"train_size ({self.train_size}) must be >= 2 * num_classes ({2 * self.num_classes})")
        if self.intra_class_noise < 0 or (self.hard_noise is not None and self.hard_noise < 0):
            raise ConfigurationError("noise levels must be non-negative")
        if self.teacher_signal < 0:
            raise ConfigurationError("teacher_signal must be non-negative")


@dataclass
class SyntheticData:
    config: SyntheticConfig
    inputs: np.ndarray          # every example, indexed by id
    class_of: dict
    centers: np.ndarray
    training_set: TrainingSet
    task: RetrievalTask
    hard_task: RetrievalTask = None

    @property
    def all_ids(self):
        return np.arange(self.inputs.shape[0], dtype=np.int64)


def _labels_covering(rng, n, num_classes):
    """``n`` class labels; every class appears at least ``n // num_classes`` times."""
    base = np.tile(np.arange(num_classes), n // num_classes)
    extra = rng.integers(0, num_classes, size=n - base.size)
    return rng.permutation(np.concatenate([base, extra]))


def _draw(rng, centers, labels, noise):
    d = centers.shape[1]
    x = centers[labels] + rng.normal(scale=noise / np.sqrt(d), size=(labels.size, d))
    # round through float32 so the on-disk copy is bit-exact
    return x.astype(np.float32).astype(np.float64)


def _retrieval_split(rng, centers, num_classes, db_size, num_queries, noise, first_id):
    db_labels = _labels_covering(rng, db_size, num_classes)
    present = np.unique(db_labels)
    q_labels = rng.choice(present, size=num_queries, replace=True)
    db_x = _draw(rng, centers, db_labels, noise)
    q_x = _draw(rng, centers, q_labels, noise)
    db_ids = np.arange(first_id, first_id + db_size)
    q_ids = np.arange(first_id + db_size, first_id + db_size + num_queries)
    positives = {int(q): [int(z) for z in db_ids[db_labels == lab]]
                 for q, lab in zip(q_ids, q_labels)}
    task = RetrievalTask(db_ids, db_x, q_ids, q_x, positives)
    labels = np.concatenate([db_labels, q_labels])
    return task, labels, np.vstack([db_x, q_x])


def generate_synthetic(config):
    """Landmark-like synthetic data: noisy points around unit class centers.

    Ids are assigned in order: training examples, database, queries, then
    the optional hard-tier database and queries.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    k, d = config.num_classes, config.d_in
    centers = rng.normal(size=(k, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    train_labels = _labels_covering(rng, config.train_size, k)
    train_x = _draw(rng, centers, train_labels, config.intra_class_noise)
    train_ids = np.arange(config.train_size)

    by_class = {}
    for i, lab in zip(train_ids, train_labels):
        by_class.setdefault(int(lab), []).append(int(i))
    positives = {}
    for i, lab in zip(train_ids, train_labels):
        mates = [j for j in by_class[int(lab)] if j != i]
        n_pos = 2 if (len(mates) >= 2 and rng.random() < 0.5) else 1
        positives[int(i)] = sorted(int(j) for j in rng.choice(mates, size=n_pos, replace=False))

    task, eval_labels, eval_x = _retrieval_split(
        rng, centers, k, config.db_size, config.num_queries,
        config.intra_class_noise, config.train_size)
    labels = [train_labels, eval_labels]
    blocks = [train_x, eval_x]

    hard_task = None
    if config.hard_noise is not None:
        first = config.train_size + config.db_size + config.num_queries
        hard_task, hard_labels, hard_x = _retrieval_split(
            rng, centers, k, config.db_size, config.num_queries, config.hard_noise, first)
        labels.append(hard_labels)
        blocks.append(hard_x)

    all_labels = np.concatenate(labels)
    class_of = {int(i): int(c) for i, c in enumerate(all_labels)}
    training_set = TrainingSet(
        train_ids, train_x, positives,
        class_of={int(i): class_of[int(i)] for i in train_ids})
    return SyntheticData(config, np.vstack(blocks), class_of, centers,
                         training_set, task, hard_task)


def _task_to_json(task):
    return {
        "db": task.db_ids.tolist(),
        "queries": task.query_ids.tolist(),
        "positives": {str(q): list(p) for q, p in task.positives.items()},
        "ignore": {str(q): list(p) for q, p in task.ignore.items()},
    }


def _task_from_json(obj, inputs):
    db = np.asarray(obj["db"], dtype=np.int64)
    qs = np.asarray(obj["queries"], dtype=np.int64)
    return RetrievalTask(
        db, inputs[db], qs, inputs[qs],
        {int(q): list(p) for q, p in obj["positives"].items()},
        {int(q): list(p) for q, p in obj.get("ignore", {}).items()})


def save_dataset(data, directory):
    """Write ``meta.json``, ``inputs.f32``, ``pairs.json`` plus splits and labels."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = data.config
    write_json(out / "meta.json", {
        "format_version": FORMAT_VERSION,
        "num_examples": int(data.inputs.shape[0]),
        "d_in": int(data.inputs.shape[1]),
        "d_teacher": cfg.d_teacher,
        "train_size": cfg.train_size,
        "db_size": cfg.db_size,
        "num_queries": cfg.num_queries,
        "num_classes": cfg.num_classes,
        "seed": cfg.seed,
        "config": asdict(cfg),
    })
    write_matrix(out / "inputs.f32", data.inputs)
    write_json(out / "pairs.json",
               {str(a): list(p) for a, p in sorted(data.training_set.positives.items())})
    splits = {"train": data.training_set.ids.tolist(), "task": _task_to_json(data.task)}
    if data.hard_task is not None:
        splits["hard_task"] = _task_to_json(data.hard_task)
    write_json(out / "splits.json", splits)
    write_json(out / "classes.json", {str(i): c for i, c in sorted(data.class_of.items())})
    np.save(out / "centers.npy", data.centers)
    return out


def load_dataset(directory):
    src = Path(directory)
    meta = read_json(src / "meta.json")
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{src}: unsupported dataset format {meta.get('format_version')}")
    inputs = read_matrix(src / "inputs.f32")
    pairs = {int(a): list(p) for a, p in read_json(src / "pairs.json").items()}
    splits = read_json(src / "splits.json")
    class_of = {int(i): int(c) for i, c in read_json(src / "classes.json").items()}
    train = np.asarray(splits["train"], dtype=np.int64)
    training_set = TrainingSet(train, inputs[train], pairs,
                               class_of={int(i): class_of[int(i)] for i in train})
    task = _task_from_json(splits["task"], inputs)
    hard = _task_from_json(splits["hard_task"], inputs) if "hard_task" in splits else None
    config = SyntheticConfig(**meta["config"])
    centers = np.load(src / "centers.npy")
    return SyntheticData(config, inputs, class_of, centers, training_set, task, hard)

"""Supervised whitening, ranking, and symmetric/asymmetric retrieval testing."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from asymml.errors import ConfigurationError
from asymml.geometry import normalize_rows

log = logging.getLogger(__name__)

WHITENING_FLOOR = 1e-6
PROTOCOLS = ("symmetric", "asymmetric")
RESULTS_HEADER_COMMENT = "# asymml results v1"
RESULTS_COLUMNS = ["protocol", "loss", "mode", "mAP", "mP@10", "seed", "config_digest", "timestamp"]


@dataclass
class WhiteningTransform:
    mean: np.ndarray
    projection: np.ndarray
    space: str = "student"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)

    @classmethod
    def identity(cls, d, space="student"):
        return cls(np.zeros(d), np.eye(d), space)

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"whitening expects dimension {self.mean.shape[0]}, got {v.shape[-1]}")
        return (v - self.mean) @ self.projection.T


def apply_whitening(t, v):
    return t.apply(v)


def _inv_sqrt(c, floor):
    vals, vecs = np.linalg.eigh((c + c.T) / 2)
    # no pair variance at all: fall back to an absolute floor (scaled identity)
    top = vals.max() if vals.max() > 0 else 1.0
    vals = np.maximum(vals, floor * top)
    return (vecs / np.sqrt(vals)) @ vecs.T


def fit_whitening(embeddings, pairs, space="student", floor=WHITENING_FLOOR):
    """Learn whitening from positive pairs.

    ``embeddings`` maps ids to vectors (a dict or a callable), ``pairs`` is a
    list of ``(a, p)`` ids.  The pair-difference covariance is whitened
    first, then the whitened, centered data is rotated onto its principal
    axes (largest variance first).
    """
    if len(pairs) < 2:
        raise ValueError("whitening needs at least two positive pairs")
    get = embeddings if callable(embeddings) else embeddings.__getitem__
    ids = sorted({i for pair in pairs for i in pair})
    x = np.array([get(i) for i in ids], dtype=np.float64)
    row = {i: r for r, i in enumerate(ids)}
    a = x[[row[p[0]] for p in pairs]]
    b = x[[row[p[1]] for p in pairs]]
    return fit_whitening_arrays(x, a - b, space, floor)


def fit_whitening_arrays(data, diffs, space="student", floor=WHITENING_FLOOR):
    data = np.asarray(data, dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.shape[0] < 2:
        raise ValueError("whitening needs at least two positive pairs")
    mu = data.mean(axis=0)
    c_s = diffs.T @ diffs / diffs.shape[0]
    w1 = _inv_sqrt(c_s, floor)
    proj = (data - mu) @ w1.T
    c_d = proj.T @ proj / proj.shape[0]
    vals, vecs = np.linalg.eigh((c_d + c_d.T) / 2)
    order = np.argsort(vals)[::-1]
    rot = vecs[:, order].T
    return WhiteningTransform(mu, rot @ w1, space)


def rank_database(query, db_ids, db_embeddings, ignore=()):
    """Database ids by descending cosine similarity, ties by ascending id."""
    db_ids = np.asarray(db_ids, dtype=np.int64)
    q = normalize_rows(np.asarray(query, dtype=np.float64)[None, :])[0]
    sims = normalize_rows(db_embeddings) @ q
    if len(ignore):
        keep = ~np.isin(db_ids, list(ignore))
        db_ids, sims = db_ids[keep], sims[keep]
    order = np.lexsort((db_ids, -sims))
    return db_ids[order]


def average_precision(ranked, positives):
    """Mean over positives of precision at each positive's rank."""
    positives = set(int(p) for p in positives)
    if not positives:
        raise ValueError("average precision is undefined without positives")
    hits = np.flatnonzero(np.isin(np.asarray(ranked), list(positives)))
    # positives missing from the ranking contribute zero precision
    if hits.size == 0:
        return 0.0
    found = np.arange(1, hits.size + 1)
    return float(np.sum(found / (hits + 1)) / len(positives))


def precision_at_k(ranked, positives, k=10):
    """Positives among the top ``k``, over ``min(k, |positives|)``."""
    positives = set(int(p) for p in positives)
    if not positives:
        raise ValueError("precision is undefined without positives")
    top = [int(r) for r in ranked[:k]]
    return sum(r in positives for r in top) / min(k, len(positives))


@dataclass
class EvalReport:
    protocol: str
    aps: list
    precisions: list
    query_ids: list
    mAP: float
    mP10: float
    config_digest: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "protocol": self.protocol,
            "mAP": self.mAP,
            "mP@10": self.mP10,
            "per_query": [{"query": q, "ap": a, "p@10": p}
                          for q, a, p in zip(self.query_ids, self.aps, self.precisions)],
            "config_digest": self.config_digest,
            "meta": self.meta,
        }, sort_keys=True, indent=2)

    def csv_row(self, loss="", mode="", seed="", timestamp=""):
        return [self.protocol, loss, mode, repr(self.mAP), repr(self.mP10), seed,
                self.config_digest, timestamp]


def append_results(path, rows):
    """Append rows to a results CSV, writing the versioned header once."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(RESULTS_HEADER_COMMENT + "\n")
            csv.writer(fh).writerow(RESULTS_COLUMNS)
        w = csv.writer(fh)
        for r in rows:
            w.writerow(r)


def _encode(encoder, ids, inputs):
    if hasattr(encoder, "forward"):
        return encoder.forward(inputs)
    if hasattr(encoder, "embed_many"):
        return encoder.embed_many(ids)
    return np.asarray(encoder(ids, inputs), dtype=np.float64)


def evaluate(protocol, student, teacher, task, whitening=None, config_digest="", k=10):
    """Retrieval testing of ``task``.

    Queries are always embedded by ``student``.  The database is embedded by
    the student (``symmetric``) or the teacher (``asymmetric``).  Whitening,
    if given, must have been fitted in the matching space and is applied to
    both sides.  ``student`` may be a :class:`StudentModel`, a
    :class:`TeacherModel`, or a callable ``(ids, inputs) -> embeddings``.
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    db_space = "student" if protocol == "symmetric" else "teacher"
    if whitening is not None and whitening.space != db_space:
        raise ConfigurationError(
            f"{protocol} testing needs whitening fitted in {db_space} space, "
            f"got {whitening.space}")
    queries = _encode(student, task.query_ids, task.query_inputs)
    db_encoder = student if protocol == "symmetric" else teacher
    db = _encode(db_encoder, task.db_ids, task.db_inputs)
    if whitening is not None:
        queries = whitening.apply(queries)
        db = whitening.apply(db)
    db_unit = normalize_rows(db)
    q_unit = normalize_rows(queries)
    sims = q_unit @ db_unit.T

    aps, precs, qids = [], [], []
    for i, q in enumerate(task.query_ids):
        q = int(q)
        pos = task.positives.get(q, ())
        if not pos:
            log.warning("query %d has no positives; skipped", q)
            continue
        ignore = task.ignore.get(q, ())
        ids, s = task.db_ids, sims[i]
        if len(ignore):
            keep = ~np.isin(ids, list(ignore))
            ids, s = ids[keep], s[keep]
        ranked = ids[np.lexsort((ids, -s))]
        aps.append(average_precision(ranked, pos))
        precs.append(precision_at_k(ranked, pos, k))
        qids.append(q)
    if not aps:
        raise ValueError("no query with positives to evaluate")
    return EvalReport(protocol, aps, precs, qids, float(np.mean(aps)), float(np.mean(precs)),
                      config_digest, {"db_space": db_space,
                                      "whitening_space": None if whitening is None else whitening.space})


def training_pairs(training_set):
    return [(a, p) for a, ps in sorted(training_set.positives.items()) for p in ps]


def fit_whitening_for(protocol, student, teacher, training_set):
    """Whitening in the space the protocol's database lives in."""
    pairs = training_pairs(training_set)
    if protocol == "asymmetric":
        return fit_whitening(teacher.embed, pairs, space="teacher")
    if protocol != "symmetric":
        raise ConfigurationError(f"unknown protocol {protocol!r}")
    emb = _encode(student, training_set.ids, training_set.inputs)
    table = {int(i): emb[r] for r, i in enumerate(training_set.ids)}
    return fit_whitening(table, pairs, space="student")

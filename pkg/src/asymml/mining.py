"""Per-epoch hard-negative mining in symmetric or asymmetric similarity."""

from dataclasses import dataclass

import numpy as np

from asymml.geometry import SimilarityMode, normalize_rows


@dataclass
class MiningConfig:
    pool_size: int = 1000
    k_negatives: int = 5
    mode: SimilarityMode = SimilarityMode.ASYMMETRIC
    # also drop candidates sharing the anchor's ground-truth class
    exclude_same_class: bool = True
    seed: int = 0

    def __post_init__(self):
        self.mode = SimilarityMode.parse(self.mode)
        if self.k_negatives < 1:
            raise ValueError("k_negatives must be >= 1")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


def refresh_epoch_pool(training_set, cfg, epoch, seed=None):
    """Uniform random subset of training ids for this epoch's mining."""
    n = len(training_set)
    if cfg.pool_size > n:
        raise ValueError(f"pool_size {cfg.pool_size} exceeds training set size {n}")
    seed = cfg.seed if seed is None else seed
    if cfg.pool_size == n:
        return training_set.ids.copy()
    rng = np.random.default_rng([seed, epoch, 0x6d696e65])
    picks = np.sort(rng.choice(n, size=cfg.pool_size, replace=False))
    return training_set.ids[picks]


def top_k(ids, sims, k):
    """Indices of the ``k`` best candidates, similarity descending, ties by id."""
    order = np.lexsort((ids, -sims))
    return order[:k]


def mine_hard_negatives(anchors, student, teacher, training_set, pool, cfg, anchor_embeddings=None):
    """Most similar non-positive candidates from ``pool`` for each anchor.

    The anchor is always embedded by the student.  Candidates come from the
    teacher table in asymmetric mode (never recomputed) and from the student
    in symmetric mode.  Returns ``{anchor: [(id, similarity), ...]}`` with
    ``k_negatives`` entries sorted by descending similarity.
    """
    pool = np.asarray(pool, dtype=np.int64)
    anchors = [int(a) for a in anchors]
    if anchor_embeddings is None:
        anchor_embeddings = student.forward(training_set.inputs_of(anchors))
    anchor_unit = normalize_rows(anchor_embeddings)
    if cfg.mode is SimilarityMode.ASYMMETRIC:
        cand = teacher.embed_many(pool)
    else:
        cand = student.forward(training_set.inputs_of(pool))
    cand_unit = normalize_rows(cand)
    sims = anchor_unit @ cand_unit.T
    pool_pos = {int(c): j for j, c in enumerate(pool)}
    by_class = cfg.exclude_same_class and bool(training_set.class_of)
    if by_class:
        pool_cls = np.array([training_set.class_of.get(int(c), -1) for c in pool])

    result = {}
    for i, a in enumerate(anchors):
        keep = np.ones(len(pool), dtype=bool)
        if by_class:
            keep &= pool_cls != training_set.class_of.get(a, -2)
        for c in (a, *training_set.positives.get(a, ())):
            j = pool_pos.get(c)
            if j is not None:
                keep[j] = False
        if keep.sum() < cfg.k_negatives:
            raise ValueError(
                f"anchor {a}: only {int(keep.sum())} candidates left after exclusions, "
                f"need {cfg.k_negatives}")
        cand_ids = pool[keep]
        cand_sims = sims[i, keep]
        best = top_k(cand_ids, cand_sims, cfg.k_negatives)
        result[a] = [(int(cand_ids[j]), float(cand_sims[j])) for j in best]
    return result

"""SGD over tuples with per-epoch mining, lr decay, weight decay and
validation-based model selection."""

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from asymml.errors import ConfigurationError, DegenerateInputError, TrainingDiverged
from asymml.geometry import SimilarityMode
from asymml.losses import LossConfig, LossKind, TupleEmbeddings, tuple_loss
from asymml.mining import MiningConfig, mine_hard_negatives, refresh_epoch_pool

log = logging.getLogger(__name__)

SYM, ASYM = SimilarityMode.SYMMETRIC, SimilarityMode.ASYMMETRIC

# initial learning rates used with the full-size backbones
BACKBONE_LEARNING_RATES = {
    (LossKind.CONTRASTIVE, SYM): 1e-5,
    (LossKind.CONTRASTIVE, ASYM): 1e-3,
    (LossKind.TRIPLET, SYM): 1e-8,
    (LossKind.TRIPLET, ASYM): 1e-8,
    (LossKind.MULTI_SIMILARITY, SYM): 1e-8,
    (LossKind.MULTI_SIMILARITY, ASYM): 1e-8,
    (LossKind.REGRESSION, ASYM): 1e-3,
    (LossKind.RKD, SYM): 1e-2,
    (LossKind.RKD, ASYM): 1e-2,
    (LossKind.DARKRANK, SYM): 1e-6,
    (LossKind.DARKRANK, ASYM): 1e-6,
}

FULL_EPOCHS = {SYM: 100, ASYM: 300}
DESK_EPOCHS = {SYM: 50, ASYM: 150}


def backbone_learning_rate(loss):
    cfg = loss.resolved()
    key = (cfg.kind, cfg.mode)
    if key not in BACKBONE_LEARNING_RATES:
        raise ConfigurationError(f"no default learning rate for {cfg.kind.value}/{cfg.mode.value}")
    return BACKBONE_LEARNING_RATES[key]


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    # None means: backbone rate for (loss, mode) times lr_scale
    learning_rate: float = None
    lr_scale: float = 1.0
    lr_decay: float = 0.99
    weight_decay: float = 1e-6
    # an int, a {"sym": n, "asym": n} mapping, or None for the desk default
    epochs: int = None
    tuples_per_epoch: int = 200
    batch_tuples: int = 10
    num_positives: int = 1
    num_negatives: int = 5
    mining: MiningConfig = field(default_factory=MiningConfig)
    validation_fraction: float = 0.1
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.mining, dict):
            self.mining = MiningConfig(**self.mining)

    @property
    def tuple_size(self):
        return self.num_positives + self.num_negatives

    def initial_lr(self):
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return backbone_learning_rate(self.loss) * self.lr_scale

    def num_epochs(self):
        mode = self.loss.resolved().mode
        if self.epochs is None:
            return DESK_EPOCHS[mode]
        if isinstance(self.epochs, dict):
            if mode.value not in self.epochs:
                raise ConfigurationError(f"epochs has no entry for mode {mode.value!r}")
            return int(self.epochs[mode.value])
        return int(self.epochs)

    def validate(self):
        self.loss.resolved()
        if self.initial_lr() < 0 or self.lr_decay <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate, decay and weight decay must be non-negative")
        if self.num_epochs() < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_tuples < 1 or self.tuples_per_epoch < 1:
            raise ConfigurationError("batch_tuples and tuples_per_epoch must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must be in (0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["mining"]["mode"] = self.mining.mode.value
        return d


def lr_at_epoch(lr0, decay, epoch):
    """Learning rate in effect after ``epoch`` completed epochs."""
    return lr0 * decay**epoch


@dataclass
class Tuple:
    anchor: int
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_score: float
    best_so_far: float


@dataclass
class TrainingLog:
    initial_val_score: float = None
    best_epoch: int = 0
    records: list = field(default_factory=list)
    stopped_early: bool = False

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "val_score", "best_so_far"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_score),
                            repr(r.best_so_far)])


def split_validation(training_set, fraction, seed):
    """Deterministic anchor split into (train_anchors, val_anchors)."""
    rng = np.random.default_rng([seed, 0x76616c])
    ids = training_set.ids
    n_val = max(1, int(round(fraction * len(ids))))
    perm = rng.permutation(len(ids))
    val = np.sort(ids[perm[:n_val]])
    train = np.sort(ids[perm[n_val:]])
    return train, val


def _random_negatives(training_set, anchor, k, rng, exclude_same_class):
    banned = {anchor, *training_set.positives.get(anchor, ())}
    cls = training_set.class_of.get(anchor) if exclude_same_class else None
    cands = [int(i) for i in training_set.ids
             if int(i) not in banned and (cls is None or training_set.class_of.get(int(i)) != cls)]
    if len(cands) < k:
        raise ValueError(f"anchor {anchor}: not enough negative candidates")
    return sorted(int(c) for c in rng.choice(cands, size=k, replace=False))


def build_validation_tuples(training_set, val_anchors, cfg):
    """Fixed held-out tuples with random (not mined) negatives."""
    loss = cfg.loss.resolved()
    rng = np.random.default_rng([cfg.seed, 0x76616c, 1])
    tuples = []
    for a in val_anchors:
        a = int(a)
        t = Tuple(a)
        if loss.uses_labels:
            pos = list(training_set.positives.get(a, ()))
            if pos:
                t.positives = [int(p) for p in rng.choice(pos, size=min(cfg.num_positives, len(pos)),
                                                          replace=False)]
            t.negatives = _random_negatives(training_set, a, cfg.num_negatives, rng,
                                            cfg.mining.exclude_same_class)
        elif loss.uses_unlabeled:
            t.unlabeled = training_set.sample_unlabeled(a, cfg.tuple_size, rng)
        tuples.append(t)
    return tuples


class _TupleEvaluator:
    """Evaluates loss and parameter gradient for a list of tuples."""

    def __init__(self, loss, training_set, teacher):
        self.loss = loss.resolved()
        self.ts = training_set
        self.teacher = teacher
        self.student_sides = self.loss.mode is SYM and self.loss.uses_labels

    def _rows(self, t):
        rows = [t.anchor]
        if self.student_sides:
            rows += t.positives + t.negatives
        rows += t.unlabeled
        return rows

    def __call__(self, student, tuples, need_grad=True):
        """Summed loss, per-tuple values and the parameter gradient.

        Tuples of equal shape are stacked and pushed through the loss in
        one vectorized call; the sum is reduced in tuple order.
        """
        ids = []
        spans = []
        for t in tuples:
            r = self._rows(t)
            spans.append(len(ids))
            ids += r
        x = self.ts.inputs_of(ids)
        emb = student.forward(x)
        upstream = np.zeros_like(emb) if need_grad else None
        values = np.zeros(len(tuples))
        groups = {}
        for i, t in enumerate(tuples):
            groups.setdefault((len(t.positives), len(t.negatives), len(t.unlabeled)), []).append(i)
        for (npos, nneg, nunl), members in groups.items():
            self._group(emb, upstream, values, [tuples[i] for i in members],
                        [spans[i] for i in members], members, npos, nneg, nunl)
        total = 0.0
        for v in values:
            total += float(v)
        if not need_grad:
            return total, values, None
        return total, values, student.backward(x, upstream)

    def _group(self, emb, upstream, values, tuples, starts, members, npos, nneg, nunl):
        loss, teacher = self.loss, self.teacher
        starts = np.asarray(starts)
        anchors = [t.anchor for t in tuples]
        te = TupleEmbeddings(anchor=emb[starts], anchor_teacher=teacher.embed_many(anchors))
        pos_idx = neg_idx = unl_idx = None
        if loss.uses_labels:
            if self.student_sides:
                pos_idx = starts[:, None] + 1 + np.arange(npos)
                neg_idx = starts[:, None] + 1 + npos + np.arange(nneg)
                te.positives = emb[pos_idx]
                te.negatives = emb[neg_idx]
            else:
                d = teacher.dim
                te.positives = teacher.embed_many(
                    [p for t in tuples for p in t.positives]).reshape(len(tuples), npos, d)
                te.negatives = teacher.embed_many(
                    [n for t in tuples for n in t.negatives]).reshape(len(tuples), nneg, d)
        if nunl:
            off = 1 + (npos + nneg if self.student_sides else 0)
            unl_idx = starts[:, None] + off + np.arange(nunl)
            te.unlabeled = emb[unl_idx]
            te.unlabeled_teacher = teacher.embed_many(
                [u for t in tuples for u in t.unlabeled]).reshape(len(tuples), nunl, teacher.dim)
        value, grads = tuple_loss(loss, te)
        values[members] = value
        if upstream is None:
            return
        np.add.at(upstream, starts, grads["anchor"])
        if pos_idx is not None:
            np.add.at(upstream, pos_idx, grads["positives"])
            np.add.at(upstream, neg_idx, grads["negatives"])
        if unl_idx is not None:
            np.add.at(upstream, unl_idx, grads["unlabeled"])


def validation_score(student, val_tuples, loss, training_set, teacher):
    """Mean per-anchor loss over the held-out tuples (lower is better)."""
    if not val_tuples:
        raise ValueError("empty validation split")
    total, _, _ = _TupleEvaluator(loss, training_set, teacher)(student, val_tuples, need_grad=False)
    return total / len(val_tuples)


def _assemble_tuples(anchors, loss, cfg, training_set, mined, rng):
    tuples = []
    for a in anchors:
        a = int(a)
        t = Tuple(a)
        if loss.uses_labels:
            pos = list(training_set.positives.get(a, ()))
            if loss.use_positives and pos:
                t.positives = [int(p) for p in rng.choice(pos, size=min(cfg.num_positives, len(pos)),
                                                          replace=False)]
            if mined is not None:
                t.negatives = [c for c, _ in mined[a]]
        elif loss.uses_unlabeled:
            t.unlabeled = training_set.sample_unlabeled(a, cfg.tuple_size, rng)
        tuples.append(t)
    return tuples


def train(training_set, teacher, student_init, cfg, on_epoch_start=None, on_best=None):
    """Minimize the summed per-anchor loss with plain SGD.

    Each epoch: refresh the mining pool and mine negatives (label losses) or
    draw unlabeled examples (teacher-only losses), step over batches of
    ``batch_tuples`` tuples with ``theta -= lr * (grad + weight_decay * theta)``,
    decay the learning rate, score the validation split and keep the best
    parameters.  Returns ``(best_student, TrainingLog)``.
    """
    cfg.validate()
    loss = cfg.loss.resolved()
    if student_init.dim != teacher.dim:
        raise ConfigurationError(
            f"student output dim {student_init.dim} != teacher dim {teacher.dim}")
    if student_init.d_in != training_set.dim:
        raise ConfigurationError("student input dim does not match the training inputs")

    student = student_init.copy()
    lr0 = cfg.initial_lr()
    epochs = cfg.num_epochs()
    mining_cfg = replace(cfg.mining, k_negatives=cfg.num_negatives, mode=loss.mode)
    mine = loss.uses_labels and loss.use_negatives
    train_anchors, val_anchors = split_validation(training_set, cfg.validation_fraction, cfg.seed)
    val_tuples = build_validation_tuples(training_set, val_anchors, cfg)
    evaluate = _TupleEvaluator(loss, training_set, teacher)
    rng = np.random.default_rng([cfg.seed, 0x747570])

    best = student.copy()
    best_score = validation_score(student, val_tuples, loss, training_set, teacher)
    result = TrainingLog(initial_val_score=best_score)
    since_best = 0

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            lr = lr_at_epoch(lr0, cfg.lr_decay, epoch - 1)
            pool = refresh_epoch_pool(training_set, mining_cfg, epoch, cfg.seed) if mine else None
            if on_epoch_start is not None:
                on_epoch_start(epoch, student, pool)
            n_tuples = min(cfg.tuples_per_epoch, len(train_anchors))
            anchors = rng.choice(train_anchors, size=n_tuples, replace=False)
            mined = None
            if mine:
                try:
                    mined = mine_hard_negatives(anchors, student, teacher, training_set, pool,
                                                mining_cfg)
                except DegenerateInputError as exc:
                    raise TrainingDiverged(epoch, 0, str(exc)) from exc
            tuples = _assemble_tuples(anchors, loss, cfg, training_set, mined, rng)

            epoch_loss = 0.0
            for b, start in enumerate(range(0, len(tuples), cfg.batch_tuples)):
                batch = tuples[start:start + cfg.batch_tuples]
                try:
                    value, _, grad = evaluate(student, batch)
                except DegenerateInputError as exc:
                    raise TrainingDiverged(epoch, b, str(exc)) from exc
                if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                    raise TrainingDiverged(epoch, b, f"loss={value}")
                theta = student.theta - lr * (grad + cfg.weight_decay * student.theta)
                if not np.all(np.isfinite(theta)):
                    raise TrainingDiverged(epoch, b, "non-finite parameters")
                student.theta = theta
                epoch_loss += value

            try:
                score = validation_score(student, val_tuples, loss, training_set, teacher)
            except DegenerateInputError as exc:
                raise TrainingDiverged(epoch, -1, str(exc)) from exc
            if not np.isfinite(score):
                raise TrainingDiverged(epoch, -1, f"validation score {score}")
            if score < best_score:
                best_score = score
                best = student.copy()
                result.best_epoch = epoch
                since_best = 0
                if on_best is not None:
                    on_best(epoch, best)
            else:
                since_best += 1
            result.records.append(EpochRecord(epoch, lr, epoch_loss / len(tuples), score, best_score))
            log.debug("epoch %d lr %.3g loss %.6f val %.6f", epoch, lr,
                      epoch_loss / len(tuples), score)
            if cfg.patience and since_best >= cfg.patience:
                result.stopped_early = True
                break
    return best, result

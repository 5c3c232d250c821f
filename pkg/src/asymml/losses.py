"""Per-anchor loss functions with analytic gradients w.r.t. student embeddings.

Every loss returns ``(value, grads)``.  ``grads`` maps a role name
(``"anchor"``, ``"positives"``, ``"negatives"``, ``"unlabeled"``) to the
gradient of ``value`` w.r.t. the *student* embeddings playing that role.
Roles embedded by the teacher are constants and are left out: under
asymmetric similarity only the anchor gets a gradient.
"""

from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from asymml.errors import ConfigurationError, DegenerateInputError
from asymml.geometry import SimilarityMode, cosine_with_grad, normalize_rows


class LossKind(str, Enum):
    CONTRASTIVE = "contrastive"
    CONTRASTIVE_PLUS = "contrastive_plus"
    TRIPLET = "triplet"
    MULTI_SIMILARITY = "multi_similarity"
    REGRESSION = "regression"
    RKD = "rkd"
    DARKRANK = "darkrank"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"contr": cls.CONTRASTIVE, "contr+": cls.CONTRASTIVE_PLUS,
                   "contr_plus": cls.CONTRASTIVE_PLUS, "ms": cls.MULTI_SIMILARITY,
                   "reg": cls.REGRESSION, "dr": cls.DARKRANK}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


LABEL_LOSSES = (LossKind.CONTRASTIVE, LossKind.CONTRASTIVE_PLUS, LossKind.TRIPLET,
                LossKind.MULTI_SIMILARITY)
TEACHER_LOSSES = (LossKind.REGRESSION, LossKind.RKD, LossKind.DARKRANK)

DEFAULT_MARGINS = {
    LossKind.CONTRASTIVE: 0.7,
    LossKind.CONTRASTIVE_PLUS: 0.7,
    LossKind.TRIPLET: 0.1,
    LossKind.MULTI_SIMILARITY: 0.6,
}


@dataclass
class RKDConfig:
    distance_weight: float = 1.0
    angle_weight: float = 2.0
    huber_delta: float = 1.0
    normalize_distances: bool = True
    # "distance_angle" is the usual RKD; "identity" compares anchor features directly
    measurement: str = "distance_angle"
    # "huber", or "neg_cosine" (only meaningful with the identity measurement)
    regression: str = "huber"


@dataclass
class LossConfig:
    kind: LossKind = LossKind.REGRESSION
    margin: float = None
    alpha: float = 1.0
    beta: float = 1.0
    rkd: RKDConfig = field(default_factory=RKDConfig)
    mode: SimilarityMode = SimilarityMode.ASYMMETRIC
    include_self_positive: bool = False
    use_positives: bool = True
    use_negatives: bool = True

    def __post_init__(self):
        self.kind = LossKind.parse(self.kind)
        self.mode = SimilarityMode.parse(self.mode)
        if isinstance(self.rkd, dict):
            self.rkd = RKDConfig(**self.rkd)

    def resolved(self):
        """Canonical form: Contr+ expanded, defaults filled, invariants checked."""
        cfg = replace(self, rkd=replace(self.rkd))
        if cfg.kind is LossKind.CONTRASTIVE_PLUS:
            cfg = replace(cfg, kind=LossKind.CONTRASTIVE, mode=SimilarityMode.ASYMMETRIC,
                          include_self_positive=True, use_positives=True, use_negatives=True)
        if cfg.kind is LossKind.REGRESSION:
            cfg = replace(cfg, mode=SimilarityMode.ASYMMETRIC)
        if cfg.margin is None and cfg.kind in DEFAULT_MARGINS:
            cfg = replace(cfg, margin=DEFAULT_MARGINS[cfg.kind])
        if cfg.kind is LossKind.CONTRASTIVE and cfg.include_self_positive \
                and cfg.mode is SimilarityMode.SYMMETRIC:
            raise ConfigurationError(
                "include_self_positive needs asymmetric similarity; "
                "in student space the anchor's self-similarity is constant")
        if cfg.kind is LossKind.MULTI_SIMILARITY and (cfg.alpha <= 0 or cfg.beta <= 0):
            raise ConfigurationError("multi-similarity needs alpha > 0 and beta > 0")
        return cfg

    @property
    def uses_labels(self):
        return self.kind in LABEL_LOSSES

    @property
    def uses_unlabeled(self):
        return self.kind in (LossKind.RKD, LossKind.DARKRANK)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        d["mode"] = self.mode.value
        return d


def _set(x, like):
    """Stack of example embeddings shaped ``(..., k, d)`` (``k`` may be 0)."""
    if x is None:
        return np.zeros(like.shape[:-1] + (0, like.shape[-1]))
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == like.ndim:
        x = x.reshape(like.shape[:-1] + (-1, like.shape[-1]))
    return x


def _out(value):
    return float(value) if np.ndim(value) == 0 else value


def _combine(*terms):
    """Contract ``(..., k)`` weights with ``(..., k, d)`` Jacobians and add up."""
    return sum(np.einsum("...k,...kd->...d", w, j) for w, j in terms)


def loss_contrastive(anchor, positives, negatives, cfg, anchor_teacher=None):
    """``-sum_p s(a,p) + sum_n [s(a,n) - m]_+``, optionally with the anchor's
    teacher embedding as an extra positive.

    All arguments may carry matching leading batch dimensions; the value is
    then one loss per anchor.
    """
    cfg = cfg.resolved()
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = _set(positives, anchor)
    negatives = _set(negatives, anchor)
    pos = positives if cfg.use_positives else _set(None, anchor)
    neg = negatives if cfg.use_negatives else _set(None, anchor)
    if cfg.include_self_positive and anchor_teacher is None:
        raise ValueError("include_self_positive needs the anchor's teacher embedding")
    if not cfg.include_self_positive and pos.shape[-2] == 0 and neg.shape[-2] == 0:
        raise ValueError("contrastive loss needs at least one positive or negative")

    value = np.zeros(anchor.shape[:-1])
    g_a = np.zeros_like(anchor)
    if cfg.include_self_positive:
        s, da, _ = cosine_with_grad(anchor, _set(anchor_teacher, anchor))
        value = value - s[..., 0]
        g_a = g_a - da[..., 0, :]
    g_p = np.zeros_like(positives)
    if pos.shape[-2]:
        s, da, dp = cosine_with_grad(anchor, pos)
        value = value - s.sum(axis=-1)
        g_a = g_a - da.sum(axis=-2)
        g_p = -dp
    g_n = np.zeros_like(negatives)
    if neg.shape[-2]:
        s, da, dn = cosine_with_grad(anchor, neg)
        active = (s > cfg.margin).astype(np.float64)
        value = value + np.sum(active * (s - cfg.margin), axis=-1)
        g_a = g_a + _combine((active, da))
        g_n = dn * active[..., None]
    return _pack(cfg.mode, value, g_a, positives=g_p, negatives=g_n)


def loss_triplet(anchor, positives, negatives, cfg):
    """Sum over all (p, n) of ``[s(a,n) - s(a,p) + m]_+``."""
    cfg = cfg.resolved()
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = _set(positives, anchor)
    negatives = _set(negatives, anchor)
    if positives.shape[-2] == 0 or negatives.shape[-2] == 0:
        raise ValueError("triplet loss needs at least one positive and one negative")
    sp, dap, dp = cosine_with_grad(anchor, positives)
    sn, dan, dn = cosine_with_grad(anchor, negatives)
    margins = sn[..., None, :] - sp[..., :, None] + cfg.margin
    active = (margins > 0).astype(np.float64)
    value = np.sum(active * margins, axis=(-2, -1))
    cnt_p = active.sum(axis=-1)
    cnt_n = active.sum(axis=-2)
    g_a = _combine((cnt_n, dan), (-cnt_p, dap))
    return _pack(cfg.mode, value, g_a,
                 positives=-cnt_p[..., None] * dp, negatives=cnt_n[..., None] * dn)


def _log1p_sum_exp(z):
    """``log(1 + sum(exp(z)))`` over the last axis, and the weights
    ``exp(z) / (1 + sum(exp(z)))``."""
    top = np.maximum(z.max(axis=-1, initial=0.0), 0.0)
    total = top + np.log(np.exp(-top) + np.exp(z - top[..., None]).sum(axis=-1))
    return total, np.exp(z - total[..., None])


def loss_multi_similarity(anchor, positives, negatives, cfg):
    cfg = cfg.resolved()
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = _set(positives, anchor)
    negatives = _set(negatives, anchor)
    a, b, m = cfg.alpha, cfg.beta, cfg.margin
    sp, dap, dp = cosine_with_grad(anchor, positives)
    sn, dan, dn = cosine_with_grad(anchor, negatives)
    lp, wp = _log1p_sum_exp(-a * (sp - m))
    ln, wn = _log1p_sum_exp(b * (sn - m))
    value = lp / a + ln / b
    # d value / d s_p = -w_p, d value / d s_n = w_n
    g_a = np.zeros_like(anchor) + _combine((wn, dan), (-wp, dap))
    return _pack(cfg.mode, value, g_a,
                 positives=-wp[..., None] * dp, negatives=wn[..., None] * dn)


def loss_regression(anchor, anchor_teacher):
    """``-sim(f(a), g(a))``; depends on the anchor alone."""
    anchor = np.asarray(anchor, dtype=np.float64)
    s, da, _ = cosine_with_grad(anchor, _set(anchor_teacher, anchor))
    return _out(-s[..., 0]), {"anchor": -da[..., 0, :]}


def huber(t, delta):
    t = np.asarray(t, dtype=np.float64)
    small = np.abs(t) <= delta
    val = np.where(small, 0.5 * t * t, delta * (np.abs(t) - 0.5 * delta))
    grad = np.where(small, t, delta * np.sign(t))
    return val, grad


def _lengths(v):
    n = np.sqrt(np.einsum("...d,...d->...", v, v))
    if n.size and not n.min() > 0:
        raise DegenerateInputError("coincident embeddings in relational measurement")
    return n


def _distance_term(fa, fu, ga, gu, rkd):
    diff = fa[..., None, :] - fu
    dist = _lengths(diff)
    tdist = np.linalg.norm(ga[..., None, :] - gu, axis=-1)
    k = dist.shape[-1]
    if rkd.normalize_distances:
        mu = dist.mean(axis=-1, keepdims=True)
        tmu = tdist.mean(axis=-1, keepdims=True)
        psi, tpsi = dist / mu, tdist / tmu
    else:
        psi, tpsi = dist, tdist
    val, h = huber(psi - tpsi, rkd.huber_delta)
    if rkd.normalize_distances:
        g_dist = h / mu - np.sum(h * dist, axis=-1, keepdims=True) / (k * mu * mu)
    else:
        g_dist = h
    g_diff = (g_dist / dist)[..., None] * diff
    return val.sum(axis=-1), g_diff.sum(axis=-2), -g_diff


def _angle_term(fa, fu, ga, gu, rkd):
    e = fa[..., None, :] - fu
    en = _lengths(e)
    e_hat = e / en[..., None]
    cos = np.einsum("...id,...jd->...ij", e_hat, e_hat)
    t = ga[..., None, :] - gu
    t_hat = t / _lengths(t)[..., None]
    tcos = np.einsum("...id,...jd->...ij", t_hat, t_hat)
    off = ~np.eye(fu.shape[-2], dtype=bool)
    val, h = huber(cos - tcos, rkd.huber_delta)
    val = np.where(off, val, 0.0)
    h = np.where(off, h, 0.0)
    # ordered pairs: entries (x, y) and (y, x) share the same cosine
    w = h + np.swapaxes(h, -1, -2)
    g_e = (np.einsum("...ij,...jd->...id", w, e_hat)
           - np.sum(w * cos, axis=-1)[..., None] * e_hat) / en[..., None]
    return val.sum(axis=(-2, -1)), g_e.sum(axis=-2), -g_e


def loss_rkd(anchor, unlabeled, cfg, anchor_teacher, unlabeled_teacher=None):
    """Relational distillation: match distances ``|a - x|`` and angles
    ``sim(a - x, a - y)`` between student and teacher spaces.

    Both sides live in their own raw embedding space, so every student
    embedding involved receives a gradient.
    """
    cfg = cfg.resolved()
    rkd = cfg.rkd
    fa = np.asarray(anchor, dtype=np.float64)
    ga = np.asarray(anchor_teacher, dtype=np.float64)
    fu = _set(unlabeled, fa)
    if rkd.measurement == "identity":
        if rkd.regression == "neg_cosine":
            value, grads = loss_regression(fa, ga)
        elif rkd.regression == "huber":
            val, h = huber(fa - ga, rkd.huber_delta)
            value, grads = _out(val.sum(axis=-1)), {"anchor": h}
        else:
            raise ConfigurationError(f"unknown RKD regression {rkd.regression!r}")
        grads["unlabeled"] = np.zeros_like(fu)
        return value, grads
    if rkd.measurement != "distance_angle":
        raise ConfigurationError(f"unknown RKD measurement {rkd.measurement!r}")
    if rkd.regression != "huber":
        raise ConfigurationError("distance/angle RKD uses the Huber regression")
    gu = _set(unlabeled_teacher, ga)
    if gu.shape != fu.shape:
        raise ValueError("student and teacher unlabeled sets differ in shape")
    need = 2 if rkd.angle_weight else 1
    if fu.shape[-2] < need:
        raise ValueError(f"RKD needs at least {need} unlabeled examples, got {fu.shape[-2]}")

    value = np.zeros(fa.shape[:-1])
    g_a = np.zeros_like(fa)
    g_u = np.zeros_like(fu)
    for weight, term in ((rkd.distance_weight, _distance_term), (rkd.angle_weight, _angle_term)):
        if weight:
            v, ga_, gu_ = term(fa, fu, ga, gu, rkd)
            value = value + weight * v
            g_a = g_a + weight * ga_
            g_u = g_u + weight * gu_
    return _out(value), {"anchor": g_a, "unlabeled": g_u}


def loss_darkrank(anchor, unlabeled, cfg, anchor_teacher, unlabeled_teacher):
    """Listwise loss whose target order is the teacher's similarity ranking.

    For each unlabeled ``x`` the candidates are every ``y`` the teacher ranks
    no higher than ``x`` (``x`` included), and the term is
    ``-(s(a,x) - logsumexp_y s(a,y))`` over those candidates, in student space.
    """
    fa = np.asarray(anchor, dtype=np.float64)
    fu = _set(unlabeled, fa)
    if fu.shape[-2] == 0:
        raise ValueError("DarkRank needs a non-empty unlabeled set")
    ga = np.asarray(anchor_teacher, dtype=np.float64)
    teacher_sims, _, _ = cosine_with_grad(ga, _set(unlabeled_teacher, ga))
    s, da, du = cosine_with_grad(fa, fu)
    # member[..., x, y]: y is a candidate for x; always true on the diagonal
    member = teacher_sims[..., None, :] <= teacher_sims[..., :, None]
    masked = np.where(member, s[..., None, :], -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(masked - top).sum(axis=-1))
    value = -np.sum(s - lse, axis=-1)
    probs = np.exp(masked - lse[..., None])
    g_s = probs.sum(axis=-2) - 1.0
    return _out(value), {"anchor": _combine((g_s, da)), "unlabeled": g_s[..., None] * du}


def _pack(mode, value, g_a, **others):
    grads = {"anchor": g_a}
    if mode is SimilarityMode.SYMMETRIC:
        grads.update(others)
    return _out(value), grads


@dataclass
class TupleEmbeddings:
    """Embeddings of one training tuple, resolved to the right model per role.

    ``positives``/``negatives`` come from the student in symmetric mode and
    from the teacher otherwise; ``unlabeled`` is always student-side, with
    ``unlabeled_teacher`` its teacher counterpart.
    """

    anchor: np.ndarray
    anchor_teacher: np.ndarray = None
    positives: np.ndarray = None
    negatives: np.ndarray = None
    unlabeled: np.ndarray = None
    unlabeled_teacher: np.ndarray = None


def tuple_loss(cfg, emb):
    kind = cfg.resolved().kind
    if kind is LossKind.CONTRASTIVE:
        return loss_contrastive(emb.anchor, emb.positives, emb.negatives, cfg, emb.anchor_teacher)
    if kind is LossKind.TRIPLET:
        return loss_triplet(emb.anchor, emb.positives, emb.negatives, cfg)
    if kind is LossKind.MULTI_SIMILARITY:
        return loss_multi_similarity(emb.anchor, emb.positives, emb.negatives, cfg)
    if kind is LossKind.REGRESSION:
        return loss_regression(emb.anchor, emb.anchor_teacher)
    if kind is LossKind.RKD:
        return loss_rkd(emb.anchor, emb.unlabeled, cfg, emb.anchor_teacher, emb.unlabeled_teacher)
    if kind is LossKind.DARKRANK:
        return loss_darkrank(emb.anchor, emb.unlabeled, cfg, emb.anchor_teacher,
                             emb.unlabeled_teacher)
    raise ConfigurationError(f"unsupported loss kind {kind}")


def batch_loss(cfg, tuples):
    """Sum of per-anchor losses, reduced left to right."""
    total = 0.0
    grads = []
    for emb in tuples:
        v, g = tuple_loss(cfg, emb)
        total += v
        grads.append(g)
    return total, grads


# -- finite-difference harness ---------------------------------------------

_ROLES = ("anchor", "positives", "negatives", "unlabeled")


def random_instance(cfg, rng, d=8, n_pos=2, n_neg=5, n_unl=6):
    """Random tuple embeddings for ``cfg``; teacher sides drawn independently."""
    cfg = cfg.resolved()
    emb = TupleEmbeddings(anchor=rng.normal(size=d), anchor_teacher=rng.normal(size=d))
    if cfg.uses_labels:
        emb.positives = rng.normal(size=(n_pos, d))
        emb.negatives = rng.normal(size=(n_neg, d))
    if cfg.uses_unlabeled:
        emb.unlabeled = rng.normal(size=(n_unl, d))
        emb.unlabeled_teacher = rng.normal(size=(n_unl, d))
    return emb


def _near_kink(cfg, emb, tol):
    cfg = cfg.resolved()
    if cfg.kind is LossKind.CONTRASTIVE and emb.negatives is not None and len(emb.negatives):
        s, _, _ = cosine_with_grad(emb.anchor, emb.negatives)
        return bool(np.any(np.abs(s - cfg.margin) < tol))
    if cfg.kind is LossKind.TRIPLET:
        sp, _, _ = cosine_with_grad(emb.anchor, emb.positives)
        sn, _, _ = cosine_with_grad(emb.anchor, emb.negatives)
        return bool(np.any(np.abs(sn[None, :] - sp[:, None] + cfg.margin) < tol))
    if cfg.kind is LossKind.RKD and cfg.rkd.measurement == "distance_angle":
        delta = cfg.rkd.huber_delta
        fa, fu = emb.anchor, emb.unlabeled
        ga, gu = emb.anchor_teacher, emb.unlabeled_teacher
        dist = np.linalg.norm(fa - fu, axis=1)
        tdist = np.linalg.norm(ga - gu, axis=1)
        if cfg.rkd.normalize_distances:
            dist, tdist = dist / dist.mean(), tdist / tdist.mean()
        e, t = normalize_rows(fa - fu), normalize_rows(ga - gu)
        res = np.concatenate([dist - tdist, (e @ e.T - t @ t.T).ravel()])
        return bool(np.any(np.abs(np.abs(res) - delta) < tol))
    return False


def _student_roles(cfg, emb):
    cfg = cfg.resolved()
    roles = ["anchor"]
    if cfg.mode is SimilarityMode.SYMMETRIC and cfg.uses_labels:
        roles += ["positives", "negatives"]
    if cfg.uses_unlabeled:
        roles.append("unlabeled")
    return roles


def numeric_gradients(cfg, emb, h=1e-6):
    """Central finite differences of ``tuple_loss`` w.r.t. student-side roles."""
    out = {}
    for role in _student_roles(cfg, emb):
        base = np.array(getattr(emb, role), dtype=np.float64)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for step in (h, -h):
                moved = base.copy()
                moved[idx] += step
                probe = replace(emb, **{role: moved})
                vals.append(tuple_loss(cfg, probe)[0])
            grad[idx] = (vals[0] - vals[1]) / (2 * h)
        out[role] = grad
    return out


def loss_grad_check(cfg, rng, h=1e-6, d=8, n_pos=2, n_neg=5, n_unl=6, kink_tol=1e-3):
    """Max relative error between analytic and finite-difference gradients.

    Instances that land near a hinge or Huber kink are redrawn.
    """
    for _ in range(1000):
        emb = random_instance(cfg, rng, d, n_pos, n_neg, n_unl)
        if not _near_kink(cfg, emb, kink_tol):
            break
    else:
        raise RuntimeError("could not draw a kink-free instance")
    _, analytic = tuple_loss(cfg, emb)
    numeric = numeric_gradients(cfg, emb, h)
    a = np.concatenate([np.ravel(analytic[r]) for r in numeric])
    n = np.concatenate([np.ravel(numeric[r]) for r in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)

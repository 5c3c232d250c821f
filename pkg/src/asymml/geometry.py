"""Vector-space primitives shared by losses, mining and evaluation.

Everything here works in float64.  Cosine similarity refuses zero vectors
instead of returning NaN or 0.
"""

from enum import Enum

import numpy as np

from asymml.errors import DegenerateInputError

GEM_EPS = 1e-6


class SimilarityMode(str, Enum):
    """Which model embeds the non-anchor side of a pair.

    SYMMETRIC compares student with student, ASYMMETRIC compares the student
    anchor with teacher-embedded examples.
    """

    SYMMETRIC = "sym"
    ASYMMETRIC = "asym"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"sym": cls.SYMMETRIC, "symmetric": cls.SYMMETRIC,
                   "asym": cls.ASYMMETRIC, "asymmetric": cls.ASYMMETRIC}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown similarity mode {value!r}") from None


def _as_vector(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def _norm(v):
    n = float(np.sqrt(np.dot(v, v)))
    if not np.isfinite(n):
        raise DegenerateInputError("embedding contains non-finite values")
    if n == 0.0:
        raise DegenerateInputError("zero-norm embedding")
    return n


def cosine_similarity(u, v):
    """Cosine of the angle between ``u`` and ``v``."""
    u = _as_vector(u)
    v = _as_vector(v)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = _norm(u)
    nv = _norm(v)
    return float(np.dot(u, v) / (nu * nv))


def row_norms(m):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    _check_norms(norms)
    return norms


def normalize_rows(m):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    return m / row_norms(m)[:, None]


def cosine_with_grad(u, others):
    """Cosine of ``u`` against each row of ``others`` plus both Jacobians.

    ``u`` has shape ``(..., d)`` and ``others`` ``(..., k, d)``; leading
    dimensions broadcast.  Returns ``(sims, d_u, d_others)`` with shapes
    ``(..., k)``, ``(..., k, d)``, ``(..., k, d)``: entry ``i`` of ``d_u``
    is the gradient of ``sims[..., i]`` w.r.t. ``u``.
    """
    u = np.asarray(u, dtype=np.float64)
    others = np.asarray(others, dtype=np.float64)
    if others.ndim == u.ndim:
        others = others[..., None, :]
    nu = np.sqrt(np.einsum("...d,...d->...", u, u))
    no = np.sqrt(np.einsum("...kd,...kd->...k", others, others))
    _check_norms(nu)
    _check_norms(no)
    nu = nu[..., None]
    dots = np.einsum("...d,...kd->...k", u, others)
    denom = nu * no
    sims = dots / denom
    d_u = others / denom[..., None] - sims[..., None] * (u / (nu * nu))[..., None, :]
    d_o = u[..., None, :] / denom[..., None] - sims[..., None] * others / (no * no)[..., None]
    return sims, d_u, d_o


def _check_norms(norms):
    if norms.size == 0:
        return
    lo = norms.min()
    if not np.isfinite(norms.max()) or np.isnan(lo):
        raise DegenerateInputError("embedding contains non-finite values")
    if lo == 0.0:
        raise DegenerateInputError("zero-norm embedding")


def pair_similarity(anchor, other, mode, student, teacher, inputs):
    """Similarity of a student-embedded anchor to example ``other``.

    ``anchor`` is the student embedding of the anchor.  ``inputs`` maps
    example ids to raw input vectors; it is only consulted in symmetric
    mode, where ``other`` must be embedded by the student as well.
    """
    mode = SimilarityMode.parse(mode)
    if mode is SimilarityMode.SYMMETRIC:
        target = student.forward(inputs[other])
    else:
        target = teacher.embed(other)
    return cosine_similarity(anchor, target)


def gem_pool(vectors, p):
    """Generalized-mean pooling over a list of vectors.

    Entries are clamped to ``GEM_EPS`` before the power so negative inputs
    stay well defined.  ``p=1`` is the mean; large ``p`` tends to the max.
    """
    if p < 1:
        raise ValueError(f"GeM exponent must be >= 1, got {p}")
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("gem_pool needs a non-empty list of vectors")
    x = np.maximum(x, GEM_EPS)
    if p == 1:
        return x.mean(axis=0)
    # factor out the max so large p does not overflow
    top = x.max(axis=0)
    return top * np.mean((x / top) ** p, axis=0) ** (1.0 / p)

"""Frozen teacher embedding table and a small tanh MLP student."""

from pathlib import Path

import numpy as np

from asymml.errors import DegenerateInputError
from asymml.geometry import cosine_similarity, normalize_rows
from asymml.io import array_hash, read_json, read_matrix, write_json, write_matrix


class TeacherModel:
    """Precomputed, read-only embeddings ``g(x)`` keyed by example id."""

    def __init__(self, ids, embeddings):
        ids = np.asarray(ids, dtype=np.int64)
        table = np.array(embeddings, dtype=np.float64, copy=True)
        if table.ndim != 2 or table.shape[0] != ids.shape[0]:
            raise ValueError("teacher table needs one row per id")
        if not np.all(np.isfinite(table)):
            raise DegenerateInputError("teacher table contains non-finite entries")
        if np.any(np.einsum("ij,ij->i", table, table) == 0.0):
            raise DegenerateInputError("teacher table contains a zero embedding")
        table.setflags(write=False)
        ids.setflags(write=False)
        self._ids = ids
        self._table = table
        self._row = {int(i): r for r, i in enumerate(ids)}

    @property
    def dim(self):
        return self._table.shape[1]

    @property
    def ids(self):
        return self._ids

    @property
    def table(self):
        return self._table

    def __contains__(self, example_id):
        return int(example_id) in self._row

    def _rows(self, example_ids):
        try:
            return [self._row[int(i)] for i in example_ids]
        except KeyError as exc:
            raise KeyError(f"unknown example id {exc.args[0]} in teacher table") from None

    def embed(self, example_id):
        return self._table[self._rows([example_id])[0]]

    def embed_many(self, example_ids):
        return self._table[self._rows(example_ids)]

    def similarity(self, a, x):
        """Teacher-space similarity ``S(a, x)``."""
        return cosine_similarity(self.embed(a), self.embed(x))

    def content_hash(self):
        return array_hash(self._table) + array_hash(self._ids)[:16]

    def save(self, path):
        write_matrix(path, self._table)

    @classmethod
    def load(cls, path, ids=None):
        table = read_matrix(path)
        if ids is None:
            ids = np.arange(table.shape[0])
        return cls(ids, table)


def teacher_embed(teacher, example_id):
    return teacher.embed(example_id)


def teacher_similarity(teacher, a, x):
    return teacher.similarity(a, x)


def build_synthetic_teacher(data, seed=None):
    """Teacher for synthetic data: random linear map of input plus class signal.

    ``g(x) = normalize(A (x + signal * center[class(x)]))``.  The class
    signal plays the role of the label knowledge a stronger network gained in
    its own training; the student only ever sees ``x``.
    """
    cfg = data.config
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 7919])
    a = rng.normal(size=(cfg.d_teacher, cfg.d_in)) / np.sqrt(cfg.d_in)
    labels = np.array([data.class_of[int(i)] for i in data.all_ids])
    raw = (data.inputs + cfg.teacher_signal * data.centers[labels]) @ a.T
    emb = normalize_rows(raw).astype(np.float32).astype(np.float64)
    return TeacherModel(data.all_ids, emb)


def snapshot_teacher(student, ids, inputs):
    """Freeze a student's outputs as a teacher table."""
    return TeacherModel(ids, student.forward(np.asarray(inputs, dtype=np.float64)))


class StudentModel:
    """Student MLP: tanh hidden layers, final affine, no output normalization.

    ``sizes`` is ``[d_in, hidden..., d]``; parameters live in one flat vector
    ``theta`` laid out layer by layer as ``W (out x in)`` then ``b``.
    """

    def __init__(self, sizes, theta=None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) <= 0:
            raise ValueError(f"bad layer sizes {sizes}")
        self.shapes = [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        self.num_params = sum(o * i + o for o, i in self.shapes)
        if theta is None:
            theta = np.zeros(self.num_params)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_params,):
            raise ValueError(f"theta must have {self.num_params} entries, got {theta.shape}")
        self.theta = theta.copy()

    @classmethod
    def init(cls, sizes, seed):
        """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
        model = cls(sizes)
        rng = np.random.default_rng(seed)
        chunks = []
        for out, fan_in in model.shapes:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=out * fan_in))
            chunks.append(rng.uniform(-bound, bound, size=out))
        model.theta = np.concatenate(chunks)
        return model

    @property
    def d_in(self):
        return self.sizes[0]

    @property
    def dim(self):
        return self.sizes[-1]

    def copy(self):
        return StudentModel(self.sizes, self.theta)

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for o, i in self.shapes:
            w = theta[pos:pos + o * i].reshape(o, i)
            pos += o * i
            b = theta[pos:pos + o]
            pos += o
            out.append((w, b))
        return out

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in or x.ndim > 2:
            raise ValueError(f"expected input of length {self.d_in}, got shape {x.shape}")
        return x

    def _forward(self, x, theta):
        acts = [x]
        h = x
        layers = self.layers(theta)
        for k, (w, b) in enumerate(layers):
            z = h @ w.T + b
            h = np.tanh(z) if k < len(layers) - 1 else z
            acts.append(h)
        return acts

    def forward(self, x, theta=None):
        """Embed one input vector or a batch (rows)."""
        x = self._check(x)
        single = x.ndim == 1
        out = self._forward(np.atleast_2d(x), theta)[-1]
        return out[0] if single else out

    def backward(self, x, upstream, theta=None):
        """Gradient w.r.t. ``theta`` of ``sum_i <upstream_i, f(x_i)>``."""
        x = np.atleast_2d(self._check(x))
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if g.shape != (x.shape[0], self.dim):
            raise ValueError(f"upstream gradient shape {g.shape} does not match outputs")
        acts = self._forward(x, theta)
        layers = self.layers(theta)
        grads = []
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            h_in = acts[k]
            grads.append((g.T @ h_in, g.sum(axis=0)))
            if k > 0:
                g = (g @ w) * (1.0 - acts[k] ** 2)
        flat = []
        for gw, gb in reversed(grads):
            flat.append(gw.ravel())
            flat.append(gb)
        return np.concatenate(flat)

    def save(self, directory, seed=None, epoch=None):
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "student.json", {
            "architecture": {"sizes": self.sizes, "hidden_activation": "tanh"},
            "seed": seed,
            "epoch": epoch,
            "num_params": self.num_params,
        })
        write_matrix(out / "theta.f32", self.theta[None, :])

    @classmethod
    def load(cls, directory):
        src = Path(directory)
        meta = read_json(src / "student.json")
        theta = read_matrix(src / "theta.f32").ravel()
        return cls(meta["architecture"]["sizes"], theta), meta


def student_forward(student, x, theta=None):
    return student.forward(x, theta)


def student_backward(student, x, upstream, theta=None):
    return student.backward(x, upstream, theta)

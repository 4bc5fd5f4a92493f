"""Dataset generators, splitting, the time-smoothing operator, and matrix I/O.

Datasets are column-major batches: inputs ``y`` (features x samples) and
targets ``c`` (targets x samples) with a per-column split tag.  All
generators are deterministic under their seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import FileFormatError, InvalidInputError, ShapeError
from .losses import LossKind

MATRIX_MAGIC = b"VPM1"

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Dataset:
    """Column-wise input/target pairs with split tags.

    ``target_kind`` records what the targets are: ``binary`` (one row of
    0/1 labels), ``onehot`` (simplex columns), or ``real``.
    """

    y: np.ndarray
    c: np.ndarray
    split: np.ndarray
    target_kind: str

    @property
    def n(self):
        return self.y.shape[1]

    def columns(self, which):
        """Return the (Y, C) views for one split ('train'/'val'/'test')."""
        code = SPLIT_NAMES.index(which)
        mask = self.split == code
        return self.y[:, mask], self.c[:, mask]

    def count(self, which):
        return int(np.sum(self.split == SPLIT_NAMES.index(which)))

    def targets_for(self, loss_kind):
        """Targets reshaped for the requested loss family.

        Binary labels become one-hot 2-row columns for multinomial and
        least-squares losses; everything else passes through after a
        compatibility check.
        """
        kind = LossKind(loss_kind)
        if self.target_kind == "binary":
            if kind is LossKind.LOGISTIC:
                return self
            onehot = np.zeros((2, self.n))
            labels = self.c[0].astype(int)
            onehot[labels, np.arange(self.n)] = 1.0
            return replace(self, c=onehot, target_kind="onehot")
        if kind is LossKind.LOGISTIC:
            raise InvalidInputError("logistic loss needs binary targets")
        if kind is LossKind.MULTINOMIAL and self.target_kind != "onehot":
            raise InvalidInputError("multinomial loss needs one-hot/simplex targets")
        return self


def gen_ellipse(n, seed=0, center=(0.0, 0.0), semi_axes=(1.0, 0.5), angle=0.0,
                box=2.0):
    """Binary classification points: label 0 inside the ellipse, 1 outside.

    Samples are uniform on the square [-box, box]^2.
    """
    if n < 2:
        raise InvalidInputError("need at least two samples")
    a, b = semi_axes
    if a <= 0.0 or b <= 0.0:
        raise InvalidInputError("ellipse semi-axes must be positive")
    rng = np.random.default_rng(seed)
    y = rng.uniform(-box, box, size=(2, n))
    labels = ellipse_labels(y, center=center, semi_axes=semi_axes, angle=angle)
    return Dataset(y=y, c=labels[None, :].astype(np.float64),
                   split=np.zeros(n, dtype=np.int8), target_kind="binary")


def ellipse_labels(points, center=(0.0, 0.0), semi_axes=(1.0, 0.5), angle=0.0):
    """1 outside the ellipse, 0 inside (boundary counts as inside)."""
    dx = points[0] - center[0]
    dy = points[1] - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    xr = ca * dx + sa * dy
    yr = -sa * dx + ca * dy
    inside = (xr / semi_axes[0]) ** 2 + (yr / semi_axes[1]) ** 2 <= 1.0
    return (~inside).astype(np.float64)


@dataclass(frozen=True)
class TeacherSpec:
    """Frozen two-layer tanh network used as a smooth regression target."""

    hidden: int = 16
    scale: float = 1.0
    seed: int = 0


def gen_synthetic_regression(n, n_in, n_target, teacher=None, seed=0):
    """Noiseless regression data from a frozen random tanh teacher.

    Inputs are uniform on [-1, 1]^n_in; targets are
    ``W2 tanh(W1 y + b1) + b2`` with Gaussian teacher weights drawn from
    the teacher's own seed, so the map is independent of ``n``.
    """
    teacher = teacher or TeacherSpec()
    trng = np.random.default_rng(teacher.seed)
    w1 = trng.normal(0.0, teacher.scale / np.sqrt(n_in), size=(teacher.hidden, n_in))
    b1 = trng.normal(0.0, teacher.scale, size=(teacher.hidden, 1))
    w2 = trng.normal(0.0, teacher.scale / np.sqrt(teacher.hidden),
                     size=(n_target, teacher.hidden))
    b2 = trng.normal(0.0, teacher.scale, size=(n_target, 1))
    rng = np.random.default_rng(seed)
    y = rng.uniform(-1.0, 1.0, size=(n_in, n))
    c = w2 @ np.tanh(w1 @ y + b1) + b2
    return Dataset(y=y, c=c, split=np.zeros(n, dtype=np.int8), target_kind="real")


def split(dataset, fractions, seed=0):
    """Assign train/val/test tags by random permutation then contiguous cut.

    Sizes are floor(fraction * n) with the remainder going to the earliest
    splits; a positive fraction that receives zero columns is an error.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-12 or min(fractions) < 0:
        raise InvalidInputError("fractions must be three nonnegative values summing to 1")
    n = dataset.n
    counts = [int(np.floor(f * n)) for f in fractions]
    # largest-remainder rounding; ties favor earlier splits
    order = sorted(range(3), key=lambda i: fractions[i] * n - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[order[i]] += 1
    for f, cnt, name in zip(fractions, counts, SPLIT_NAMES):
        if f > 0.0 and cnt == 0:
            raise InvalidInputError(f"{name} split would be empty")
    perm = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype=np.int8)
    start = 0
    for code, cnt in enumerate(counts):
        tags[perm[start : start + cnt]] = code
        start += cnt
    return replace(dataset, split=tags)


class IdentityOperator:
    """Trivial smoothing operator: B = I on the whole weight vector."""

    def __init__(self, layout):
        self.out_size = layout.size

    def apply(self, theta):
        return np.asarray(theta, dtype=np.float64).copy()

    def apply_t(self, v):
        return np.asarray(v, dtype=np.float64).copy()


class TimeDiffOperator:
    """Forward differences in time on the K/b node blocks, identity on the
    opening layer; differences are scaled by 1/h with h = T/depth.

    Applied to weights constant in time, the K/b part of the output is
    exactly zero.
    """

    def __init__(self, arch):
        if arch.kind != "neural_ode":
            raise InvalidInputError("time differences require a neural ODE layout")
        self.arch = arch
        self.layout = arch.layout()
        self.depth = arch.depth
        self.h = arch.final_time / arch.depth
        n_out, n_in = arch.n_out, arch.n_in
        self._id_size = n_out * n_in + n_out
        self._block = n_out * n_out + n_out
        self.out_size = self._id_size + self.depth * self._block

    def apply(self, theta):
        theta = self.layout.check(theta)
        lv = self.layout.view
        out = np.empty(self.out_size)
        out[: self._id_size] = np.concatenate(
            [lv(theta, "K_in").ravel(), lv(theta, "b_in").ravel()]
        )
        pos = self._id_size
        for i in range(self.depth):
            dk = (lv(theta, f"K_{i + 1}") - lv(theta, f"K_{i}")).ravel() / self.h
            db = (lv(theta, f"b_{i + 1}") - lv(theta, f"b_{i}")).ravel() / self.h
            out[pos : pos + dk.size] = dk
            pos += dk.size
            out[pos : pos + db.size] = db
            pos += db.size
        return out

    def apply_t(self, v):
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != self.out_size:
            raise ShapeError(f"expected length {self.out_size}, got {v.size}")
        theta = self.layout.zeros()
        lv = self.layout.view
        nk = self.arch.n_out * self.arch.n_in
        lv(theta, "K_in")[...] = v[:nk].reshape(self.arch.n_out, self.arch.n_in)
        lv(theta, "b_in")[...] = v[nk : self._id_size]
        pos = self._id_size
        nkk = self.arch.n_out * self.arch.n_out
        for i in range(self.depth):
            dk = v[pos : pos + nkk].reshape(self.arch.n_out, self.arch.n_out) / self.h
            pos += nkk
            db = v[pos : pos + self.arch.n_out] / self.h
            pos += self.arch.n_out
            lv(theta, f"K_{i + 1}")[...] += dk
            lv(theta, f"K_{i}")[...] -= dk
            lv(theta, f"b_{i + 1}")[...] += db
            lv(theta, f"b_{i}")[...] -= db
        return theta


def apply_B(op, theta):
    """Functional form of the smoothing operator application."""
    return op.apply(theta)


def apply_B_t(op, v):
    """Transpose application of the smoothing operator."""
    return op.apply_t(v)


def write_matrix(path, a):
    """Binary matrix file: magic 'VPM1', u64 rows/cols, row-major f64, all
    little endian."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("write_matrix expects a 2-D array")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(np.asarray(a.shape, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(path):
    """Read a matrix written by :func:`write_matrix`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MATRIX_MAGIC:
        raise FileFormatError(f"{path}: bad magic at byte 0, expected {MATRIX_MAGIC!r}")
    if len(blob) < 20:
        raise FileFormatError(f"{path}: truncated header at byte {len(blob)}")
    rows, cols = np.frombuffer(blob[4:20], dtype="<u8")
    expected = 20 + int(rows) * int(cols) * 8
    if len(blob) < expected:
        raise FileFormatError(
            f"{path}: truncated payload at byte {len(blob)}, expected {expected} bytes"
        )
    flat = np.frombuffer(blob[20:expected], dtype="<f8")
    return flat.reshape(int(rows), int(cols)).astype(np.float64)


def read_csv_matrix(path):
    """Read a numeric CSV into a matrix; the first row may be a header."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, record in enumerate(reader, start=1):
            if not record:
                continue
            try:
                rows.append([float(cell) for cell in record])
            except ValueError as exc:
                if lineno == 1:
                    continue  # header row
                raise FileFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
    if not rows:
        raise FileFormatError(f"{path}: no numeric rows")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise FileFormatError(f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
    return np.asarray(rows, dtype=np.float64)

"""Parameterized feature extractors F(y, theta) and their linearizations.

Two architectures are provided: a tanh multilayer perceptron and a neural
ODE whose vector field is the antisymmetric tanh layer, integrated with
the classical fourth-order Runge-Kutta rule on ``depth`` uniform steps.
Weights live in one flat float64 vector whose named blocks are described
by a :class:`WeightLayout`.

The forward pass returns a :class:`TapeCache` of stage inputs so that
``jvp`` (directional derivative in theta) and ``vjp`` (its exact adjoint)
can run without recomputing the trajectory.  Time-node weights are read at
Runge-Kutta stage times through linear interpolation of the node values,
which keeps jvp/vjp exact adjoints of the discretized forward map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .exceptions import (
    DivergedForwardError,
    FileFormatError,
    InvalidInputError,
    ShapeError,
    StaleTapeError,
    UnsupportedRefinementError,
)

CHECKPOINT_MAGIC = "VPW1"


@dataclass
class PassCounter:
    """Counts forward/backward propagations in per-sample column units.

    One forward (or backward) pass over a batch of ``n`` samples adds
    ``n`` to the matching counter.  Work units divide by the training-set
    size, so a full-batch forward+backward pair costs 2 WU.
    """

    forward_cols: int = 0
    backward_cols: int = 0

    def add_forward(self, ncols):
        self.forward_cols += int(ncols)

    def add_backward(self, ncols):
        self.backward_cols += int(ncols)

    @property
    def total_cols(self):
        return self.forward_cols + self.backward_cols

    def work_units(self, n_train):
        return self.total_cols / n_train


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description; use the :meth:`mlp` / :meth:`neural_ode`
    constructors rather than filling fields by hand."""

    kind: str
    n_in: int
    n_out: int
    depth: int = 0
    final_time: float = 0.0
    gamma: float = 0.0
    hidden: tuple = ()
    activation: str = "tanh"

    @classmethod
    def mlp(cls, n_in, widths, activation="tanh"):
        widths = tuple(int(w) for w in widths)
        if not widths or any(w <= 0 for w in widths) or n_in <= 0:
            raise InvalidInputError("MLP widths and n_in must be positive")
        return cls(kind="mlp", n_in=int(n_in), n_out=widths[-1], hidden=widths,
                   activation=activation)

    @classmethod
    def neural_ode(cls, n_in, n_out, depth, final_time=4.0, gamma=1e-4,
                   activation="tanh"):
        if depth < 1:
            raise InvalidInputError("neural ODE needs at least one time cell")
        if final_time <= 0.0:
            raise InvalidInputError("final_time must be positive")
        if gamma < 0.0:
            raise InvalidInputError("gamma must be nonnegative")
        if n_in <= 0 or n_out <= 0:
            raise InvalidInputError("widths must be positive")
        return cls(kind="neural_ode", n_in=int(n_in), n_out=int(n_out),
                   depth=int(depth), final_time=float(final_time),
                   gamma=float(gamma), activation=activation)

    def with_depth(self, depth):
        if self.kind != "neural_ode":
            raise InvalidInputError("only neural ODE architectures have a depth")
        return replace(self, depth=int(depth))

    def layout(self):
        return WeightLayout.for_arch(self)

    def __post_init__(self):
        if self.activation != "tanh":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")


class WeightLayout:
    """Ordered map from block names to (offset, shape) slices of theta."""

    def __init__(self, blocks):
        self._blocks = []
        self._index = {}
        offset = 0
        for name, shape in blocks:
            size = int(np.prod(shape))
            self._blocks.append((name, offset, tuple(shape)))
            self._index[name] = (offset, tuple(shape))
            offset += size
        self.size = offset

    @classmethod
    def for_arch(cls, arch):
        blocks = []
        if arch.kind == "mlp":
            prev = arch.n_in
            for i, w in enumerate(arch.hidden):
                blocks.append((f"K_{i}", (w, prev)))
                blocks.append((f"b_{i}", (w,)))
                prev = w
        elif arch.kind == "neural_ode":
            blocks.append(("K_in", (arch.n_out, arch.n_in)))
            blocks.append(("b_in", (arch.n_out,)))
            for i in range(arch.depth + 1):
                blocks.append((f"K_{i}", (arch.n_out, arch.n_out)))
                blocks.append((f"b_{i}", (arch.n_out,)))
        else:
            raise InvalidInputError(f"unknown architecture kind {arch.kind!r}")
        return cls(blocks)

    @property
    def blocks(self):
        return list(self._blocks)

    def names(self):
        return [name for name, _, _ in self._blocks]

    def block_slice(self, name):
        offset, shape = self._index[name]
        return slice(offset, offset + int(np.prod(shape)))

    def view(self, theta, name):
        offset, shape = self._index[name]
        size = int(np.prod(shape))
        return theta[offset : offset + size].reshape(shape)

    def zeros(self):
        return np.zeros(self.size)

    def check(self, theta, what="theta"):
        theta = np.asarray(theta, dtype=np.float64).ravel()
        if theta.size != self.size:
            raise ShapeError(f"{what} has length {theta.size}, layout expects {self.size}")
        return theta


def init_weights(arch, seed=0):
    """Uniform weights on [-q, q] per block, q = 1/sqrt(fan-in), seeded.

    Biases share the fan-in of the weight matrix they accompany.
    """
    rng = np.random.default_rng(seed)
    layout = arch.layout()
    theta = layout.zeros()
    fan_in = arch.n_in
    for name, offset, shape in layout.blocks:
        if len(shape) == 2:
            fan_in = shape[1]
        q = 1.0 / np.sqrt(fan_in)
        size = int(np.prod(shape))
        theta[offset : offset + size] = rng.uniform(-q, q, size=size)
    return theta


@dataclass
class TapeCache:
    """Intermediate states of the latest forward pass for jvp/vjp reuse.

    Valid only for the (theta, y) pair it was created with; consumers
    verify freshness and raise :class:`StaleTapeError` otherwise.
    """

    theta: np.ndarray
    y: np.ndarray
    z: np.ndarray
    # MLP: list of (layer_input, layer_output); NeuralODE: opening
    # (y, u0) plus per-step stage records [(stage_input, stage_tanh) x4].
    layers: list = field(default_factory=list)
    opening: Optional[tuple] = None
    steps: list = field(default_factory=list)
    a_nodes: list = field(default_factory=list)

    def check_fresh(self, theta, y):
        if not (np.array_equal(self.theta, np.ravel(theta)) and np.array_equal(self.y, y)):
            raise StaleTapeError("tape does not match the given (theta, Y) pair")


def antisym_layer(u, k, b, gamma):
    """Antisymmetric tanh layer ``tanh((K - K^T - gamma*I) u + b)``."""
    k = np.asarray(k, dtype=np.float64)
    a = k - k.T - gamma * np.eye(k.shape[0])
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        return np.tanh(a @ u + b)
    return np.tanh(a @ u + np.asarray(b)[:, None])


def rk4_step(f, t, u, h):
    """One classical fourth-order Runge-Kutta step for ``u' = f(t, u)``."""
    k1 = f(t, u)
    k2 = f(t + 0.5 * h, u + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, u + 0.5 * h * k2)
    k4 = f(t + h, u + h * k3)
    return u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _node_operators(arch, layout, theta):
    """Materialize A_i = K_i - K_i^T - gamma*I and b_i for every time node."""
    eye = np.eye(arch.n_out)
    ops = []
    for i in range(arch.depth + 1):
        k = layout.view(theta, f"K_{i}")
        ops.append((k - k.T - arch.gamma * eye, layout.view(theta, f"b_{i}")))
    return ops


def forward(arch, theta, y, counter=None):
    """Evaluate features column-wise; returns ``(Z, tape)``.

    Raises :class:`DivergedForwardError` naming the first time step at
    which non-finite activations appear.
    """
    layout = arch.layout()
    theta = layout.check(theta)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != arch.n_in:
        raise ShapeError(f"inputs must be {arch.n_in} x batch, got {y.shape}")
    if counter is not None:
        counter.add_forward(y.shape[1])

    tape = TapeCache(theta=theta.copy(), y=y, z=None)
    if arch.kind == "mlp":
        x = y
        for i in range(len(arch.hidden)):
            a = layout.view(theta, f"K_{i}") @ x + layout.view(theta, f"b_{i}")[:, None]
            out = np.tanh(a)
            tape.layers.append((x, out))
            x = out
        if not np.all(np.isfinite(x)):
            raise DivergedForwardError(step=len(arch.hidden) - 1)
        tape.z = x
        return x, tape

    # neural ODE
    a0 = layout.view(theta, "K_in") @ y + layout.view(theta, "b_in")[:, None]
    u = np.tanh(a0)
    tape.opening = (y, u)
    ops = _node_operators(arch, layout, theta)
    tape.a_nodes = ops
    h = arch.final_time / arch.depth
    for i in range(arch.depth):
        a_lo, b_lo = ops[i]
        a_hi, b_hi = ops[i + 1]
        plan = iter([(a_lo, b_lo), (0.5 * (a_lo + a_hi), 0.5 * (b_lo + b_hi)),
                     (0.5 * (a_lo + a_hi), 0.5 * (b_lo + b_hi)), (a_hi, b_hi)])
        records = []

        def field_fn(t, x, _plan=plan, _records=records):
            a_op, b_vec = next(_plan)
            th = np.tanh(a_op @ x + b_vec[:, None])
            _records.append((x, th))
            return th

        u = rk4_step(field_fn, i * h, u, h)
        if not np.all(np.isfinite(u)):
            raise DivergedForwardError(step=i)
        tape.steps.append(records)
    tape.z = u
    return u, tape


def jvp(arch, theta, tape, dtheta, counter=None):
    """Directional derivative ``J_theta F(Y, theta) @ dtheta``; linear in
    ``dtheta`` and charged as one forward pass."""
    layout = arch.layout()
    theta = layout.check(theta)
    dtheta = layout.check(np.asarray(dtheta, dtype=np.float64), "dtheta")
    tape.check_fresh(theta, tape.y)
    if counter is not None:
        counter.add_forward(tape.y.shape[1])

    if arch.kind == "mlp":
        dx = np.zeros_like(tape.y)
        for i, (x_in, out) in enumerate(tape.layers):
            da = (layout.view(dtheta, f"K_{i}") @ x_in
                  + layout.view(theta, f"K_{i}") @ dx
                  + layout.view(dtheta, f"b_{i}")[:, None])
            dx = (1.0 - out * out) * da
        return dx

    y, u0 = tape.opening
    da0 = layout.view(dtheta, "K_in") @ y + layout.view(dtheta, "b_in")[:, None]
    du = (1.0 - u0 * u0) * da0
    d_ops = []
    for i in range(arch.depth + 1):
        dk = layout.view(dtheta, f"K_{i}")
        d_ops.append((dk - dk.T, layout.view(dtheta, f"b_{i}")))
    h = arch.final_time / arch.depth
    for i in range(arch.depth):
        a_lo, _ = tape.a_nodes[i]
        a_hi, _ = tape.a_nodes[i + 1]
        da_lo, db_lo = d_ops[i]
        da_hi, db_hi = d_ops[i + 1]
        stages = tape.steps[i]
        stage_ops = [(a_lo, da_lo, db_lo),
                     (0.5 * (a_lo + a_hi), 0.5 * (da_lo + da_hi), 0.5 * (db_lo + db_hi)),
                     (0.5 * (a_lo + a_hi), 0.5 * (da_lo + da_hi), 0.5 * (db_lo + db_hi)),
                     (a_hi, da_hi, db_hi)]
        dks = []
        dx = du
        for s, (a_op, da_op, db_vec) in enumerate(stage_ops):
            x_s, th_s = stages[s]
            dk_s = (1.0 - th_s * th_s) * (da_op @ x_s + a_op @ dx + db_vec[:, None])
            dks.append(dk_s)
            if s == 0:
                dx = du + 0.5 * h * dk_s
            elif s == 1:
                dx = du + 0.5 * h * dk_s
            elif s == 2:
                dx = du + h * dk_s
        du = du + (h / 6.0) * (dks[0] + 2.0 * dks[1] + 2.0 * dks[2] + dks[3])
    return du


def vjp(arch, theta, tape, dz, counter=None):
    """Adjoint of :func:`jvp`: accumulates ``J_theta F^T @ dZ`` into a flat
    gradient vector; charged as one backward pass."""
    layout = arch.layout()
    theta = layout.check(theta)
    tape.check_fresh(theta, tape.y)
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != tape.z.shape:
        raise ShapeError(f"adjoint seed shape {dz.shape} != feature shape {tape.z.shape}")
    if counter is not None:
        counter.add_backward(tape.y.shape[1])

    grad = layout.zeros()
    if arch.kind == "mlp":
        xbar = dz
        for i in reversed(range(len(arch.hidden))):
            x_in, out = tape.layers[i]
            w = (1.0 - out * out) * xbar
            layout.view(grad, f"K_{i}")[...] += w @ x_in.T
            layout.view(grad, f"b_{i}")[...] += np.sum(w, axis=1)
            xbar = layout.view(theta, f"K_{i}").T @ w
        return grad

    h = arch.final_time / arch.depth
    ubar = dz.copy()
    k_bars = [layout.view(grad, f"K_{i}") for i in range(arch.depth + 1)]
    b_bars = [layout.view(grad, f"b_{i}") for i in range(arch.depth + 1)]
    for i in reversed(range(arch.depth)):
        a_lo, _ = tape.a_nodes[i]
        a_hi, _ = tape.a_nodes[i + 1]
        a_mid = 0.5 * (a_lo + a_hi)
        stages = tape.steps[i]
        v = ubar
        kb = [h / 6.0 * v, h / 3.0 * v, h / 3.0 * v, h / 6.0 * v]
        un_bar = v.copy()
        # stage weight distribution: (node weights, interpolation shares)
        stage_meta = [(a_lo, ((i, 1.0),)),
                      (a_mid, ((i, 0.5), (i + 1, 0.5))),
                      (a_mid, ((i, 0.5), (i + 1, 0.5))),
                      (a_hi, ((i + 1, 1.0),))]
        for s in (3, 2, 1, 0):
            x_s, th_s = stages[s]
            a_op, shares = stage_meta[s]
            w = (1.0 - th_s * th_s) * kb[s]
            abar = w @ x_s.T
            kw = abar - abar.T
            bw = np.sum(w, axis=1)
            for node, share in shares:
                k_bars[node] += share * kw
                b_bars[node] += share * bw
            xb = a_op.T @ w
            un_bar += xb
            if s == 3:
                kb[2] = kb[2] + h * xb
            elif s == 2:
                kb[1] = kb[1] + 0.5 * h * xb
            elif s == 1:
                kb[0] = kb[0] + 0.5 * h * xb
        ubar = un_bar
    y, u0 = tape.opening
    w0 = (1.0 - u0 * u0) * ubar
    layout.view(grad, "K_in")[...] += w0 @ y.T
    layout.view(grad, "b_in")[...] += np.sum(w0, axis=1)
    return grad


def prolongate(arch, theta, to_d):
    """Refine neural ODE weights in time to twice as many cells.

    Node values of K and b are linearly interpolated onto the fine grid
    (fine nodes at old nodes and old-cell midpoints); the opening layer is
    copied unchanged.  Returns the fine theta; pair it with
    ``arch.with_depth(to_d)``.
    """
    if arch.kind != "neural_ode":
        raise InvalidInputError("prolongation applies to neural ODE weights only")
    if to_d != 2 * arch.depth:
        raise UnsupportedRefinementError(
            f"can only double the depth: from {arch.depth} to {2 * arch.depth}, got {to_d}"
        )
    layout = arch.layout()
    theta = layout.check(theta)
    fine_arch = arch.with_depth(to_d)
    fine_layout = fine_arch.layout()
    fine = fine_layout.zeros()
    fine_layout.view(fine, "K_in")[...] = layout.view(theta, "K_in")
    fine_layout.view(fine, "b_in")[...] = layout.view(theta, "b_in")
    for name in ("K", "b"):
        coarse_nodes = [layout.view(theta, f"{name}_{i}") for i in range(arch.depth + 1)]
        for j in range(to_d + 1):
            target = fine_layout.view(fine, f"{name}_{j}")
            if j % 2 == 0:
                target[...] = coarse_nodes[j // 2]
            else:
                target[...] = 0.5 * (coarse_nodes[j // 2] + coarse_nodes[j // 2 + 1])
    return fine


def save_checkpoint(path, arch, theta):
    """Write a weight checkpoint: text header, then raw little-endian
    float64 values in layout order."""
    layout = arch.layout()
    theta = layout.check(theta)
    lines = [CHECKPOINT_MAGIC, f"kind {arch.kind}", f"n_in {arch.n_in}",
             f"n_out {arch.n_out}", f"activation {arch.activation}"]
    if arch.kind == "neural_ode":
        lines += [f"depth {arch.depth}", f"final_time {arch.final_time!r}",
                  f"gamma {arch.gamma!r}"]
    else:
        lines.append("hidden " + ",".join(str(w) for w in arch.hidden))
    lines += [f"theta_len {theta.size}", "end"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(theta.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, _ = blob.partition(b"end\n")
    if not sep:
        raise FileFormatError(f"{path}: missing header terminator")
    lines = head.decode("ascii", errors="replace").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic, expected {CHECKPOINT_MAGIC}")
    fields = {}
    for ln in lines[1:]:
        key, _, value = ln.partition(" ")
        fields[key] = value
    try:
        kind = fields["kind"]
        if kind == "neural_ode":
            arch = ArchSpec.neural_ode(
                n_in=int(fields["n_in"]), n_out=int(fields["n_out"]),
                depth=int(fields["depth"]), final_time=float(fields["final_time"]),
                gamma=float(fields["gamma"]), activation=fields["activation"])
        elif kind == "mlp":
            widths = tuple(int(w) for w in fields["hidden"].split(","))
            arch = ArchSpec.mlp(n_in=int(fields["n_in"]), widths=widths,
                                activation=fields["activation"])
        else:
            raise FileFormatError(f"{path}: unknown architecture kind {kind!r}")
        theta_len = int(fields["theta_len"])
    except (KeyError, ValueError) as exc:
        raise FileFormatError(f"{path}: malformed header ({exc})") from exc
    payload = blob[len(head) + len(b"end\n"):]
    expected = theta_len * 8
    if len(payload) < expected:
        raise FileFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    theta = np.frombuffer(payload[:expected], dtype="<f8").astype(np.float64)
    if theta.size != arch.layout().size:
        raise FileFormatError(f"{path}: theta length {theta.size} does not match header")
    return arch, theta

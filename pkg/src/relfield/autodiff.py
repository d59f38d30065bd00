"""Minimal reverse-mode autodiff on float64 numpy arrays.

Just enough machinery for the two MLPs, the cosine NLL loss, and the
axis-angle rotation: every op works on arrays whose LAST axis is the
feature axis, so the same primitives serve single vectors and batches.
Gradients are recorded on an explicit tape and replayed strictly in
reverse order of recording. Pass tape=None for inference-only forward
passes (nothing is recorded).
"""

from __future__ import annotations

import numpy as np

EPS_NORM = 1e-12          # floor for normalization denominators
RODRIGUES_SMALL = 1e-6    # below this angle use the series branch


class ContractViolation(ValueError):
    """Operation called with inputs outside its contract."""


class DegenerateVectorError(ContractViolation):
    """Vector with norm at or below the EPS_NORM floor."""


class TrainingDivergence(RuntimeError):
    """Non-finite gradients or loss during optimization."""


class Tensor:
    """Array value participating in the computation graph."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered op record; backward visits each op once, newest first."""

    def __init__(self):
        self._ops = []

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor):
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


def _maybe(tape, out, fn):
    if tape is not None:
        def run():
            if out.grad is not None:
                fn(out.grad)
        tape.record(run)
    return out


# ---------------------------------------------------------------------------
# elementwise / arithmetic

def add(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _maybe(tape, out, lambda g: (a.accumulate(g), b.accumulate(g)))


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"mul shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return _maybe(tape, out, lambda g: (a.accumulate(g * b.data),
                                        b.accumulate(g * a.data)))


def div(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"div shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data / b.data)
    return _maybe(tape, out, lambda g: (
        a.accumulate(g / b.data),
        b.accumulate(-g * a.data / (b.data * b.data))))


def scale(tape, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return _maybe(tape, out, lambda g: x.accumulate(g * c))


def add_const(tape, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + c)
    return _maybe(tape, out, lambda g: x.accumulate(g))


def rsub_const(tape, x: Tensor, c: float) -> Tensor:
    """c - x."""
    out = Tensor(c - x.data)
    return _maybe(tape, out, lambda g: x.accumulate(-g))


def exp(tape, x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return _maybe(tape, out, lambda g: x.accumulate(g * out.data))


def log(tape, x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractViolation("log of non-positive value")
    out = Tensor(np.log(x.data))
    return _maybe(tape, out, lambda g: x.accumulate(g / x.data))


def clamp(tape, x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data > lo) & (x.data < hi)
    return _maybe(tape, out, lambda g: x.accumulate(g * inside))


def relu(tape, x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _maybe(tape, out, lambda g: x.accumulate(g * mask))


def mean_all(tape, x: Tensor) -> Tensor:
    out = Tensor(np.mean(x.data))
    n = x.data.size
    return _maybe(tape, out, lambda g: x.accumulate(np.full_like(x.data, g / n)))


# ---------------------------------------------------------------------------
# structural

def concat(tape, a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    na = a.data.shape[-1]

    def back(g):
        a.accumulate(g[..., :na])
        b.accumulate(g[..., na:])
    return _maybe(tape, out, back)


def slice_last(tape, x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop]."""
    out = Tensor(x.data[..., start:stop])

    def back(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x.accumulate(full)
    return _maybe(tape, out, back)


def reshape(tape, x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _maybe(tape, out, lambda g: x.accumulate(g.reshape(x.data.shape)))


# ---------------------------------------------------------------------------
# linear layer

def dense(tape, x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the last axis: x @ W.T + b, W is (n_out, n_in)."""
    if x.data.ndim not in (1, 2):
        raise ContractViolation("dense input must be 1-D or 2-D")
    n_out, n_in = weights.data.shape
    if x.data.shape[-1] != n_in or bias.data.shape != (n_out,):
        raise ContractViolation(
            f"dense shapes do not conform: x {x.shape}, W {weights.shape}, "
            f"b {bias.shape}")
    out = Tensor(x.data @ weights.data.T + bias.data)

    def back(g):
        x.accumulate(g @ weights.data)
        if x.data.ndim == 1:
            weights.accumulate(np.outer(g, x.data))
            bias.accumulate(g)
        else:
            weights.accumulate(g.T @ x.data)
            bias.accumulate(g.sum(axis=0))
    return _maybe(tape, out, back)


# ---------------------------------------------------------------------------
# sphere geometry

def _last_norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


def l2_normalize(tape, x: Tensor) -> Tensor:
    """Unit-normalize along the last axis; gradient stays in the tangent space."""
    norm = _last_norm(x.data)
    if np.any(norm <= EPS_NORM):
        raise DegenerateVectorError("cannot normalize near-zero vector")
    y = x.data / norm[..., None]
    out = Tensor(y)

    def back(g):
        proj = np.sum(g * y, axis=-1, keepdims=True)
        x.accumulate((g - proj * y) / norm[..., None])
    return _maybe(tape, out, back)


def cosine(tape, a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; output drops that axis."""
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"cosine shape mismatch {a.shape} vs {b.shape}")
    na = _last_norm(a.data)
    nb = _last_norm(b.data)
    if np.any(na <= EPS_NORM) or np.any(nb <= EPS_NORM):
        raise DegenerateVectorError("cosine of near-zero vector")
    dot = np.sum(a.data * b.data, axis=-1)
    c = dot / (na * nb)
    out = Tensor(c)

    def back(g):
        ge = g[..., None]
        a.accumulate(ge * (b.data / (na * nb)[..., None]
                           - (c / (na * na))[..., None] * a.data))
        b.accumulate(ge * (a.data / (na * nb)[..., None]
                           - (c / (nb * nb))[..., None] * b.data))
    return _maybe(tape, out, back)


def _rodrigues_coeffs(theta):
    """cos, sinc, and versine/theta^2 with series branches near zero."""
    t2 = theta * theta
    small = theta < RODRIGUES_SMALL
    with np.errstate(invalid="ignore", divide="ignore"):
        b = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / theta)
        c = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / t2)
    a = np.cos(theta)
    return a, b, c


def rodrigues(tape, r: Tensor, v: Tensor) -> Tensor:
    """Rotate v by the axis-angle vector r (last axis of both is 3).

    Uses the singularity-free form a*v + b*(r x v) + c*r*(r.v) with
    a=cos|r|, b=sin|r|/|r|, c=(1-cos|r|)/|r|^2; the small-angle branch
    replaces b and c by their series so r=0 is exact.
    """
    if r.data.shape[-1] != 3 or v.data.shape[-1] != 3:
        raise ContractViolation("rodrigues expects 3-vectors on the last axis")
    if r.data.shape != v.data.shape:
        raise ContractViolation(f"rodrigues shape mismatch {r.shape} vs {v.shape}")
    rd, vd = r.data, v.data
    theta = _last_norm(rd)
    a, b, c = _rodrigues_coeffs(theta)
    rxv = np.cross(rd, vd)
    rdotv = np.sum(rd * vd, axis=-1)
    out = Tensor(a[..., None] * vd + b[..., None] * rxv
                 + (c * rdotv)[..., None] * rd)

    def back(u):
        # d out / dv contracted with upstream u
        udotr = np.sum(u * rd, axis=-1)
        v.accumulate(a[..., None] * u + b[..., None] * np.cross(u, rd)
                     + (c * udotr)[..., None] * rd)
        # theta-derivative coefficients divided by theta (all smooth in theta^2)
        t2 = theta * theta
        small = theta < RODRIGUES_SMALL
        with np.errstate(invalid="ignore", divide="ignore"):
            B = np.where(small, -1.0 / 3.0 + t2 / 30.0,
                         (theta * np.cos(theta) - np.sin(theta)) / (t2 * theta))
            C = np.where(small, -1.0 / 12.0 + t2 / 180.0,
                         (theta * np.sin(theta) - 2.0 * (1.0 - np.cos(theta)))
                         / (t2 * t2))
        A = -b
        udotv = np.sum(u * vd, axis=-1)
        udotrxv = np.sum(u * rxv, axis=-1)
        radial = A * udotv + B * udotrxv + C * udotr * rdotv
        r.accumulate(radial[..., None] * rd + b[..., None] * np.cross(vd, u)
                     + c[..., None] * (rdotv[..., None] * u
                                       + udotr[..., None] * vd))
    return _maybe(tape, out, back)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; deterministic given parameter order."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence("non-finite gradient in Adam step")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

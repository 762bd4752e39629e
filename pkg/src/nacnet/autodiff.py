"""Minimal reverse-mode autodiff over dense real arrays.

A Tape records one node per forward op; backward() walks the recording in
reverse exactly once and accumulates vector-Jacobian products.  The op
catalog is intentionally small: matrix multiply, elementwise add/sub/mul,
row-broadcast add, mean over the set dimension, SoftPlus (linear branch
above 20), LeakyReLU (slope 0.01), sigmoid, layer normalization (eps 1e-5),
log, exp, square, clamp, sum, scalar scale, the confidence normalization,
and custom nodes wrapping the weighted DLT / line-fit heads.

Shapes are strict: no broadcasting beyond the explicit row-broadcast op.
Cross-row reductions (mean_rows, sum, confidence) accumulate in float64 and
cast back, so per-point outputs stay bitwise stable under row permutations
in float32 mode.  Every forward op checks its output for NaN/Inf via a sum
reduction (a NaN or Inf anywhere poisons the sum).
"""

from __future__ import annotations

import numpy as np

from . import dlt as _dlt
from .errors import DoubleBackward, NonFiniteValue, NotScalar, ShapeMismatch

DEFAULT_DTYPE = np.float32

_SOFTPLUS_LINEAR_ABOVE = 20.0
_LEAKY_SLOPE = 0.01
_LAYER_NORM_EPS = 1e-5
_CONFIDENCE_FLOOR = 1e-12


class Tensor:
    """A dense real array plus a gradient-participation flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    np.negative(x, out=out)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)          # exp(-x), safe for x >= 0
        out[pos] = 1.0 / (1.0 + out[pos])
        neg = ~pos
        ex = np.exp(x[neg])           # safe for x < 0
    out[neg] = ex / (1.0 + ex)
    return out


class Tape:
    """Single-owner recording of forward ops; one backward pass per tape."""

    def __init__(self, check_finite: bool = True):
        self._nodes = []
        self._consumed = False
        self._check_finite = check_finite
        self.notes: list[str] = []

    # -- plumbing ------------------------------------------------------------

    def _finish(self, op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
        if self._check_finite and not np.isfinite(data.sum()):
            raise NonFiniteValue(f"{op} produced NaN or Inf")
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        if out.requires_grad:
            self._nodes.append((out, inputs, backward))
        return out

    @staticmethod
    def _same_shape(op: str, a: Tensor, b: Tensor):
        if a.data.shape != b.data.shape or a.data.dtype != b.data.dtype:
            raise ShapeMismatch(
                f"{op}: {a.data.shape}/{a.data.dtype} vs {b.data.shape}/{b.data.dtype}"
            )

    # -- op catalog ------------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
        if a.dtype != b.dtype:
            raise ShapeMismatch(f"matmul dtype: {a.dtype} vs {b.dtype}")

        def backward(g, a=a, b=b):
            return (
                g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None,
            )

        return self._finish("matmul", a.data @ b.data, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape("add", a, b)
        return self._finish("add", a.data + b.data, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape("sub", a, b)
        return self._finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._same_shape("mul", a, b)

        def backward(g, a=a, b=b):
            return (g * b.data, g * a.data)

        return self._finish("mul", a.data * b.data, (a, b), backward)

    def add_row(self, m: Tensor, v: Tensor) -> Tensor:
        """Broadcast-add a (1, d) row vector over the set rows of m (n, d)."""
        if m.ndim != 2 or v.shape != (1, m.shape[1]) or m.dtype != v.dtype:
            raise ShapeMismatch(f"add_row: {m.shape} + {v.shape}")

        def backward(g):
            return (g, g.sum(axis=0, keepdims=True))

        return self._finish("add_row", m.data + v.data, (m, v), backward)

    def mean_rows(self, m: Tensor) -> Tensor:
        """Mean over the set dimension: (n, d) -> (1, d), accumulated in float64."""
        if m.ndim != 2:
            raise ShapeMismatch(f"mean_rows: {m.shape}")
        n = m.shape[0]
        out = m.data.mean(axis=0, keepdims=True, dtype=np.float64).astype(m.dtype)

        def backward(g, n=n, shape=m.shape):
            return (np.broadcast_to(g / n, shape),)

        return self._finish("mean_rows", out, (m,), backward)

    def sum(self, x: Tensor) -> Tensor:
        out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

        def backward(g, shape=x.shape):
            return (np.broadcast_to(g, shape),)

        return self._finish("sum", out, (x,), backward)

    def scale(self, x: Tensor, s: float) -> Tensor:
        s = float(s)
        return self._finish("scale", x.data * np.asarray(s, dtype=x.dtype), (x,),
                            lambda g: (g * np.asarray(s, dtype=g.dtype),))

    def softplus(self, x: Tensor) -> Tensor:
        d = x.data
        linear = d > _SOFTPLUS_LINEAR_ABOVE
        out = np.where(linear, d, np.log1p(np.exp(np.minimum(d, _SOFTPLUS_LINEAR_ABOVE))))

        def backward(g, d=d, linear=linear):
            return (g * np.where(linear, np.asarray(1.0, dtype=d.dtype), _sigmoid(d)),)

        return self._finish("softplus", out, (x,), backward)

    def leaky_relu(self, x: Tensor) -> Tensor:
        d = x.data
        slope = np.asarray(_LEAKY_SLOPE, dtype=d.dtype)
        out = np.where(d >= 0, d, d * slope)

        def backward(g, d=d, slope=slope):
            return (g * np.where(d >= 0, np.asarray(1.0, dtype=d.dtype), slope),)

        return self._finish("leaky_relu", out, (x,), backward)

    def sigmoid(self, x: Tensor) -> Tensor:
        s = _sigmoid(x.data)

        def backward(g, s=s):
            return (g * s * (1.0 - s),)

        return self._finish("sigmoid", s, (x,), backward)

    def log(self, x: Tensor) -> Tensor:
        def backward(g, d=x.data):
            return (g / d,)

        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x.data)
        return self._finish("log", out, (x,), backward)

    def exp(self, x: Tensor) -> Tensor:
        with np.errstate(over="ignore"):
            out = np.exp(x.data)

        def backward(g, out=out):
            return (g * out,)

        return self._finish("exp", out, (x,), backward)

    def square(self, x: Tensor) -> Tensor:
        def backward(g, d=x.data):
            return (g * (2.0 * d),)

        return self._finish("square", x.data * x.data, (x,), backward)

    def clamp(self, x: Tensor, lo: float, hi: float) -> Tensor:
        d = x.data
        out = np.clip(d, lo, hi)

        def backward(g, d=d, lo=lo, hi=hi):
            return (g * ((d >= lo) & (d <= hi)),)

        return self._finish("clamp", out, (x,), backward)

    def layer_norm(self, x: Tensor, gain: Tensor, offset: Tensor) -> Tensor:
        """Normalize each row over the feature dimension, then gain and offset."""
        if x.ndim != 2 or gain.shape != (1, x.shape[1]) or offset.shape != gain.shape:
            raise ShapeMismatch(f"layer_norm: {x.shape}, {gain.shape}, {offset.shape}")
        d = x.data
        mu = d.mean(axis=1, keepdims=True)
        xc = d - mu
        var = np.square(xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(_LAYER_NORM_EPS, dtype=d.dtype))
        xhat = xc * inv
        out = xhat * gain.data + offset.data

        def backward(g, xhat=xhat, inv=inv, gain=gain):
            dxhat = g * gain.data
            dgain = (g * xhat).sum(axis=0, keepdims=True) if gain.requires_grad else None
            doffset = g.sum(axis=0, keepdims=True)
            dx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            return (dx, dgain, doffset)

        return self._finish("layer_norm", out, (x, gain, offset), backward)

    def confidence(self, y: Tensor, w: Tensor) -> Tensor:
        """Per-point confidences y_i exp(w_i) / sum_j y_j exp(w_j), shape (n, 1).

        exp is max-shifted over w for stability; if the shifted denominator
        falls below 1e-12 the result is uniform 1/n with zero gradient and a
        tape note.
        """
        if y.shape != w.shape or y.ndim != 2 or y.shape[1] != 1:
            raise ShapeMismatch(f"confidence: {y.shape}, {w.shape}")
        n = y.shape[0]
        yf = y.data.astype(np.float64).ravel()
        wf = w.data.astype(np.float64).ravel()
        u = np.exp(wf - wf.max())
        s = yf * u
        total = s.sum()
        if total < _CONFIDENCE_FLOOR:
            self.notes.append("confidence_fallback_uniform")
            out = np.full((n, 1), 1.0 / n, dtype=y.dtype)

            def backward(g, n=n, dtype=y.dtype):
                z = np.zeros((n, 1), dtype=dtype)
                return (z, z.copy())

            return self._finish("confidence", out, (y, w), backward)
        c = s / total

        def backward(g, u=u, c=c, total=total, dtype=y.dtype):
            gf = g.astype(np.float64).ravel()
            inner = float(gf @ c)
            gy = u * (gf - inner) / total
            gw = c * (gf - inner)
            return (
                gy.reshape(-1, 1).astype(dtype),
                gw.reshape(-1, 1).astype(dtype),
            )

        return self._finish("confidence", c.reshape(n, 1).astype(y.dtype), (y, w), backward)

    def essential_dlt(self, pairs: Tensor, weights: Tensor):
        """Weighted eight-point node: (n, 4) pairs + (n, 1) weights -> (9, 1) unit vector.

        Returns (tensor, DltSolution); the solution carries the spectrum data
        callers use to skip degenerate samples before backward.
        """
        if pairs.ndim != 2 or pairs.shape[1] != 4 or weights.shape != (pairs.shape[0], 1):
            raise ShapeMismatch(f"essential_dlt: {pairs.shape}, {weights.shape}")
        p64 = pairs.data.astype(np.float64)
        w64 = weights.data.astype(np.float64).ravel()
        sol = _dlt.weighted_dlt(p64, w64)

        def backward(g, p64=p64, w64=w64, sol=sol, dtype=pairs.dtype):
            gp, gw = _dlt.weighted_dlt_vjp(p64, w64, sol, g.astype(np.float64).ravel())
            return (gp.astype(dtype), gw.reshape(-1, 1).astype(dtype))

        out = self._finish(
            "essential_dlt", sol.e_vec.reshape(9, 1).astype(pairs.dtype),
            (pairs, weights), backward,
        )
        return out, sol

    def line_fit(self, points: Tensor, weights: Tensor):
        """Weighted line-fit node: (n, 2) points + (n, 1) weights -> (3, 1) unit vector."""
        if points.ndim != 2 or points.shape[1] != 2 or weights.shape != (points.shape[0], 1):
            raise ShapeMismatch(f"line_fit: {points.shape}, {weights.shape}")
        p64 = points.data.astype(np.float64)
        w64 = weights.data.astype(np.float64).ravel()
        sol = _dlt.line_fit_solution(p64, w64)

        def backward(g, p64=p64, w64=w64, sol=sol, dtype=points.dtype):
            gp, gw = _dlt.line_fit_vjp(p64, w64, sol, g.astype(np.float64).ravel())
            return (gp.astype(dtype), gw.reshape(-1, 1).astype(dtype))

        out = self._finish(
            "line_fit", sol.e_vec.reshape(3, 1).astype(points.dtype),
            (points, weights), backward,
        )
        return out, sol

    # -- reverse pass ----------------------------------------------------------

    def backward(self, loss: Tensor, params=None) -> dict:
        """Gradients of a scalar loss; the tape is consumed.

        Returns {tensor: gradient} for the given params (zeros when unused) or,
        when params is None, for every requires_grad leaf the recording touched.
        """
        if self._consumed:
            raise DoubleBackward("tape already consumed by a previous backward()")
        self._consumed = True
        if loss.shape != ():
            raise NotScalar(f"loss must be a scalar, got shape {loss.shape}")

        grads = {id(loss): np.ones((), dtype=loss.dtype)}
        produced = set()
        for out, _, _ in self._nodes:
            produced.add(id(out))
        leaves = {}
        for out, inputs, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, ig in zip(inputs, fn(g)):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = t
        self._nodes.clear()

        if params is None:
            return {t: np.asarray(grads[key]) for key, t in leaves.items()}
        result = {}
        for t in params:
            g = grads.get(id(t))
            result[t] = np.asarray(g) if g is not None else np.zeros_like(t.data)
        return result


def grad_check(f, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f maps (tape, Tensor) to a scalar Tensor and must be deterministic; the
    check runs in float64.  Relative error uses max(|analytic|, |numeric|,
    1e-8) as the denominator.
    """
    x = np.array(x, dtype=np.float64)  # private copy; perturbed in place below
    tape = Tape()
    leaf = Tensor(x.copy(), requires_grad=True)
    analytic = tape.backward(f(tape, leaf), params=[leaf])[leaf]

    def value(arr):
        return float(f(Tape(), Tensor(arr)).data)

    numeric = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_n = numeric.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        hi = value(x)
        flat_x[i] = orig - h
        lo = value(x)
        flat_x[i] = orig
        flat_n[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())

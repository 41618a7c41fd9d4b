"""Dense f32/f64 tensors with reverse-mode autodiff on top of numpy.

Every differentiable operation the rest of the package uses lives here, so
the gradient contract can be certified in one place: analytic gradients from
the tape must agree with `finite_difference_grad` (central differences) on
any loss built from these ops. All ops are deterministic and side-effect
free; parallel callers are safe as long as they do not share Tensor objects.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

SUPPORTED_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Shape or axis mismatch, naming the offending axis where possible."""


class DtypeMismatchError(TypeError):
    """Operands carry different float dtypes (no silent promotion)."""


class UnsupportedOpError(TypeError):
    """A gradient was requested through something the tape cannot handle."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared where the caller required finite values."""


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that disables tape construction (evaluation only)."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in SUPPORTED_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array plus an optional backward edge into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


# ----------------------------------------------------------------------
# op plumbing


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise DtypeMismatchError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(out, (a,), backward)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _node(out, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out)

    return _node(out, (a,), backward)


def tabs(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    # d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
    inv_sqrt2 = np.asarray(0.7071067811865476, dtype=x.dtype)
    inv_sqrt2pi = np.asarray(0.3989422804014327, dtype=x.dtype)
    phi = np.exp(-0.5 * x * x) * inv_sqrt2pi
    return 0.5 * (1.0 + _erf(x * inv_sqrt2)) + x * phi


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    inv_sqrt2 = np.asarray(0.7071067811865476, dtype=a.dtype)
    out = 0.5 * a.data * (1.0 + _erf(a.data * inv_sqrt2))

    def backward(g):
        _accum(a, g * _gelu_grad(a.data))

    return _node(out.astype(a.dtype, copy=False), (a,), backward)


# ----------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _node(np.asarray(out, dtype=a.dtype), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    dt = parts[0].dtype
    for p in parts[1:]:
        if p.dtype != dt:
            raise DtypeMismatchError("concat dtype mismatch")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def take(a: Tensor, idx) -> Tensor:
    """Index along the first axis with an int, slice, or integer array."""
    if isinstance(idx, (list, np.ndarray)):
        idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        if isinstance(idx, np.ndarray):
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _accum(a, full)

    return _node(out, (a,), backward)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner axes disagree: {a.shape} vs {b.shape} (axis {a.ndim - 1} vs {b.ndim - 2})"
        )
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * out)

    return _node(out, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + m, axis=axis)
    soft = e / s

    def backward(g):
        _accum(a, np.expand_dims(g, axis) * soft)

    return _node(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({d},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        _accum(beta, _unbroadcast(g, beta.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        gx = g * gamma.data
        gsum = gx.sum(axis=-1, keepdims=True)
        gdot = (gx * xhat).sum(axis=-1, keepdims=True)
        _accum(x, inv / d * (d * gx - gsum - xhat * gdot))

    return _node(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[C_in,H,W] with w[C_out,C_in,kh,kw] plus bias.

    Output spatial dims follow floor((dim + 2*padding - k) / stride) + 1.
    No kernel flip (deep-learning convention).
    """
    if x.ndim != 3:
        raise DimensionError(f"conv2d input must be [C,H,W], got {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d kernel must be [C_out,C_in,kh,kw], got {w.shape}")
    cin, h, wd = x.shape
    cout, kc, kh, kw = w.shape
    if kc != cin:
        raise DimensionError(f"conv2d channel axis mismatch: input C={cin}, kernel C_in={kc}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({cout},)")
    if w.dtype != x.dtype or (b is not None and b.dtype != x.dtype):
        raise DtypeMismatchError("conv2d operand dtypes differ")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise DimensionError(
            f"conv2d window {kh}x{kw} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    wmat = w.data.reshape(cout, cin * kh * kw)
    cmat = cols.reshape(cin * kh * kw, ho * wo)
    out = (wmat @ cmat).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        gmat = g.reshape(cout, ho * wo)
        _accum(w, (gmat @ cmat.T).reshape(w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(1, 2)))
        gcols = (wmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[:, i, j]
        _accum(x, gxp[:, p : p + h, p : p + wd] if p else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward)


# ----------------------------------------------------------------------
# parameter collections and the gradient contract


class ParamSet:
    """Ordered map from unique names to Tensors (lexicographic iteration)."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        if tensors:
            for name in sorted(tensors):
                self.add(name, tensors[name])

    def add(self, name: str, tensor: Tensor):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        for name in self.names():
            yield name, self._tensors[name]

    def tensors(self):
        for name in self.names():
            yield self._tensors[name]

    def total_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self, requires_grad: bool | None = None, dtype=None) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.add(name, Tensor(t.data.copy(), requires_grad=rg, dtype=dtype))
        return out

    def subset(self, prefix: str) -> "ParamSet":
        """Same Tensor objects, names with `prefix` stripped."""
        out = ParamSet()
        for name, t in self.items():
            if name.startswith(prefix):
                out.add(name[len(prefix) :], t)
        return out

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None


def grad(loss_fn, params: ParamSet) -> ParamSet:
    """Gradients of a scalar loss with respect to every tensor in `params`."""
    params.zero_grads()
    for t in params.tensors():
        t.requires_grad = True
    loss = loss_fn(params)
    if not isinstance(loss, Tensor):
        raise UnsupportedOpError("loss_fn must return a Tensor built from melboot.tensor ops")
    if loss.size != 1:
        raise UnsupportedOpError("loss_fn must return a scalar")
    loss.backward()
    out = ParamSet()
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        out.add(name, Tensor(g.copy()))
    return out


def finite_difference_grad(loss_fn, params: ParamSet, epsilon: float = 1e-5) -> ParamSet:
    """Central-difference gradient oracle: (f(x+eps) - f(x-eps)) / (2 eps).

    Costs two loss evaluations per scalar parameter; requires f64 parameters
    so the difference quotient stays above rounding noise.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for name, t in params.items():
        if t.dtype != np.float64:
            raise DtypeMismatchError(f"finite differences need f64 params, {name} is {t.dtype}")
        if not t.data.flags["C_CONTIGUOUS"]:
            t.data = np.ascontiguousarray(t.data)

    def evaluate() -> float:
        with no_grad():
            loss = loss_fn(params)
        return loss.item() if isinstance(loss, Tensor) else float(loss)

    out = ParamSet()
    for name, t in params.items():
        flat = t.data.reshape(-1)
        gflat = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * epsilon)
        out.add(name, Tensor(gflat.reshape(t.shape)))
    return out


def relative_gradient_error(analytic: ParamSet, reference: ParamSet) -> dict[str, float]:
    """Per-tensor max of |g - ref| / (|ref| + 1e-8)."""
    errs = {}
    for name, ref in reference.items():
        g = analytic[name]
        denom = np.abs(ref.data) + 1e-8
        errs[name] = float(np.max(np.abs(g.data - ref.data) / denom)) if ref.size else 0.0
    return errs

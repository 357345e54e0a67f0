"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine provides exactly the operations the sequence model needs:
affine maps, width-2 dilated causal convolution, a small family of
pointwise functions, diagonal-Gaussian log densities and KL divergences,
and a linear tape that replays adjoints in reverse execution order.
Array storage and elementwise math are numpy; the differentiation logic
is local to this module.

Every operation validates shapes up front and checks its outputs for
NaN/Inf: overflow raises ``NumericsError`` instead of propagating.
"""

import math

import numpy as np

from .errors import NumericsError, ShapeError, ConfigError

LOG_TWO_PI = math.log(2.0 * math.pi)

_TAPE_STACK = []


def _ensure_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``grad`` is allocated (zeros) exactly when ``requires_grad`` is set,
    and accumulates the sum of adjoints over all uses during a backward
    sweep. Values are treated as immutable once written by an op.
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        _ensure_finite(self.values, "tensor creation")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; everything routes through the recorded ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def constant(values):
    return Tensor(values, requires_grad=False)


def parameter(values):
    return Tensor(values, requires_grad=True)


def zero_grads(params):
    """Reset the gradient buffers of a parameter dict (or iterable)."""
    tensors = params.values() if isinstance(params, dict) else params
    for p in tensors:
        p.zero_grad()


class Tape:
    """Execution-ordered record of ops for one forward/backward cycle.

    Ops append in the order they run, which is a topological order by
    construction; one backward sweep walks the record exactly once in
    reverse. A tape belongs to a single training step and must not be
    shared across concurrent steps.
    """

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _current_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _apply(op_name, out_values, parents, backward_fn):
    """Wrap an op result, recording it when taping and grads are needed."""
    _ensure_finite(out_values, op_name)
    tape = _current_tape()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.requires_grad = needs_grad
    out.grad = np.zeros_like(out_values) if needs_grad else None
    if needs_grad:
        tape._records.append((op_name, out, backward_fn))
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reaching ``loss``.

    Accumulation is summation in deterministic reverse tape order.
    """
    if not isinstance(loss, Tensor) or loss.values.shape != ():
        raise ShapeError("backward expects a scalar tensor")
    tape = _current_tape()
    if tape is None or not tape._records:
        raise ConfigError("backward called with no recorded tape")
    if not loss.requires_grad:
        raise ConfigError("loss does not depend on any tracked tensor")
    loss.grad[...] = 1.0
    for op_name, out, backward_fn in reversed(tape._records):
        g = out.grad
        _ensure_finite(g, f"{op_name} adjoint")
        backward_fn(g)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def _accum(t, delta):
    if t.requires_grad:
        t.grad += delta


# ---------------------------------------------------------------------------
# linear maps


def affine(x, weight, bias):
    """x[..., C_in] @ weight[C_in, C_out] + bias[C_out]."""
    if weight.values.ndim != 2:
        raise ShapeError(f"affine weight must be rank 2, got {weight.shape}")
    c_in, c_out = weight.shape
    if x.values.ndim < 1 or x.shape[-1] != c_in:
        raise ShapeError(f"affine input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"affine bias {bias.shape} incompatible with weight {weight.shape}")
    xv = x.values
    out = xv @ weight.values + bias.values

    def bwd(g):
        x2 = xv.reshape(-1, c_in)
        g2 = g.reshape(-1, c_out)
        _accum(x, (g @ weight.values.T).reshape(xv.shape))
        _accum(weight, x2.T @ g2)
        _accum(bias, g2.sum(axis=0))

    return _apply("affine", out, (x, weight, bias), bwd)


def conv1d_causal(x, kernel, dilation):
    """Width-2 causal convolution over [B, T, C_in].

    ``kernel[0]`` weighs the tap at t - dilation, ``kernel[1]`` the tap
    at t; positions before the sequence start read a zero frame.
    """
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ConfigError(f"dilation must be a positive int, got {dilation!r}")
    if x.values.ndim != 3:
        raise ShapeError(f"conv input must be [B,T,C], got {x.shape}")
    if kernel.values.ndim != 3 or kernel.shape[0] != 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv kernel {kernel.shape} incompatible with input {x.shape}")
    dilation = int(dilation)
    xv = x.values
    k0 = kernel.values[0]
    k1 = kernel.values[1]
    t_len = xv.shape[1]
    out = xv @ k1
    if dilation < t_len:
        out[:, dilation:] += xv[:, :-dilation] @ k0

    def bwd(g):
        if x.requires_grad:
            gx = g @ k1.T
            if dilation < t_len:
                gx[:, :-dilation] += g[:, dilation:] @ k0.T
            x.grad += gx
        if kernel.requires_grad:
            c_in = xv.shape[-1]
            c_out = g.shape[-1]
            gk1 = xv.reshape(-1, c_in).T @ g.reshape(-1, c_out)
            if dilation < t_len:
                gk0 = (xv[:, :-dilation].reshape(-1, c_in).T
                       @ g[:, dilation:].reshape(-1, c_out))
            else:
                gk0 = np.zeros_like(k0)
            kernel.grad[0] += gk0
            kernel.grad[1] += gk1

    return _apply("conv1d_causal", out, (x, kernel), bwd)


# ---------------------------------------------------------------------------
# pointwise ops (scalar<->tensor broadcast only)


def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return
    if a.values.ndim == 0 or b.values.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not scalar-broadcastable")


def _accum_binary(t, g):
    # Reduce the adjoint back to a scalar when the operand was broadcast.
    if t.requires_grad:
        t.grad += g.sum() if t.values.ndim == 0 and g.ndim > 0 else g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.values + b.values

    def bwd(g):
        _accum_binary(a, g)
        _accum_binary(b, g)

    return _apply("add", out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.values, b.values
    out = av * bv

    def bwd(g):
        _accum_binary(a, g * bv)
        _accum_binary(b, g * av)

    return _apply("mul", out, (a, b), bwd)


def scale(x, c):
    c = float(c)
    out = x.values * c

    def bwd(g):
        _accum(x, g * c)

    return _apply("scale", out, (x,), bwd)


def tanh(x):
    out = np.tanh(x.values)

    def bwd(g):
        _accum(x, g * (1.0 - out * out))

    return _apply("tanh", out, (x,), bwd)


def sigmoid(x):
    # Expressed through tanh for stability at large |x|.
    out = 0.5 * (1.0 + np.tanh(0.5 * x.values))

    def bwd(g):
        _accum(x, g * out * (1.0 - out))

    return _apply("sigmoid", out, (x,), bwd)


def exp(x):
    # Overflow is reported as NumericsError by the finite check, not a warning.
    with np.errstate(over="ignore"):
        out = np.exp(x.values)

    def bwd(g):
        _accum(x, g * out)

    return _apply("exp", out, (x,), bwd)


def softplus(x):
    out = np.logaddexp(0.0, x.values)

    def bwd(g):
        _accum(x, g * 0.5 * (1.0 + np.tanh(0.5 * x.values)))

    return _apply("softplus", out, (x,), bwd)


def clamp_min(x, floor):
    floor = float(floor)
    out = np.maximum(x.values, floor)
    passed = x.values > floor

    def bwd(g):
        _accum(x, g * passed)

    return _apply("clamp_min", out, (x,), bwd)


POINTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "softplus": softplus,
    "scale": scale,
}


def pointwise(op_kind, *args):
    """Dispatch a pointwise op by name; kinds are the keys of POINTWISE."""
    try:
        fn = POINTWISE[op_kind]
    except KeyError:
        raise ConfigError(f"unknown pointwise op {op_kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# structural ops


def concat_last(tensors):
    """Concatenate along the trailing axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_last needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.values.ndim == 0 or t.shape[:-1] != lead:
            raise ShapeError(f"concat_last: mismatched leading dims {[t.shape for t in tensors]}")
    out = np.concatenate([t.values for t in tensors], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=-1)):
            _accum(t, piece)

    return _apply("concat_last", out, tuple(tensors), bwd)


def flip_time(x):
    """Reverse the time axis of a [B, T, C] tensor."""
    if x.values.ndim != 3:
        raise ShapeError(f"flip_time expects [B,T,C], got {x.shape}")
    out = x.values[:, ::-1].copy()

    def bwd(g):
        _accum(x, g[:, ::-1])

    return _apply("flip_time", out, (x,), bwd)


def sum_last(x):
    """Sum over the trailing axis (rank drops by one)."""
    if x.values.ndim == 0:
        raise ShapeError("sum_last on a scalar")
    out = x.values.sum(axis=-1)

    def bwd(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, -1), x.shape))

    return _apply("sum_last", out, (x,), bwd)


# ---------------------------------------------------------------------------
# densities


def gaussian_logpdf(x, mean, log_var):
    """Diagonal-Gaussian log density, summed over the trailing axis."""
    if x.shape != mean.shape or x.shape != log_var.shape:
        raise ShapeError(f"gaussian_logpdf shapes differ: {x.shape}, {mean.shape}, {log_var.shape}")
    if x.values.ndim == 0:
        raise ShapeError("gaussian_logpdf needs a trailing component axis")
    diff = x.values - mean.values
    inv_var = np.exp(-log_var.values)
    out = (-0.5 * (LOG_TWO_PI + log_var.values + diff * diff * inv_var)).sum(axis=-1)

    def bwd(g):
        ge = np.expand_dims(g, -1)
        if x.requires_grad:
            x.grad += ge * (-diff * inv_var)
        if mean.requires_grad:
            mean.grad += ge * (diff * inv_var)
        if log_var.requires_grad:
            log_var.grad += ge * 0.5 * (diff * diff * inv_var - 1.0)

    return _apply("gaussian_logpdf", out, (x, mean, log_var), bwd)


def kl_diag_gaussian(mean_q, log_var_q, mean_p, log_var_p):
    """KL(q || p) between diagonal Gaussians, summed over the trailing axis."""
    shapes = {mean_q.shape, log_var_q.shape, mean_p.shape, log_var_p.shape}
    if len(shapes) != 1:
        raise ShapeError(f"kl_diag_gaussian shapes differ: {sorted(shapes)}")
    if mean_q.values.ndim == 0:
        raise ShapeError("kl_diag_gaussian needs a trailing component axis")
    diff = mean_q.values - mean_p.values
    var_ratio = np.exp(log_var_q.values - log_var_p.values)
    sq_term = diff * diff * np.exp(-log_var_p.values)
    out = (0.5 * (log_var_p.values - log_var_q.values + var_ratio + sq_term - 1.0)).sum(axis=-1)

    def bwd(g):
        ge = np.expand_dims(g, -1)
        inv_vp = np.exp(-log_var_p.values)
        if mean_q.requires_grad:
            mean_q.grad += ge * (diff * inv_vp)
        if mean_p.requires_grad:
            mean_p.grad += ge * (-diff * inv_vp)
        if log_var_q.requires_grad:
            log_var_q.grad += ge * 0.5 * (var_ratio - 1.0)
        if log_var_p.requires_grad:
            log_var_p.grad += ge * 0.5 * (1.0 - var_ratio - sq_term)

    return _apply("kl_diag_gaussian", out, (mean_q, log_var_q, mean_p, log_var_p), bwd)


# ---------------------------------------------------------------------------
# verification


def finite_diff_report(f, params, epsilon=1e-5):
    """Per-parameter max relative error between analytic and central
    finite-difference gradients of a scalar function.

    ``f`` must be a zero-argument callable returning a scalar Tensor and
    deterministic across calls (fix all noise seeds). ``params`` maps
    names to Tensors; every element of every tensor is perturbed.
    """
    items = list(params.items()) if isinstance(params, dict) else list(enumerate(params))
    zero_grads([t for _, t in items])
    with Tape():
        loss = f()
        backward(loss)
    report = {}
    for name, t in items:
        analytic = t.grad.reshape(-1).copy()
        flat = t.values.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = f().item()
            flat[i] = orig - epsilon
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            rel = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
        report[name] = worst
    return report


def finite_diff_check(f, params, epsilon=1e-5):
    """Max over all parameters of the finite_diff_report errors."""
    return max(finite_diff_report(f, params, epsilon).values())

"""Dense numeric core: a minimal reverse-mode gradient tape over numpy arrays.

Values are plain numpy arrays wrapped in :class:`Variable`. Every primitive
takes the tape as its first argument; passing ``tape=None`` runs the forward
computation only (no gradient bookkeeping), which is what evaluation uses.
All arrays of one computation share a dtype: float64 for verification,
float32 for faster training.
"""

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

INIT_SCALE = 0.08  # uniform init range for all trainable parameters


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")


class Variable:
    """A numpy array plus a lazily allocated gradient buffer of the same shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def grad_buffer(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable({self.value.shape}{label})"


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Each recorded entry is a closure that propagates the output gradient to
    the inputs. ``backward`` replays the closures in exact reverse order of
    the forward pass.
    """

    def __init__(self):
        self._backprops = []

    def record(self, fn) -> None:
        self._backprops.append(fn)

    def __len__(self):
        return len(self._backprops)

    def backward(self, loss: Variable) -> None:
        if loss.value.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        loss.grad_buffer()[...] = 1.0
        for fn in reversed(self._backprops):
            fn()


# ---------------------------------------------------------------------------
# plain math (no tape)
# ---------------------------------------------------------------------------


def sigmoid(x):
    """Logistic function, stable for large |x|; works on scalars and arrays."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.shape else out[()]


def softmax_row(v: np.ndarray) -> np.ndarray:
    """Probabilities from a single row of scores, computed with max-subtraction."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"softmax_row needs a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax_row: non-finite input")
    e = np.exp(v - v.max())
    return e / e.sum()


def relative_error(a, b) -> np.ndarray:
    """|a-b| / max(1e-8, |a|+|b|), elementwise; stable near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def finite_difference_gradient(f, theta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter array."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    work = theta.copy()
    for i in range(theta.size):
        work[i] = theta[i] + eps
        up = f(work)
        work[i] = theta[i] - eps
        down = f(work)
        work[i] = theta[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"finite_difference_gradient: f non-finite at coordinate {i}")
        grad[i] = (up - down) / (2.0 * eps)
    return grad


def uniform_init(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# tape primitives
# ---------------------------------------------------------------------------


def matmul(tape: Tape | None, a: Variable, b: Variable) -> Variable:
    """a (m,k) @ b (k,n) -> (m,n)."""
    out = Variable(a.value @ b.value)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            a.grad_buffer()[...] += g @ b.value.T
            b.grad_buffer()[...] += a.value.T @ g
        tape.record(backprop)
    return out


def add(tape: Tape | None, a: Variable, b: Variable) -> Variable:
    out = Variable(a.value + b.value)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            a.grad_buffer()[...] += g
            b.grad_buffer()[...] += g
        tape.record(backprop)
    return out


def mul(tape: Tape | None, a: Variable, b: Variable) -> Variable:
    """Elementwise product of same-shape arrays."""
    out = Variable(a.value * b.value)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            a.grad_buffer()[...] += g * b.value
            b.grad_buffer()[...] += g * a.value
        tape.record(backprop)
    return out


def add_bias(tape: Tape | None, x: Variable, b: Variable) -> Variable:
    """x (B,d) + b (d,), broadcast over rows."""
    out = Variable(x.value + b.value)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            x.grad_buffer()[...] += g
            b.grad_buffer()[...] += g.sum(axis=0)
        tape.record(backprop)
    return out


def sigmoid_v(tape: Tape | None, x: Variable) -> Variable:
    out = Variable(sigmoid(x.value))
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            x.grad_buffer()[...] += g * out.value * (1.0 - out.value)
        tape.record(backprop)
    return out


def tanh_v(tape: Tape | None, x: Variable) -> Variable:
    out = Variable(np.tanh(x.value))
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            x.grad_buffer()[...] += g * (1.0 - out.value * out.value)
        tape.record(backprop)
    return out


def embed_rows(tape: Tape | None, table: Variable, ids: np.ndarray) -> Variable:
    """Gather rows of table (V,d) at integer ids (B,) -> (B,d)."""
    out = Variable(table.value[ids])
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            np.add.at(table.grad_buffer(), ids, g)
        tape.record(backprop)
    return out


def nll_rows(tape: Tape | None, logits: Variable, targets: np.ndarray,
             mask: np.ndarray | None = None) -> Variable:
    """Per-row negative log-likelihood of targets under row softmax -> (B,).

    Fused log-softmax + NLL with max-subtraction. Rows where mask is 0
    contribute exactly 0 to the value and to all gradients.
    """
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    nll = lse - shifted[rows, targets]
    if mask is not None:
        nll = nll * mask
    out = Variable(nll)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            soft = np.exp(shifted)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[rows, targets] -= 1.0
            gr = g if mask is None else g * mask
            logits.grad_buffer()[...] += soft * gr[:, None]
        tape.record(backprop)
    return out


def masked_softmax(tape: Tape | None, scores: Variable, mask: np.ndarray) -> Variable:
    """Row softmax over scores (B,K) restricted to positions where mask is 1.

    Fully-masked rows yield all-zero probability rows (callers treat those
    windows as having no context).
    """
    z = np.where(mask > 0, scores.value, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    live = np.isfinite(zmax[:, 0])
    e = np.zeros_like(scores.value)
    if live.any():
        e[live] = np.exp(z[live] - zmax[live])
    denom = e.sum(axis=1, keepdims=True)
    denom[denom == 0.0] = 1.0
    out = Variable(e / denom)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            p = out.value
            inner = (g * p).sum(axis=1, keepdims=True)
            scores.grad_buffer()[...] += p * (g - inner)
        tape.record(backprop)
    return out


def attention_mix(tape: Tape | None, alphas: Variable, annotations: Variable) -> Variable:
    """Weighted sum of annotation vectors: alphas (B,K), annotations (K,B,D) -> (B,D)."""
    out = Variable(np.einsum("bk,kbd->bd", alphas.value, annotations.value))
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            alphas.grad_buffer()[...] += np.einsum("bd,kbd->bk", g, annotations.value)
            annotations.grad_buffer()[...] += np.einsum("bk,bd->kbd", alphas.value, g)
        tape.record(backprop)
    return out


def stack_first(tape: Tape | None, parts: list[Variable]) -> Variable:
    """Stack (B,D) parts into (K,B,D)."""
    out = Variable(np.stack([p.value for p in parts]))
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            for k, p in enumerate(parts):
                p.grad_buffer()[...] += g[k]
        tape.record(backprop)
    return out


def concat_cols(tape: Tape | None, parts: list[Variable]) -> Variable:
    """Concatenate (B,d_i) parts along columns -> (B, sum d_i)."""
    out = Variable(np.concatenate([p.value for p in parts], axis=1))
    if tape is not None:
        widths = [p.value.shape[1] for p in parts]
        def backprop():
            g = out.grad
            if g is None:
                return
            off = 0
            for p, w in zip(parts, widths):
                p.grad_buffer()[...] += g[:, off:off + w]
                off += w
        tape.record(backprop)
    return out


def blend(tape: Tape | None, gate: np.ndarray, new: Variable, old: Variable) -> Variable:
    """gate*new + (1-gate)*old with a constant 0/1 gate column (B,1)."""
    out = Variable(gate * new.value + (1.0 - gate) * old.value)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            new.grad_buffer()[...] += g * gate
            old.grad_buffer()[...] += g * (1.0 - gate)
        tape.record(backprop)
    return out


def reshape(tape: Tape | None, x: Variable, shape) -> Variable:
    out = Variable(x.value.reshape(shape))
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            x.grad_buffer()[...] += g.reshape(x.value.shape)
        tape.record(backprop)
    return out


def sum_all(tape: Tape | None, x: Variable) -> Variable:
    out = Variable(np.asarray(x.value.sum()))
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            x.grad_buffer()[...] += g
        tape.record(backprop)
    return out


def scale(tape: Tape | None, x: Variable, s: float) -> Variable:
    out = Variable(x.value * s)
    if tape is not None:
        def backprop():
            g = out.grad
            if g is None:
                return
            x.grad_buffer()[...] += g * s
        tape.record(backprop)
    return out


def zeros(shape, dtype) -> Variable:
    return Variable(np.zeros(shape, dtype=dtype))

"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The engine is deliberately small: enough ops to train MLPs and CNNs whose
layers quantize weights and activations. Everything runs in 64-bit floats
and single-threaded graph construction, so identical seeds give bitwise
identical forwards and gradients.

Recording model: while a Tape is active (``with tape:``), every op whose
inputs require gradients appends one node. Nodes are appended in execution
order, which is already a topological order, so ``backward`` is a single
reverse sweep. Backward rules receive the upstream gradient and return one
array (or None) per input; the engine owns accumulation.
"""

from __future__ import annotations

import numpy as np

from . import numerics


class GraphError(RuntimeError):
    """Structural problem in the recorded graph."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant copy of this value; gradients stop here."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Python scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of differentiable ops (execution order == topo order)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        if popped is not self:
            raise GraphError("tape stack corrupted")
        return False

    def __len__(self):
        return len(self.nodes)

    def validate(self) -> None:
        """Check the topological invariant: inputs precede their consumers."""
        produced: set[int] = set()
        produced_anywhere = {id(n.output) for n in self.nodes}
        for i, node in enumerate(self.nodes):
            if id(node.output) in produced:
                raise GraphError(f"node {i} ({node.name}) rewrites an existing output")
            for inp in node.inputs:
                if id(inp) in produced_anywhere and id(inp) not in produced:
                    raise GraphError(
                        f"node {i} ({node.name}) consumes a value produced later: cycle"
                    )
            produced.add(id(node.output))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class no_grad:
    """Context manager that suppresses recording entirely."""

    def __enter__(self):
        _tape_stack.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


def record(out_data: np.ndarray, inputs: tuple, backward_fn, name: str) -> Tensor:
    """Create the output tensor of an op, check it, and record the node.

    ``backward_fn(grad)`` must return one gradient array (or None) per input.
    Returned arrays may alias anything; the engine copies on first
    accumulation.
    """
    numerics.check_finite(out_data, name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(inputs, out, backward_fn, name))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any requires_grad tensor")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(g)  # own the buffer; g may alias out_grad
            else:
                inp.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return record(out, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), bwd, "matmul")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return record(out, (a,), bwd, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return record(out, (a,), bwd, "tanh")


def log(a: Tensor) -> Tensor:
    """Natural log with the library-wide EPS clamp; clamped entries get zero grad."""
    out = numerics.clamped_log(a.data)

    def bwd(g):
        inside = a.data >= numerics.EPS
        return (np.where(inside, g / np.maximum(a.data, numerics.EPS), 0.0),)

    return record(out, (a,), bwd, "log")


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data))

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape),)

    return record(out, (a,), bwd, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(np.sum(a.data) / n)

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape),)

    return record(out, (a,), bwd, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return record(out, (a,), bwd, "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(a, (a.data.shape[0], -1))


# ---------------------------------------------------------------------------
# softmax / losses
# ---------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Row softmax (last axis), shifted by the row max for stability."""
    z = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return record(p, (a,), bwd, "softmax")


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log p[label]; probs are row distributions."""
    p = probs.data
    if p.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2-D probabilities, got {p.shape}")
    labels = np.asarray(labels)
    if labels.shape != (p.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} != ({p.shape[0]},)")
    n = p.shape[0]
    picked = p[np.arange(n), labels]
    out = np.asarray(-np.sum(numerics.clamped_log(picked, "ce_clamp")) / n)

    def bwd(g):
        dp = np.zeros_like(p)
        inside = picked >= numerics.EPS
        dp[np.arange(n), labels] = np.where(
            inside, -float(g) / (n * np.maximum(picked, numerics.EPS)), 0.0
        )
        return (dp,)

    return record(out, (probs,), bwd, "cross_entropy")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Mean over the batch of sum_i p_i * log(p_i / q_i); rows are distributions.

    Zero entries of p contribute nothing (0 * log 0 := 0); zero entries of q
    under positive p are clamped to EPS and counted.
    """
    pd, qd = p.data, q.data
    if pd.shape != qd.shape or pd.ndim != 2:
        raise DimensionError(f"kl_div expects matching 2-D inputs, got {pd.shape} vs {qd.shape}")
    n = pd.shape[0]
    pos = pd > 0.0
    log_ratio = numerics.clamped_log(pd, "kl_clamp") - numerics.clamped_log(qd, "kl_clamp")
    out = np.asarray(np.sum(np.where(pos, pd * log_ratio, 0.0)) / n)

    def bwd(g):
        gq = np.where(pos & (qd >= numerics.EPS),
                      -float(g) * pd / (n * np.maximum(qd, numerics.EPS)), 0.0)
        gp = np.where(pos, float(g) * (log_ratio + 1.0) / n, 0.0)
        return gp, gq

    return record(out, (p, q), bwd, "kl_div")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _bn_axes(x: np.ndarray):
    if x.ndim == 2:
        return (0,), (1, x.shape[1])
    if x.ndim == 4:
        return (0, 2, 3), (1, x.shape[1], 1, 1)
    raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    mode: str,
    update_running: bool = True,
) -> Tensor:
    """Normalize per feature/channel. Train mode uses batch statistics and,
    unless told otherwise, folds them into the running estimates; eval mode
    uses the running estimates. Variances are biased (ddof=0) throughout.
    """
    xd = x.data
    axes, pshape = _bn_axes(xd)
    if gamma.data.shape[0] != pshape[1]:
        raise DimensionError(
            f"batchnorm: {gamma.data.shape[0]} params vs {pshape[1]} channels"
        )
    gam = gamma.data.reshape(pshape)
    bet = beta.data.reshape(pshape)
    if mode == "train":
        mu = np.mean(xd, axis=axes)
        var = np.var(xd, axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
        s = np.sqrt(var.reshape(pshape) + numerics.EPS)
        x_hat = (xd - mu.reshape(pshape)) / s
        out = gam * x_hat + bet
        m = xd.size // pshape[1]

        def bwd(g):
            dgamma = np.sum(g * x_hat, axis=axes)
            dbeta = np.sum(g, axis=axes)
            g_mean = np.mean(g, axis=axes).reshape(pshape)
            gx_mean = np.mean(g * x_hat, axis=axes).reshape(pshape)
            dx = (gam / s) * (g - g_mean - x_hat * gx_mean)
            return dx, dgamma, dbeta

        return record(out, (x, gamma, beta), bwd, "batchnorm_train")

    if mode == "eval":
        s = np.sqrt(running_var.reshape(pshape) + numerics.EPS)
        x_hat = (xd - running_mean.reshape(pshape)) / s
        out = gam * x_hat + bet

        def bwd(g):
            dgamma = np.sum(g * x_hat, axis=axes)
            dbeta = np.sum(g, axis=axes)
            dx = g * (gam / s)
            return dx, dgamma, dbeta

        return record(out, (x, gamma, beta), bwd, "batchnorm_eval")

    raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def _conv_out_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    # (N, Ho, Wo, C, kh, kw) -> rows of receptive fields
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCKK kernels."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {xd.shape}, {wd.shape}")
    n, c, h, wid = xd.shape
    f, cw, kh, kw = wd.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wid + 2 * padding}"
        )
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wid, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wd.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        dw = (g2.T @ cols).reshape(f, c, kh, kw)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if padding:
            return dxp[:, :, padding:-padding, padding:-padding], dw
        return dxp, dw

    return record(np.ascontiguousarray(out), (x, w), bwd, "conv2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == window); trailing rows/cols drop."""
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {xd.shape}")
    n, c, h, w = xd.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise DimensionError(f"pool window {k} larger than input {h}x{w}")
    trimmed = xd[:, :, : ho * k, : wo * k]
    blocks = trimmed.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, k * k
    )
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dblocks = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        dx = np.zeros_like(xd)
        dx[:, :, : ho * k, : wo * k] = (
            dblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
                n, c, ho * k, wo * k
            )
        )
        return (dx,)

    return record(np.ascontiguousarray(out), (x,), bwd, "maxpool2d")

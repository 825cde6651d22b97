"""Reverse-mode differentiation over a closed set of array primitives.

Every primitive is a pair ``(forward, vjp)``.  ``Tape`` records applications
and back-propagates; ``Eval`` runs the identical forward functions with no
recording, so taped and untaped results agree bit for bit.

Positional arguments of a primitive are differentiable inputs (nodes, arrays
or floats); keyword arguments are static.
"""

from __future__ import annotations

import numpy as np

EPS_POW = 1e-3


class Param:
    """A named learnable array with an accumulated gradient."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _shape(x) -> tuple:
    return np.shape(x)


# ---------------------------------------------------------------------------
# Forward functions and their vector-Jacobian products


def _check_kernel(k: np.ndarray) -> None:
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd sides, got shape {k.shape}")


def _pad_edge(x: np.ndarray, ry: int, rx: int) -> np.ndarray:
    return np.pad(x, ((ry, ry), (rx, rx), (0, 0)), mode="edge")


def _unpad_edge_adjoint(gp: np.ndarray, ry: int, rx: int) -> np.ndarray:
    """Adjoint of edge-replication padding: fold the border back onto the edges."""
    gp = gp.copy()
    if ry:
        gp[ry] += gp[:ry].sum(axis=0)
        gp[-ry - 1] += gp[-ry:].sum(axis=0)
        gp = gp[ry:-ry]
    if rx:
        gp[:, rx] += gp[:, :rx].sum(axis=1)
        gp[:, -rx - 1] += gp[:, -rx:].sum(axis=1)
        gp = gp[:, rx:-rx]
    return gp


def conv2d_same(x, k):
    """Per-channel correlation with an odd kernel and edge-replicated borders."""
    k = np.asarray(k)
    _check_kernel(k)
    if x.ndim != 3:
        raise ValueError(f"conv2d_same expects (H, W, C), got shape {x.shape}")
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    p = _pad_edge(x, ry, rx)
    h, w = x.shape[:2]
    out = np.zeros_like(x)
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            if k[i, j] != 0.0:
                out += k[i, j] * p[i : i + h, j : j + w]
    return out


def _conv2d_same_vjp(g, out, x, k):
    k = np.asarray(k)
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    p = _pad_edge(x, ry, rx)
    h, w = x.shape[:2]
    gp = np.zeros_like(p)
    gk = np.empty_like(k)
    for i in range(k.shape[0]):
        for j in range(k.shape[1]):
            gp[i : i + h, j : j + w] += k[i, j] * g
            gk[i, j] = np.sum(g * p[i : i + h, j : j + w])
    return _unpad_edge_adjoint(gp, ry, rx), gk


def affine(x, a, b):
    return a * x + b


def _affine_vjp(g, out, x, a, b):
    return (_unbroadcast(g * a, _shape(x)), _unbroadcast(g * x, _shape(a)), _unbroadcast(g, _shape(b)))


def power_eps(x, gamma):
    return (x + EPS_POW) ** gamma


def _power_eps_vjp(g, out, x, gamma):
    base = x + EPS_POW
    gx = g * gamma * base ** (gamma - 1.0)
    ggamma = g * out * np.log(base)
    return _unbroadcast(gx, _shape(x)), _unbroadcast(ggamma, _shape(gamma))


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def blend(x, y, alpha):
    s = _sigmoid(alpha)
    return s * y + (1.0 - s) * x


def _blend_vjp(g, out, x, y, alpha):
    s = _sigmoid(alpha)
    return (
        _unbroadcast(g * (1.0 - s), _shape(x)),
        _unbroadcast(g * s, _shape(y)),
        _unbroadcast(g * (y - x) * s * (1.0 - s), _shape(alpha)),
    )


def clamp01(x):
    return np.clip(x, 0.0, 1.0)


def _clamp01_vjp(g, out, x):
    return (g * ((x > 0.0) & (x < 1.0)),)


def add(x, y):
    return x + y


def _add_vjp(g, out, x, y):
    return _unbroadcast(g, _shape(x)), _unbroadcast(g, _shape(y))


def sub(x, y):
    return x - y


def _sub_vjp(g, out, x, y):
    return _unbroadcast(g, _shape(x)), _unbroadcast(-g, _shape(y))


def mul(x, y):
    return x * y


def _mul_vjp(g, out, x, y):
    return _unbroadcast(g * y, _shape(x)), _unbroadcast(g * x, _shape(y))


def div(x, y):
    return x / y


def _div_vjp(g, out, x, y):
    return _unbroadcast(g / y, _shape(x)), _unbroadcast(-g * out / y, _shape(y))


def scale(x, *, c):
    return c * x


def _scale_vjp(g, out, x, *, c):
    return (c * g,)


def abs_mean(x):
    return np.mean(np.abs(x))


def _abs_mean_vjp(g, out, x):
    return (g * np.sign(x) / np.size(x),)


def square_mean(x):
    return np.mean(np.square(x))


def _square_mean_vjp(g, out, x):
    return (g * 2.0 * np.asarray(x) / np.size(x),)


def mean(x):
    return np.mean(x)


def _mean_vjp(g, out, x):
    return (np.full(_shape(x), g / np.size(x)),)


def total(x, *, axis=None):
    return np.sum(x, axis=axis)


def _total_vjp(g, out, x, *, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, _shape(x)).copy(),)


def sqrt(x):
    return np.sqrt(x)


def _sqrt_vjp(g, out, x):
    # zero subgradient at the origin
    safe = np.where(out > 0.0, out, 1.0)
    return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)


def exp(x):
    return np.exp(x)


def _exp_vjp(g, out, x):
    return (g * out,)


def log(x):
    return np.log(x)


def _log_vjp(g, out, x):
    return (g / x,)


def tanh(x):
    return np.tanh(x)


def _tanh_vjp(g, out, x):
    return (g * (1.0 - out * out),)


def sigmoid(x):
    return _sigmoid(x)


def _sigmoid_vjp(g, out, x):
    return (g * out * (1.0 - out),)


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def _log_sigmoid_vjp(g, out, x):
    return (g * _sigmoid(-np.asarray(x)),)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _softplus_vjp(g, out, x):
    return (g * _sigmoid(x),)


def matmul(x, y):
    return x @ y


def _matmul_vjp(g, out, x, y):
    x, y = np.asarray(x), np.asarray(y)
    if y.ndim == 1:  # (n, k) @ (k,)
        return np.outer(g, y), x.T @ g
    if x.ndim == 1:  # (k,) @ (k, m)
        return y @ g, np.outer(x, g)
    return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g


def transpose(x):
    return np.swapaxes(x, -1, -2)


def _transpose_vjp(g, out, x):
    return (np.swapaxes(g, -1, -2),)


def reshape(x, *, shape):
    return np.reshape(x, shape)


def _reshape_vjp(g, out, x, *, shape):
    return (np.reshape(g, _shape(x)),)


def take(x, *, index):
    """Basic or advanced indexing ``x[index]``."""
    return np.asarray(x)[index]


def _take_vjp(g, out, x, *, index):
    gx = np.zeros(_shape(x))
    np.add.at(gx, index, g)
    return (gx,)


def concat(*xs, axis=-1):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, *xs, axis=-1):
    bounds = np.cumsum([np.shape(x)[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def log_softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _log_softmax_vjp(g, out, x):
    return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)


def kl_categorical(x, ref_logp):
    """Row-wise KL(softmax(x) || exp(ref_logp)); ``ref_logp`` is held constant.

    The gradient p * (d - KL) is exactly zero when the logits match the
    reference, which the chained softmax/log/mul form only gets to rounding.
    """
    lp = log_softmax(x)
    return np.sum(np.exp(lp) * (lp - ref_logp), axis=-1)


def _kl_categorical_vjp(g, out, x, ref_logp):
    lp = log_softmax(x)
    return (np.expand_dims(g, -1) * np.exp(lp) * ((lp - ref_logp) - np.expand_dims(out, -1)), None)


def kl_bernoulli(z, ref_z):
    """Elementwise KL(Bern(sigmoid(z)) || Bern(sigmoid(ref_z))); ``ref_z`` is held constant."""
    p = _sigmoid(z)
    return p * (log_sigmoid(z) - log_sigmoid(ref_z)) + (1.0 - p) * (log_sigmoid(-z) - log_sigmoid(-ref_z))


def _kl_bernoulli_vjp(g, out, z, ref_z):
    p = _sigmoid(z)
    return (g * p * (1.0 - p) * (z - ref_z), None)


def minimum(x, y):
    return np.minimum(x, y)


def _minimum_vjp(g, out, x, y):
    pick_x = np.asarray(x) <= np.asarray(y)
    return _unbroadcast(g * pick_x, _shape(x)), _unbroadcast(g * ~pick_x, _shape(y))


def clip(x, *, lo, hi):
    return np.clip(x, lo, hi)


def _clip_vjp(g, out, x, *, lo, hi):
    return (g * ((x > lo) & (x < hi)),)


def luma(x):
    """BT.601 luma of an (H, W, C) array, kept as (H, W, 1).

    Written as B + 0.299 (R - B) + 0.587 (G - B) so grey pixels map to
    themselves exactly; this matches ``core.luma`` bit for bit.
    """
    if x.shape[2] == 1:
        return x
    b = x[:, :, 2:3]
    return b + 0.299 * (x[:, :, 0:1] - b) + 0.587 * (x[:, :, 1:2] - b)


def _luma_vjp(g, out, x):
    if x.shape[2] == 1:
        return (g,)
    return (g * np.array([0.299, 0.587, 1.0 - 0.299 - 0.587]),)


def _median3_stack(x):
    p = _pad_edge(x, 1, 1)
    h, w = x.shape[:2]
    return np.stack([p[i : i + h, j : j + w] for i in range(3) for j in range(3)])


def median3(x):
    """3x3 median filter with edge replication."""
    return np.partition(_median3_stack(x), 4, axis=0)[4]


def _median3_vjp(g, out, x):
    stack = _median3_stack(x)
    pick = np.argpartition(stack, 4, axis=0)[4]
    gstack = np.zeros_like(stack)
    np.put_along_axis(gstack, pick[None], g[None], axis=0)
    h, w = x.shape[:2]
    gp = np.zeros((h + 2, w + 2, x.shape[2]))
    for n, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
        gp[i : i + h, j : j + w] += gstack[n]
    return (_unpad_edge_adjoint(gp, 1, 1),)


def avgpool2(x):
    """2x2 block mean (trailing odd row/column dropped)."""
    h, w, c = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def _avgpool2_vjp(g, out, x):
    h, w, c = x.shape
    gx = np.zeros(x.shape)
    up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
    gx[: up.shape[0], : up.shape[1]] = up
    return (gx,)


PRIMITIVES = {
    "conv2d_same": (conv2d_same, _conv2d_same_vjp),
    "affine": (affine, _affine_vjp),
    "power_eps": (power_eps, _power_eps_vjp),
    "blend": (blend, _blend_vjp),
    "clamp01": (clamp01, _clamp01_vjp),
    "sub": (sub, _sub_vjp),
    "abs_mean": (abs_mean, _abs_mean_vjp),
    "square_mean": (square_mean, _square_mean_vjp),
    "add": (add, _add_vjp),
    "scale": (scale, _scale_vjp),
    # support set for losses, tool reparameterizations and the policy network
    "mul": (mul, _mul_vjp),
    "div": (div, _div_vjp),
    "mean": (mean, _mean_vjp),
    "total": (total, _total_vjp),
    "sqrt": (sqrt, _sqrt_vjp),
    "exp": (exp, _exp_vjp),
    "log": (log, _log_vjp),
    "tanh": (tanh, _tanh_vjp),
    "sigmoid": (sigmoid, _sigmoid_vjp),
    "log_sigmoid": (log_sigmoid, _log_sigmoid_vjp),
    "softplus": (softplus, _softplus_vjp),
    "matmul": (matmul, _matmul_vjp),
    "transpose": (transpose, _transpose_vjp),
    "reshape": (reshape, _reshape_vjp),
    "take": (take, _take_vjp),
    "concat": (concat, _concat_vjp),
    "log_softmax": (log_softmax, _log_softmax_vjp),
    "kl_categorical": (kl_categorical, _kl_categorical_vjp),
    "kl_bernoulli": (kl_bernoulli, _kl_bernoulli_vjp),
    "minimum": (minimum, _minimum_vjp),
    "clip": (clip, _clip_vjp),
    "luma": (luma, _luma_vjp),
    "median3": (median3, _median3_vjp),
    "avgpool2": (avgpool2, _avgpool2_vjp),
}


# ---------------------------------------------------------------------------
# Backends


class Node:
    __slots__ = ("index", "value", "parents", "fwd", "vjp", "kw", "param", "requires_grad")

    def __init__(self, index, value, parents=(), fwd=None, vjp=None, kw=None, param=None, requires_grad=False):
        self.index = index
        self.value = value
        self.parents = parents
        self.fwd = fwd
        self.vjp = vjp
        self.kw = kw or {}
        self.param = param
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self) -> str:
        name = self.fwd.__name__ if self.fwd else ("param" if self.param else "const")
        return f"Node({self.index}, {name}, shape={self.shape})"


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def _push(self, **kw) -> Node:
        node = Node(len(self.nodes), **kw)
        self.nodes.append(node)
        return node

    def const(self, value) -> Node:
        return self._push(value=np.asarray(value, dtype=np.float64))

    def param(self, p: Param) -> Node:
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._push(value=p.value, param=p, requires_grad=True)
            self._param_nodes[id(p)] = node
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Param):
            return self.param(x)
        return self.const(x)

    def apply(self, fwd, vjp, *args, **kw) -> Node:
        parents = tuple(self._lift(a) for a in args)
        value = fwd(*(p.value for p in parents), **kw)
        return self._push(
            value=value,
            parents=parents,
            fwd=fwd,
            vjp=vjp,
            kw=kw,
            requires_grad=any(p.requires_grad for p in parents),
        )

    def replay(self) -> None:
        """Recompute every forward value from the current leaf values."""
        for node in self.nodes:
            if node.param is not None:
                node.value = node.param.value
            elif node.fwd is not None:
                node.value = node.fwd(*(p.value for p in node.parents), **node.kw)

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(param) into ``Param.grad`` for reachable params.

        Gradients accumulate; call ``zero_grad`` between independent passes.
        """
        if np.size(loss.value) != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(np.asarray(loss.value, dtype=np.float64))}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.requires_grad:
                continue
            if node.param is not None:
                node.param.grad = node.param.grad + np.reshape(g, node.param.value.shape)
                continue
            pgrads = node.vjp(g, node.value, *(p.value for p in node.parents), **node.kw)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg


class Eval:
    """Forward-only backend with the same primitive surface as ``Tape``."""

    @staticmethod
    def const(value):
        return np.asarray(value, dtype=np.float64)

    @staticmethod
    def param(p: Param):
        return p.value


def _tape_method(fwd, vjp):
    def method(self, *args, **kw):
        return self.apply(fwd, vjp, *args, **kw)

    method.__name__ = fwd.__name__
    method.__doc__ = fwd.__doc__
    return method


for _name, (_fwd, _vjp) in PRIMITIVES.items():
    setattr(Tape, _name, _tape_method(_fwd, _vjp))
    setattr(Eval, _name, staticmethod(_fwd))

EVAL = Eval()


def value_of(x):
    return x.value if isinstance(x, Node) else x


# ---------------------------------------------------------------------------
# Verification


_KINKED = ("clamp01", "clip", "minimum")


def _kink_state(tape: Tape) -> list:
    """Which branch every piecewise node took, for spotting finite differences that cross a kink."""
    state = []
    for node in tape.nodes:
        name = node.fwd.__name__ if node.fwd else None
        if name in ("clamp01", "clip"):
            x = node.parents[0].value
            lo, hi = (0.0, 1.0) if name == "clamp01" else (node.kw["lo"], node.kw["hi"])
            state.append(np.sign(x - lo) + np.sign(x - hi))
        elif name == "minimum":
            state.append(np.sign(node.parents[0].value - node.parents[1].value))
    return state


def grad_report(f, params, h: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Per-element relative errors of analytic vs central-difference gradients.

    ``f(tape)`` builds a scalar loss node on ``tape``.  Also returns a mask of
    elements whose +-h perturbation moves a clamp/clip/minimum across its kink,
    where the central difference is not a derivative estimate.
    """
    params = list(params)
    zero_grad(params)
    tape = Tape()
    loss = f(tape)
    tape.backward(loss)
    base = _kink_state(tape)
    errs, kinked = [], []
    for p in params:
        analytic = p.grad.ravel().copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            crossed = False
            flat[i] = orig + h
            tape.replay()
            up = float(loss.value)
            crossed |= any(not np.array_equal(a, b) for a, b in zip(base, _kink_state(tape)))
            flat[i] = orig - h
            tape.replay()
            down = float(loss.value)
            crossed |= any(not np.array_equal(a, b) for a, b in zip(base, _kink_state(tape)))
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            errs.append(abs(analytic[i] - numeric) / denom)
            kinked.append(crossed)
    tape.replay()
    return np.asarray(errs), np.asarray(kinked, dtype=bool)


def grad_errors(f, params, h: float = 1e-4) -> np.ndarray:
    """Per-element relative errors of analytic vs central-difference gradients."""
    return grad_report(f, params, h)[0]


def grad_check(f, params, h: float = 1e-4) -> float:
    """Worst relative error between backward() and central differences."""
    errs = grad_errors(f, params, h)
    return float(errs.max()) if errs.size else 0.0


# ---------------------------------------------------------------------------
# Optimization


def global_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = global_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


class Adam:
    """Adam minimizing the loss whose gradient sits in ``Param.grad``."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self._state: dict[str, list] = {}

    def step(self, params) -> None:
        b1, b2 = self.betas
        for p in params:
            st = self._state.setdefault(p.name, [np.zeros_like(p.value), np.zeros_like(p.value), 0])
            m, v, t = st
            t += 1
            m = b1 * m + (1.0 - b1) * p.grad
            v = b2 * v + (1.0 - b2) * p.grad * p.grad
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self._state[p.name] = [m, v, t]


class NumericAbort(RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


def check_finite_grads(params) -> None:
    bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
    if bad:
        raise NumericAbort(
            f"non-finite gradient in {bad}",
            {p.name: {"value_absmax": float(np.nanmax(np.abs(p.value))), "grad": p.grad.tolist()} for p in params
             if p.name in bad},
        )

"""Dense differentiable building blocks with hand-written backward passes.

Everything works on float64 numpy arrays. Layers are plain functions that
return ``(output, cache)``; the matching ``*_backward`` consumes the cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream named by ``keys``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(eq=False)
class Tensor:
    value: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


@dataclass(eq=False)
class LayerParams:
    """Weights of one fully connected layer and its optional batch norm."""

    weight: Tensor
    bias: Optional[Tensor] = None
    bn_gamma: Optional[Tensor] = None
    bn_beta: Optional[Tensor] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None
    bn_momentum: float = BN_MOMENTUM

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for name in ("weight", "bias", "bn_gamma", "bn_beta"):
            t = getattr(self, name)
            if t is not None:
                yield name, t

    def buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        if self.has_bn:
            yield "bn_running_mean", self.bn_running_mean
            yield "bn_running_var", self.bn_running_var


def init_layer(n_in: int, n_out: int, rng: np.random.Generator, bn: bool) -> LayerParams:
    # He-uniform, suited to the ReLU that follows
    bound = np.sqrt(6.0 / max(n_in, 1))
    weight = Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)))
    if bn:
        return LayerParams(
            weight=weight,
            bn_gamma=Tensor(np.ones(n_out)),
            bn_beta=Tensor(np.zeros(n_out)),
            bn_running_mean=np.zeros(n_out),
            bn_running_var=np.ones(n_out),
        )
    return LayerParams(weight=weight, bias=Tensor(np.zeros(n_out)))


# -- linear -------------------------------------------------------------------

def linear_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None, stable: bool = False):
    """``y = x W^T + b`` row by row.

    With ``stable=True`` each output row is computed independently of the
    others (no BLAS blocking), so permuting rows permutes the result exactly.
    """
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear layer expects input width {w.shape[1]}, got {x.shape[-1]}")
    y = np.einsum("mi,oi->mo", x, w) if stable else x @ w.T
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dw, db)``."""
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# -- batch norm ---------------------------------------------------------------

def batchnorm_forward(x: np.ndarray, p: LayerParams, train: bool, eps: float = BN_EPS):
    """Normalize each column over the rows of ``x``.

    Train mode uses batch statistics and updates the running averages in
    ``p``; eval mode uses the running averages.
    """
    gamma, beta = p.bn_gamma.value, p.bn_beta.value
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        centered = x - mean
        const = x.max(axis=0) == x.min(axis=0)
        if const.any():
            centered[:, const] = 0.0
            var = np.where(const, 0.0, var)
        m = p.bn_momentum
        # in place, so references to the buffers (checkpoints) stay live
        p.bn_running_mean *= m
        p.bn_running_mean += (1 - m) * mean
        p.bn_running_var *= m
        p.bn_running_var += (1 - m) * var
    else:
        centered = x - p.bn_running_mean
        var = p.bn_running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return gamma * xhat + beta, (xhat, inv_std, train)


def batchnorm_backward(dy: np.ndarray, cache, gamma: np.ndarray):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


# -- pointwise ----------------------------------------------------------------

def relu(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy: np.ndarray, positive: np.ndarray) -> np.ndarray:
    return dy * positive


def dropout(x: np.ndarray, rate: float, train: bool, rng: Optional[np.random.Generator]):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not train or rate == 0.0:
        return x, None
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return x * scale, scale


def dropout_backward(dy: np.ndarray, scale) -> np.ndarray:
    return dy if scale is None else dy * scale


def masked_set_max(values: np.ndarray, mask: np.ndarray):
    """Max over the set axis (-2) of ``values[..., K, C]`` using only the
    entries where ``mask[..., K]`` is true.

    Masked entries are never read, so they may hold anything (including NaN).
    Returns ``(out[..., C], argmax[..., C])``; ties resolve to the lowest index.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_set_max: some set has no valid entry")
    guarded = np.where(mask[..., None], values, -np.inf)
    arg = guarded.argmax(axis=-2)
    out = np.take_along_axis(guarded, arg[..., None, :], axis=-2)[..., 0, :]
    return out, arg


def masked_set_max_backward(dout: np.ndarray, arg: np.ndarray, k: int) -> np.ndarray:
    shape = dout.shape[:-1] + (k,) + dout.shape[-1:]
    dvalues = np.zeros(shape)
    np.put_along_axis(dvalues, arg[..., None, :], dout[..., None, :], axis=-2)
    return dvalues


# -- composite layers -----------------------------------------------------------

def dense_forward(x, p: LayerParams, train: bool, rng=None, activation: bool = True, drop: float = 0.0):
    """Linear, then batch norm (if ``p`` has it), ReLU and dropout."""
    bias = p.bias.value if p.bias is not None else None
    y, _ = linear_forward(x, p.weight.value, bias, stable=not train)
    bn_cache = None
    if p.has_bn:
        y, bn_cache = batchnorm_forward(y, p, train)
    positive = None
    if activation:
        y, positive = relu(y)
    y, scale = dropout(y, drop, train, rng)
    return y, (x, bn_cache, positive, scale)


def dense_backward(dy, p: LayerParams, cache, need_dx: bool = True):
    x, bn_cache, positive, scale = cache
    dy = dropout_backward(dy, scale)
    if positive is not None:
        dy = relu_backward(dy, positive)
    if bn_cache is not None:
        dy, dgamma, dbeta = batchnorm_backward(dy, bn_cache, p.bn_gamma.value)
        p.bn_gamma.accumulate(dgamma)
        p.bn_beta.accumulate(dbeta)
    p.weight.accumulate(dy.T @ x)
    if p.bias is not None:
        p.bias.accumulate(dy.sum(axis=0))
    return dy @ p.weight.value if need_dx else None


@dataclass(eq=False)
class MLP:
    """Stack of dense layers applied to every row independently."""

    layers: list
    activations: list
    dropouts: list

    @classmethod
    def build(cls, n_in: int, widths, rng, final_linear: bool = False, dropouts=None) -> "MLP":
        layers, acts = [], []
        for j, w in enumerate(widths):
            last = final_linear and j == len(widths) - 1
            layers.append(init_layer(n_in, w, rng, bn=not last))
            acts.append(not last)
            n_in = w
        drops = list(dropouts) if dropouts is not None else [0.0] * len(widths)
        return cls(layers, acts, drops)

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.layers[-1].weight.shape[0]

    def forward(self, x, train: bool, rng=None):
        caches = []
        for p, act, drop in zip(self.layers, self.activations, self.dropouts):
            x, c = dense_forward(x, p, train, rng, act, drop)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches, need_dx: bool = True):
        for j in range(len(self.layers) - 1, -1, -1):
            dy = dense_backward(dy, self.layers[j], caches[j], need_dx or j > 0)
        return dy


# -- loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    Accepts a single logit vector with an integer label, or a (B, C) matrix
    with B labels.
    """
    single = logits.ndim == 1
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    n, c = z.shape
    if y.shape != (n,) or np.any(y < 0) or np.any(y >= c) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be {n} integers in [0, {c})")
    top = z.max(axis=1, keepdims=True)
    e = np.exp(z - top)
    total = e.sum(axis=1)
    rows = np.arange(n)
    # log(sum) written as log1p(sum - 1) keeps precision when one logit dominates
    loss_rows = np.log1p(total - 1.0) + top[:, 0] - z[rows, y]
    probs = e / total[:, None]
    grad = probs
    grad[rows, y] -= 1.0
    grad /= n
    loss = float(loss_rows.mean())
    return loss, (grad[0] if single else grad)


# -- optimizer ----------------------------------------------------------------

@dataclass(eq=False)
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: Optional[str]
    worst_index: Optional[Tuple[int, ...]]
    analytic: float
    numeric: float
    n_checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    function: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
    params: Dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-5,
    floor: float = 1e-6,
    max_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``function(params)`` must return ``(loss, grads)`` and be deterministic.
    Parameters are perturbed in place and restored. A coordinate whose error
    exceeds ``tolerance`` is re-measured at ``step / 10``, ``step / 100`` and
    ``step * 10``; the smallest error is kept. The small steps filter
    differences that straddle a ReLU or max kink, the large one filters
    roundoff on gradients that are zero up to cancellation. Genuine backward errors are step
    independent and stay visible.
    """
    _, grads = function(params)
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}

    def numeric(p, i, h):
        old = p[i]
        p[i] = old + h
        up, _ = function(params)
        p[i] = old - h
        down, _ = function(params)
        p[i] = old
        return (up - down) / (2 * h)

    worst = GradCheckReport(0.0, None, None, 0.0, 0.0, 0)
    count = 0
    for name, p in params.items():
        coords = list(np.ndindex(p.shape))
        if max_per_param is not None and len(coords) > max_per_param:
            pick = (rng or np.random.default_rng(0)).choice(len(coords), max_per_param, replace=False)
            coords = [coords[j] for j in sorted(pick)]
        for i in coords:
            a = float(grads[name][i])
            n = numeric(p, i, step)
            err = relative_error(a, n, floor)
            for h in (step / 10, step / 100, step * 10):
                if err < tolerance:
                    break
                n2 = numeric(p, i, h)
                err2 = relative_error(a, n2, floor)
                if err2 < err:
                    err, n = err2, n2
            count += 1
            if err > worst.max_rel_error or worst.worst_param is None:
                worst = GradCheckReport(err, name, tuple(int(j) for j in i), a, n, 0)
    worst.n_checked = count
    return worst

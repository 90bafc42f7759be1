"""Dense numeric kernel: activations, BCE, an MLP with manual backprop, Adam/SGD.

Everything runs in float64 on batched inputs of shape (batch, features).
Parameters live in plain ``dict[str, np.ndarray]`` mappings so that optimizers,
checkpoints and checksums can treat every network the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_EPS = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains non-finite values")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction. Accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ShapeError("softmax of an empty input")
    _check_finite(z, "softmax input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    """Numerically stable logistic function (scalar or array)."""
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z, "sigmoid input")
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce_per_instance(y, p):
    """Binary cross-entropy per element, on probabilities clamped to [1e-7, 1-1e-7]."""
    y = np.asarray(y, dtype=np.float64)
    p = clamp_prob(np.asarray(p, dtype=np.float64))
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return out if out.ndim else float(out)


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function ``f`` at ``x`` (any shape)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPS
    momentum: float = BN_MOMENTUM


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    batchnorm: BatchNorm | None = None


@dataclass
class MlpParams:
    """Hidden layers run affine -> batchnorm -> ReLU -> dropout; the last layer is
    affine followed by ``output_activation``."""

    layers: list[Layer]
    dropout_rate: float = 0.0
    output_activation: str = "none"  # softmax | sigmoid | none

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.output_activation not in ("softmax", "sigmoid", "none"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeError("consecutive layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def named_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Trainable arrays by name (live references)."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weight"] = layer.weight
            out[f"{prefix}{i}.bias"] = layer.bias
            if layer.batchnorm is not None:
                out[f"{prefix}{i}.gamma"] = layer.batchnorm.gamma
                out[f"{prefix}{i}.beta"] = layer.batchnorm.beta
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.batchnorm is not None:
                out[f"{prefix}{i}.running_mean"] = layer.batchnorm.running_mean
                out[f"{prefix}{i}.running_var"] = layer.batchnorm.running_var
        return out


def init_mlp(
    dims: list[int],
    rng: np.random.Generator,
    *,
    batchnorm: bool = False,
    dropout_rate: float = 0.0,
    output_activation: str = "none",
) -> MlpParams:
    """Xavier-uniform weights, zero biases, identity batchnorm."""
    layers = []
    n_layers = len(dims) - 1
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        bn = None
        if batchnorm and i < n_layers - 1:
            bn = BatchNorm(
                gamma=np.ones(fan_out),
                beta=np.zeros(fan_out),
                running_mean=np.zeros(fan_out),
                running_var=np.ones(fan_out),
            )
        layers.append(Layer(weight=w, bias=np.zeros(fan_out), batchnorm=bn))
    return MlpParams(layers, dropout_rate=dropout_rate, output_activation=output_activation)


@dataclass
class _LayerTape:
    x: np.ndarray
    z: np.ndarray  # affine output
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    pre_relu: np.ndarray | None = None
    mask: np.ndarray | None = None  # inverted-dropout multiplier


@dataclass
class MlpTape:
    mode: str
    layers: list[_LayerTape] = field(default_factory=list)
    output: np.ndarray | None = None

    @property
    def dropout_masks(self) -> list[np.ndarray | None]:
        return [lt.mask for lt in self.layers]


def mlp_forward(
    params: MlpParams,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    masks: list[np.ndarray | None] | None = None,
    update_stats: bool = True,
) -> tuple[np.ndarray, MlpTape]:
    """Forward pass on a (batch, in_dim) array.

    In train mode batchnorm uses batch statistics (and updates the running
    statistics unless ``update_stats`` is False) and dropout masks are drawn
    from ``rng``, or reused from ``masks`` when given.  Eval mode is a pure
    function of ``(params, x)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.shape[1] != params.in_dim:
        raise ShapeError(f"input dim {h.shape[1]} != first layer dim {params.in_dim}")
    train = mode == "train"
    use_dropout = train and params.dropout_rate > 0.0
    if use_dropout and masks is None and rng is None:
        raise ValueError("train-mode dropout needs an rng or frozen masks")
    keep = 1.0 - params.dropout_rate

    tape = MlpTape(mode=mode)
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        z = h @ layer.weight.T + layer.bias
        lt = _LayerTape(x=h, z=z)
        tape.layers.append(lt)
        if i == last:
            h = z
            break
        a = z
        bn = layer.batchnorm
        if bn is not None:
            if train:
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    n = z.shape[0]
                    unbiased = var * n / (n - 1) if n > 1 else var
                    bn.running_mean *= 1.0 - bn.momentum
                    bn.running_mean += bn.momentum * mean
                    bn.running_var *= 1.0 - bn.momentum
                    bn.running_var += bn.momentum * unbiased
            else:
                mean, var = bn.running_mean, bn.running_var
            inv_std = 1.0 / np.sqrt(var + bn.epsilon)
            xhat = (z - mean) * inv_std
            lt.xhat, lt.inv_std = xhat, inv_std
            a = bn.gamma * xhat + bn.beta
        lt.pre_relu = a
        h = np.maximum(a, 0.0)
        if use_dropout:
            if masks is not None:
                mask = masks[i]
            else:
                mask = (rng.random(h.shape) < keep) / keep
            lt.mask = mask
            h = h * mask

    if params.output_activation == "softmax":
        out = softmax(h)
    elif params.output_activation == "sigmoid":
        out = sigmoid(h)
    else:
        out = h
    tape.output = out
    return out, tape


def mlp_backward(
    params: MlpParams, tape: MlpTape, grad_out: np.ndarray, prefix: str = ""
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(output).

    ``grad_out`` is taken with respect to the post-activation output.  Returns
    ``(param_grads, grad_input)`` with keys matching ``params.named_arrays(prefix)``.
    """
    if len(tape.layers) != len(params.layers):
        raise ShapeError("tape does not match params")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {tape.output.shape}")

    out = tape.output
    if params.output_activation == "softmax":
        g = out * (g - (g * out).sum(axis=1, keepdims=True))
    elif params.output_activation == "sigmoid":
        g = g * out * (1.0 - out)

    grads: dict[str, np.ndarray] = {}
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        layer, lt = params.layers[i], tape.layers[i]
        if i != last:
            if lt.mask is not None:
                g = g * lt.mask
            g = g * (lt.pre_relu > 0)
            bn = layer.batchnorm
            if bn is not None:
                grads[f"{prefix}{i}.gamma"] = (g * lt.xhat).sum(axis=0)
                grads[f"{prefix}{i}.beta"] = g.sum(axis=0)
                gx = g * bn.gamma
                if tape.mode == "train":
                    n = gx.shape[0]
                    g = (lt.inv_std / n) * (
                        n * gx - gx.sum(axis=0) - lt.xhat * (gx * lt.xhat).sum(axis=0)
                    )
                else:
                    g = gx * lt.inv_std
        grads[f"{prefix}{i}.weight"] = g.T @ lt.x
        grads[f"{prefix}{i}.bias"] = g.sum(axis=0)
        g = g @ layer.weight
    return grads, g


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam.  Updates ``params`` arrays in place.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if state.learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


@dataclass
class SgdState:
    learning_rate: float = 1e-2
    step: int = 0


def sgd_step(state: SgdState, params, grads):
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape mismatch for {name}")
            p -= state.learning_rate * g
    return params, state


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return AdamState(learning_rate=lr)
    if kind == "sgd":
        return SgdState(learning_rate=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(state, params, grads):
    if isinstance(state, AdamState):
        return adam_step(state, params, grads)
    return sgd_step(state, params, grads)

"""Small deterministic neural-network engine on top of numpy.

Every layer works on batched float64 arrays (leading batch axis) and exposes
pure ``forward(x)`` / ``backward(x, grad)`` methods: backward recomputes what it
needs from the forward input instead of caching, so a trained layer can be
shared read-only between workers.

Image tensors use the ``(N, C, H, W)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, TrainingError, UsageError

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 10.0


class Layer:
    kind = "layer"

    def __init__(self):
        self.name = self.kind

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def hyperparams(self) -> tuple[int, ...]:
        return ()

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(input_shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, grad: np.ndarray):
        """Return ``(input_grad, {param_name: grad})``."""
        raise NotImplementedError

    def _shape_error(self, expected, actual):
        return ConfigurationError(
            f"{self.name}: expected input shape {expected}, got {tuple(actual)}"
        )

    def _check_grad(self, x, grad):
        expected = (x.shape[0],) + self.output_shape(x.shape[1:])
        if grad.shape != expected:
            raise ConfigurationError(
                f"{self.name}: upstream gradient shape {grad.shape} != output shape {expected}"
            )

    def __repr__(self):
        hp = ", ".join(str(v) for v in self.hyperparams())
        return f"{type(self).__name__}({hp})"


class Dense(Layer):
    """Affine map ``y = x @ W.T + b`` with ``W`` of shape ``(out, in)``."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise ConfigurationError(f"dense: non-positive size {in_features}x{out_features}")
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = np.zeros((self.out_features, self.in_features))
        self.bias = np.zeros(self.out_features) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def hyperparams(self):
        return (self.in_features, self.out_features, int(self.bias is not None))

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise self._shape_error((self.in_features,), input_shape)
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise self._shape_error((self.in_features,), x.shape[1:])
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y

    def backward(self, x, grad):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise self._shape_error((self.in_features,), x.shape[1:])
        self._check_grad(x, grad)
        grads = {"weight": grad.T @ x}
        if self.bias is not None:
            grads["bias"] = grad.sum(axis=0)
        return grad @ self.weight, grads


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        if min(in_channels, out_channels, kernel_size, stride) <= 0 or padding < 0:
            raise ConfigurationError(
                f"conv2d: invalid hyperparameters in={in_channels} out={out_channels} "
                f"k={kernel_size} stride={stride} pad={padding}"
            )
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        k = self.kernel_size
        self.weight = np.zeros((self.out_channels, self.in_channels, k, k))
        self.bias = np.zeros(self.out_channels) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def hyperparams(self):
        return (self.in_channels, self.out_channels, self.kernel_size,
                self.stride, self.padding, int(self.bias is not None))

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise self._shape_error(f"({self.in_channels}, H, W)", input_shape)
        _, h, w = input_shape
        ho = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise self._shape_error(f"spatial size >= {self.kernel_size}", input_shape)
        return (self.out_channels, ho, wo)

    def _columns(self, x):
        """im2col: ``(N, Ho, Wo, C, k, k)`` view-derived array of input patches."""
        p, s, k = self.padding, self.stride, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.transpose(0, 2, 3, 1, 4, 5)

    def forward(self, x):
        if x.ndim != 4:
            raise self._shape_error(f"({self.in_channels}, H, W)", x.shape[1:])
        n = x.shape[0]
        _, ho, wo = self.output_shape(x.shape[1:])
        cols = self._columns(x).reshape(n * ho * wo, -1)
        y = cols @ self.weight.reshape(self.out_channels, -1).T
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, x, grad):
        if x.ndim != 4:
            raise self._shape_error(f"({self.in_channels}, H, W)", x.shape[1:])
        self._check_grad(x, grad)
        n = x.shape[0]
        _, ho, wo = grad.shape[1:]
        k, s, p = self.kernel_size, self.stride, self.padding
        g2 = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        cols = self._columns(x).reshape(n * ho * wo, -1)
        grads = {"weight": (g2.T @ cols).reshape(self.weight.shape)}
        if self.bias is not None:
            grads["bias"] = g2.sum(axis=0)
        dcols = (g2 @ self.weight.reshape(self.out_channels, -1)).reshape(
            n, ho, wo, self.in_channels, k, k)
        dxp = np.zeros((n, self.in_channels, x.shape[2] + 2 * p, x.shape[3] + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
        return dx, grads


class ReLU(Layer):
    """Rectifier; the subgradient at 0 is taken as 0."""

    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, grad):
        if grad.shape != x.shape:
            raise ConfigurationError(f"{self.name}: gradient shape {grad.shape} != {x.shape}")
        return grad * (x > 0), {}


class MaxPool2D(Layer):
    """Max pooling; ties route the gradient to the first maximal cell (row-major)."""

    kind = "maxpool2d"

    def __init__(self, size: int = 2, stride: int | None = None):
        super().__init__()
        self.size = int(size)
        self.stride = int(stride if stride is not None else size)
        if self.size <= 0 or self.stride <= 0:
            raise ConfigurationError(f"maxpool2d: invalid size={size} stride={stride}")

    def hyperparams(self):
        return (self.size, self.stride)

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise self._shape_error("(C, H, W)", input_shape)
        c, h, w = input_shape
        ho = (h - self.size) // self.stride + 1
        wo = (w - self.size) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise self._shape_error(f"spatial size >= {self.size}", input_shape)
        return (c, ho, wo)

    def _windows(self, x):
        if x.ndim != 4:
            raise self._shape_error("(C, H, W)", x.shape[1:])
        c, ho, wo = self.output_shape(x.shape[1:])
        k, s = self.size, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.reshape(x.shape[0], c, ho, wo, k * k)

    def forward(self, x):
        return self._windows(x).max(axis=-1)

    def backward(self, x, grad):
        self._check_grad(x, grad)
        arg = self._windows(x).argmax(axis=-1)  # argmax returns the first maximum
        k, s = self.size, self.stride
        ho, wo = grad.shape[2:]
        dx = np.zeros_like(x)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad * (arg == idx)
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, grad):
        if grad.shape != (x.shape[0], int(np.prod(x.shape[1:]))):
            raise ConfigurationError(f"{self.name}: gradient shape {grad.shape} mismatch")
        return grad.reshape(x.shape), {}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2D, Flatten)}


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    return layer.forward(np.asarray(x, dtype=np.float64))


def layer_backward(layer: Layer, x: np.ndarray, upstream: np.ndarray):
    return layer.backward(np.asarray(x, dtype=np.float64), np.asarray(upstream, dtype=np.float64))


class Sequential:
    """An ordered stack of layers with statically checked shapes.

    ``shapes[i]`` is the per-sample input shape of layer ``i``;
    ``shapes[-1]`` is the network output shape.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            layer.name = f"layer {i} ({layer.kind})"
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {i}: {exc}") from None
        self.shapes = shapes

    def __len__(self):
        return len(self.layers)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def init_params(self, rng: np.random.Generator) -> "Sequential":
        """He-normal weights, zero biases, drawn in layer order."""
        for layer in self.layers:
            if isinstance(layer, Dense):
                layer.weight[...] = rng.normal(0.0, np.sqrt(2.0 / layer.in_features), layer.weight.shape)
            elif isinstance(layer, Conv2D):
                fan_in = layer.in_channels * layer.kernel_size ** 2
                layer.weight[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), layer.weight.shape)
            for name, p in layer.params().items():
                if name == "bias":
                    p[...] = 0.0
        return self

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def _check_input(self, x, start):
        expected = self.shapes[start]
        if x.shape[1:] != expected:
            raise ConfigurationError(
                f"layer {start} ({self.layers[start].kind if start < len(self) else 'output'}): "
                f"expected input shape {expected}, got {x.shape[1:]}"
            )

    def forward(self, x: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = len(self.layers) if stop is None else stop
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x, start)
        for layer in self.layers[start:stop]:
            x = layer.forward(x)
        return x

    def forward_trace(self, x: np.ndarray) -> list[np.ndarray]:
        """All activations, ``acts[0]`` being the input and ``acts[-1]`` the output."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x, 0)
        acts = [x]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1]))
        return acts

    def backward(self, acts: list[np.ndarray], grad: np.ndarray):
        """Backpropagate ``grad`` (w.r.t. the output); returns ``(input_grad, param_grads)``."""
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            grad, pg = self.layers[i].backward(acts[i], grad)
            for name, g in pg.items():
                grads[f"{i}.{name}"] = g
        return grad, grads


# -- optimizers ---------------------------------------------------------------

@dataclass
class SGD:
    lr: float = 0.01
    steps: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        _check_grads(params, grads)
        for name, g in grads.items():
            params[name] -= self.lr * g
        self.steps += 1
        return params


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        _check_grads(params, grads)
        self.steps += 1
        t = self.steps
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def _check_grads(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise UsageError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")


def train_step(params, grads, opt):
    return opt.step(params, grads)


# -- probabilistic primitives -------------------------------------------------

@dataclass
class GaussianHead:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != self.log_sigma.shape:
            raise ConfigurationError(f"mu shape {self.mu.shape} != log_sigma shape {self.log_sigma.shape}")

    @property
    def sigma(self):
        return np.exp(self.log_sigma)


def reparameterize(head: GaussianHead, eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != head.mu.shape:
        raise UsageError(f"eps shape {eps.shape} != mu shape {head.mu.shape}")
    return head.mu + np.exp(head.log_sigma) * eps


def kl_diag_gaussian(head: GaussianHead) -> float:
    """KL(N(mu, sigma^2) || N(0, I)), summed over every coordinate.

    Uses the nonnegative orientation 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
    The ``expm1(2s) - 2s`` form avoids cancellation near sigma = 1.
    """
    s = head.log_sigma
    return float(0.5 * np.sum(head.mu ** 2 + np.expm1(2 * s) - 2 * s))


def kl_per_sample(mu: np.ndarray, log_sigma: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(mu ** 2 + np.expm1(2 * log_sigma) - 2 * log_sigma, axis=-1)


def kl_grads(mu: np.ndarray, log_sigma: np.ndarray):
    """Gradients of :func:`kl_per_sample` w.r.t. ``mu`` and ``log_sigma``."""
    return mu, np.expm1(2 * log_sigma)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_confidence(logits) -> tuple[int, float]:
    """Predicted class (lowest index on ties) and its softmax probability."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise UsageError(f"logits must be 1-D with at least 2 entries, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise UsageError("logits must be finite")
    p = softmax(logits)
    k = int(np.argmax(p))
    return k, float(p[k])


def batch_confidence(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = softmax(np.asarray(logits, dtype=np.float64))
    k = p.argmax(axis=1)
    return k, p[np.arange(len(k)), k]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n

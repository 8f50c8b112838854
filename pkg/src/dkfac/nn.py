"""Small reverse-mode network: linear, conv2d and ReLU layers.

Weights are stored as ``(out, fan_in [+1])`` matrices with the bias folded
in as the last column; layer inputs are extended with a column of ones to
match.  The forward pass records each trainable layer's (extended) input
rows, and the backward pass records the per-sample output gradients, so
the capture carries everything the Kronecker factors are built from.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _accel, _kernels
from .errors import DimensionError, StateError

LAYER_KINDS = ("linear", "conv2d", "relu")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "linear" and min(self.in_features, self.out_features) <= 0:
            raise ValueError("linear layer dimensions must be positive")
        if self.kind == "conv2d":
            dims = (self.in_channels, self.out_channels, self.kernel_h, self.kernel_w)
            if min(dims) <= 0:
                raise ValueError("conv2d dimensions must be positive")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("conv2d needs stride >= 1 and padding >= 0")

    @classmethod
    def linear(cls, in_features, out_features, bias=True):
        return cls("linear", in_features=in_features, out_features=out_features, has_bias=bias)

    @classmethod
    def conv2d(cls, in_channels, out_channels, kernel, stride=1, padding=0, bias=True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        return cls(
            "conv2d",
            in_channels=in_channels,
            out_channels=out_channels,
            kernel_h=kh,
            kernel_w=kw,
            stride=stride,
            padding=padding,
            has_bias=bias,
        )

    @classmethod
    def relu(cls):
        return cls("relu")

    @property
    def trainable(self):
        return self.kind != "relu"

    @property
    def fan_in(self):
        if self.kind == "linear":
            return self.in_features
        if self.kind == "conv2d":
            return self.in_channels * self.kernel_h * self.kernel_w
        return 0

    @property
    def fan_out(self):
        if self.kind == "linear":
            return self.out_features
        if self.kind == "conv2d":
            return self.out_channels
        return 0

    @property
    def weight_shape(self):
        return (self.fan_out, self.fan_in + int(self.has_bias))

    def output_hw(self, h, w):
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise DimensionError(
                f"{self.kernel_h}x{self.kernel_w} kernel does not fit a padded {h}x{w} input"
            )
        return oh, ow


def _propagate_shape(spec, shape):
    """Per-sample output shape of ``spec`` for per-sample input ``shape``."""
    if spec.kind == "relu":
        return shape
    if spec.kind == "linear":
        flat = int(np.prod(shape))
        if flat != spec.in_features:
            raise DimensionError(f"linear layer expects {spec.in_features} inputs, got {shape}")
        return (spec.out_features,)
    if len(shape) != 3 or shape[0] != spec.in_channels:
        raise DimensionError(f"conv2d layer expects ({spec.in_channels}, H, W) input, got {shape}")
    oh, ow = spec.output_hw(shape[1], shape[2])
    return (spec.out_channels, oh, ow)


class Model:
    """Ordered layer stack plus one weight matrix per trainable layer."""

    def __init__(self, layers, input_shape, rng_seed=0, weights=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.rng_seed = rng_seed
        shape = self.input_shape
        self.shapes = [shape]
        for spec in self.layers:
            shape = _propagate_shape(spec, shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise DimensionError("the last layer must produce a flat vector of class scores")
        self.trainable = [i for i, s in enumerate(self.layers) if s.trainable]
        if weights is None:
            weights = self._init_weights(rng_seed)
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        for idx, w in zip(self.trainable, self.weights):
            if w.shape != self.layers[idx].weight_shape:
                raise DimensionError(
                    f"layer {idx}: weight shape {w.shape} != {self.layers[idx].weight_shape}"
                )
        if len(self.weights) != len(self.trainable):
            raise DimensionError("one weight matrix per trainable layer is required")

    def _init_weights(self, seed):
        rng = np.random.default_rng(seed)
        weights = []
        for idx in self.trainable:
            spec = self.layers[idx]
            bound = np.sqrt(6.0 / spec.fan_in)
            w = rng.uniform(-bound, bound, size=(spec.fan_out, spec.fan_in))
            if spec.has_bias:
                w = np.hstack([w, np.zeros((spec.fan_out, 1))])
            weights.append(w)
        return weights

    @property
    def n_classes(self):
        return self.shapes[-1][0]

    @property
    def n_params(self):
        return sum(w.size for w in self.weights)

    def clone(self):
        return Model(self.layers, self.input_shape, self.rng_seed, [w.copy() for w in self.weights])


def mlp(n_features, hidden, n_classes, seed=0):
    layers = []
    width = n_features
    for h in hidden:
        layers += [LayerSpec.linear(width, h), LayerSpec.relu()]
        width = h
    layers.append(LayerSpec.linear(width, n_classes))
    return Model(layers, (n_features,), seed)


def smallconv(input_shape, n_classes, channels=(4, 8), hidden=16, seed=0):
    """Two 3x3 convolutions (the second strided) followed by two linear layers."""
    c, h, w = input_shape
    conv1 = LayerSpec.conv2d(c, channels[0], 3, stride=1, padding=1)
    conv2 = LayerSpec.conv2d(channels[0], channels[1], 3, stride=2, padding=1)
    h1, w1 = conv1.output_hw(h, w)
    h2, w2 = conv2.output_hw(h1, w1)
    flat = channels[1] * h2 * w2
    layers = [
        conv1,
        LayerSpec.relu(),
        conv2,
        LayerSpec.relu(),
        LayerSpec.linear(flat, hidden),
        LayerSpec.relu(),
        LayerSpec.linear(hidden, n_classes),
    ]
    return Model(layers, (c, h, w), seed)


def build_model(name, input_shape, n_classes, hidden=(64, 64), seed=0):
    if name == "mlp":
        return mlp(int(np.prod(input_shape)), hidden, n_classes, seed)
    if name == "smallconv":
        if len(input_shape) == 1:
            side = int(round(np.sqrt(input_shape[0])))
            if side * side != input_shape[0]:
                raise DimensionError(f"cannot view {input_shape[0]} features as a square image")
            input_shape = (1, side, side)
        return smallconv(tuple(input_shape), n_classes, seed=seed)
    raise ValueError(f"unknown model {name!r}; expected 'mlp' or 'smallconv'")


# ------------------------------------------------------------- im2col --

def _pad(x, p):
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x, spec):
    """Unfold a ``(N, C, H, W)`` input into ``(N*OH*OW, C*kh*kw [+1])`` patch rows.

    Rows are ordered sample-major then by output position; columns by
    channel then kernel row then kernel column, matching the weight layout.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"im2col expects (N, {spec.in_channels}, H, W), got {x.shape}")
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    xp = _pad(x, spec.padding)
    kernel = _kernels.im2col_numba if _accel.use_numba() else _kernels.im2col_numpy
    cols = kernel(xp, spec.kernel_h, spec.kernel_w, spec.stride, oh, ow)
    if spec.has_bias:
        cols = np.hstack([cols, np.ones((cols.shape[0], 1))])
    return np.ascontiguousarray(cols)


def col2im(cols, spec, input_shape):
    """Adjoint of :func:`im2col` without the bias column: scatter-add patches back."""
    n, c, h, w = input_shape
    oh, ow = spec.output_hw(h, w)
    p = spec.padding
    padded = (n, c, h + 2 * p, w + 2 * p)
    kernel = _kernels.col2im_numba if _accel.use_numba() else _kernels.col2im_numpy
    out = kernel(np.ascontiguousarray(cols), padded, spec.kernel_h, spec.kernel_w, spec.stride, oh, ow)
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


# ------------------------------------------------------ forward/backward --

@dataclass
class LayerCapture:
    layer: int
    a_prev: np.ndarray
    g_out: np.ndarray = None
    grad: np.ndarray = None


@dataclass
class BatchCapture:
    """Per-trainable-layer inputs, output gradients and weight gradients."""

    layers: list
    batch_size: int
    smoothing: float
    logits: np.ndarray = None
    _tape: list = field(default_factory=list, repr=False)
    _dlogits: np.ndarray = field(default=None, repr=False)
    _n_layers: int = 0

    @property
    def backward_done(self):
        return all(c.grad is not None for c in self.layers)

    @property
    def grads(self):
        return [c.grad for c in self.layers]


def log_softmax(z):
    z = z - np.max(z, axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def smoothed_targets(labels, n_classes, smoothing):
    t = np.full((labels.shape[0], n_classes), smoothing / n_classes)
    t[np.arange(labels.shape[0]), labels] += 1.0 - smoothing
    return t


def logits(model, batch):
    """Forward pass without recording anything."""
    x = _reshape_batch(model, batch)
    for spec, w in _layer_weights(model):
        x, _ = _layer_forward(spec, w, x)
    return x


def forward(model, batch, labels, smoothing=0.1):
    """Mean smoothed cross-entropy over the batch plus the capture for :func:`backward`."""
    x = _reshape_batch(model, batch)
    labels = np.asarray(labels)
    n = x.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= model.n_classes):
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    layer_caps = []
    tape = []
    for spec, w in _layer_weights(model):
        in_shape = x.shape
        x, saved = _layer_forward(spec, w, x)
        tape.append((spec, w, in_shape, saved))
        if spec.trainable:
            layer_caps.append(LayerCapture(layer=len(tape) - 1, a_prev=saved))
    logp = log_softmax(x)
    targets = smoothed_targets(labels, model.n_classes, smoothing)
    loss = float(-np.sum(targets * logp) / n)
    dlogits = (np.exp(logp) - targets) / n
    cap = BatchCapture(layers=layer_caps, batch_size=n, smoothing=smoothing, logits=x)
    cap._tape = tape
    cap._dlogits = dlogits
    cap._n_layers = len(model.layers)
    return loss, cap


def backward(model, capture):
    """Fill ``g_out`` and ``grad`` for every trainable layer; returns the gradients.

    Gradients are those of the batch-mean loss.  ``g_out`` rows are scaled
    by the batch size so they are per-sample output gradients.
    """
    if capture._dlogits is None or capture._n_layers != len(model.layers):
        raise StateError("capture was not produced by forward() on this model")
    if len(capture.layers) != len(model.trainable):
        raise StateError("capture does not match the model's trainable layers")
    n = capture.batch_size
    d = capture._dlogits
    by_layer = {c.layer: c for c in capture.layers}
    for idx in range(len(capture._tape) - 1, -1, -1):
        spec, w, in_shape, saved = capture._tape[idx]
        need_input_grad = idx > 0
        if spec.kind == "relu":
            d = d * saved
            continue
        cap = by_layer[idx]
        if spec.kind == "linear":
            rows = d
            cap.grad = rows.T @ saved
            cap.g_out = rows * n
            if need_input_grad:
                d = (rows @ w[:, : spec.in_features]).reshape(in_shape)
        else:
            rows = d.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
            cap.grad = rows.T @ saved
            cap.g_out = rows * n
            if need_input_grad:
                dcols = rows @ w[:, : spec.fan_in]
                d = col2im(dcols, spec, in_shape)
    return capture.grads


def _reshape_batch(model, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 1 or x.shape[0] < 1:
        raise DimensionError("batch must contain at least one sample")
    per_sample = int(np.prod(model.input_shape))
    if x[0].size != per_sample:
        raise DimensionError(f"samples have {x[0].size} values, model expects {model.input_shape}")
    return x.reshape((x.shape[0],) + model.input_shape)


def _layer_weights(model):
    it = iter(model.weights)
    for spec in model.layers:
        yield spec, (next(it) if spec.trainable else None)


def _layer_forward(spec, w, x):
    """Returns ``(output, saved)``: the extended input rows, or the ReLU mask."""
    if spec.kind == "relu":
        mask = (x > 0).astype(x.dtype)
        return x * mask, mask
    if spec.kind == "linear":
        a = x.reshape(x.shape[0], -1)
        if spec.has_bias:
            a = np.hstack([a, np.ones((a.shape[0], 1))])
        return a @ w.T, a
    n = x.shape[0]
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    cols = im2col(x, spec)
    y = (cols @ w.T).reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cols

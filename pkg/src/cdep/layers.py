"""Layer specs, the two reference architectures, and weight checkpoints.

A network is an ordered list of layer objects plus a frozen-prefix count.
Shapes are validated when the network is built; the flatten size feeding the
first dense layer is always computed from the preceding stack, never
hard-coded.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import storage


class Linear:
    kind = "linear"

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.w = None  # (in, out)
        self.b = None  # (out,)

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ad.ShapeError(
                f"linear expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def spec(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Conv2D:
    kind = "conv2d"

    def __init__(self, c_in, c_out, k):
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.w = None  # (c_out, c_in, k, k)
        self.b = None  # (c_out,)

    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in or h < self.k or w < self.k:
            raise ad.ShapeError(
                f"conv2d({self.c_in}->{self.c_out}, k={self.k}) cannot take input {in_shape}")
        return (self.c_out, h - self.k + 1, w - self.k + 1)

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "k": self.k}


class ReLU:
    kind = "relu"

    def params(self):
        return []

    def out_shape(self, in_shape):
        return in_shape

    def spec(self):
        return {"kind": self.kind}


class MaxPool2D:
    kind = "maxpool2d"

    def __init__(self, k):
        self.k = k

    def params(self):
        return []

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.k or w % self.k:
            raise ad.ShapeError(f"pool window {self.k} does not divide {in_shape}")
        return (c, h // self.k, w // self.k)

    def spec(self):
        return {"kind": self.kind, "k": self.k}


class Dropout:
    kind = "dropout"

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def params(self):
        return []

    def out_shape(self, in_shape):
        return in_shape

    def spec(self):
        return {"kind": self.kind, "p": self.p}


class Flatten:
    kind = "flatten"

    def params(self):
        return []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def spec(self):
        return {"kind": self.kind}


_LAYER_KINDS = {c.kind: c for c in (Linear, Conv2D, ReLU, MaxPool2D, Dropout, Flatten)}


class Network:
    """Ordered layer stack over a fixed per-sample input shape.

    ``frozen_prefix`` leading layers are excluded from gradient updates;
    their parameters stay bit-identical to their initial values through
    training.
    """

    def __init__(self, layers, input_shape, frozen_prefix=0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.frozen_prefix = frozen_prefix
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)  # raises if the stack does not compose
        self.output_shape = shape

    def parameters(self):
        """Trainable parameters (frozen-prefix layers excluded)."""
        out = []
        for layer in self.layers[self.frozen_prefix:]:
            out.extend(layer.params())
        return out

    def all_parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def shape_at(self, depth):
        """Per-sample activation shape after the first ``depth`` layers."""
        shape = self.input_shape
        for layer in self.layers[:depth]:
            shape = layer.out_shape(shape)
        return shape


def init_params(net: Network, seed) -> Network:
    """He-uniform fan-in init before ReLU, Glorot-uniform otherwise; zero biases.

    Draws happen in layer order from one generator, so a fixed seed
    reproduces the parameters bit-exactly.
    """
    rng = np.random.default_rng(seed)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Linear):
            fan_in, fan_out = layer.in_features, layer.out_features
            shape = (fan_in, fan_out)
        elif isinstance(layer, Conv2D):
            fan_in = layer.c_in * layer.k * layer.k
            fan_out = layer.c_out * layer.k * layer.k
            shape = (layer.c_out, layer.c_in, layer.k, layer.k)
        else:
            continue
        if _followed_by_relu(net.layers, i):
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        layer.w = ad.Tensor(rng.uniform(-bound, bound, size=shape), track=True)
        layer.b = ad.Tensor(np.zeros(shape[-1] if isinstance(layer, Linear) else layer.c_out),
                            track=True)
    return net


def _followed_by_relu(layers, i):
    for nxt in layers[i + 1:]:
        if isinstance(nxt, ReLU):
            return True
        if isinstance(nxt, (Dropout, MaxPool2D, Flatten)):
            continue  # shape/regularization layers don't end the activation question
        return False
    return False


def sample_dropout_masks(net: Network, batch, rng):
    """Pre-scaled inverted-dropout masks, one per dropout layer, keyed by index.

    Sampling them up front lets the standard forward and the decomposition
    forward share the exact same masks within a training step.
    """
    masks = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Dropout):
            shape = (batch,) + net.shape_at(i)
            keep = (rng.random(shape) >= layer.p).astype(np.float64)
            masks[i] = keep / (1.0 - layer.p)
    return masks


def apply_layer(layer, x, mode="eval", dropout_mask=None):
    """Standard forward of one layer; dropout needs its pre-scaled mask in train mode."""
    if isinstance(layer, Linear):
        return x @ layer.w + layer.b
    if isinstance(layer, Conv2D):
        return ad.conv2d(x, layer.w) + layer.b.reshape((1, layer.c_out, 1, 1))
    if isinstance(layer, ReLU):
        return ad.relu(x)
    if isinstance(layer, MaxPool2D):
        return ad.maxpool2d(x, layer.k)
    if isinstance(layer, Dropout):
        if mode == "eval":
            return x
        if dropout_mask is None:
            raise ValueError("train-mode dropout needs a sampled mask")
        return x * dropout_mask
    if isinstance(layer, Flatten):
        return x.reshape((x.shape[0], -1))
    raise ad.UnsupportedOpError(f"unsupported layer kind: {type(layer).__name__}")


def forward(net: Network, x, mode="eval", dropout_masks=None, rng=None, start=0):
    """Logits of the network; softmax lives in the loss, not here.

    In train mode dropout masks come from ``dropout_masks`` (as produced by
    ``sample_dropout_masks``) or are sampled from ``rng``. ``start`` resumes
    from a cached activation at that layer depth.
    """
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if start == 0 and x.shape[1:] != net.input_shape:
        raise ad.ShapeError(
            f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    if mode == "train" and dropout_masks is None:
        if rng is None:
            dropout_masks = {}
            if any(isinstance(l, Dropout) for l in net.layers):
                raise ValueError("train-mode forward needs dropout_masks or rng")
        else:
            dropout_masks = sample_dropout_masks(net, x.shape[0], rng)
    for i in range(start, len(net.layers)):
        layer = net.layers[i]
        mask = dropout_masks.get(i) if (dropout_masks and mode == "train") else None
        x = apply_layer(layer, x, mode=mode, dropout_mask=mask)
    return x


# ---------------------------------------------------------------------------
# reference architectures


def build_mnist_cnn(in_channels=1, seed=0) -> Network:
    """Conv(20,5)-pool-Conv(50,5)-pool-FC(256)-FC(10) digit classifier.

    ReLU follows each conv block and the first dense layer (the appendix
    shorthand omits activations; the assumption is recorded in the run
    manifest). Max-pool windows are 2x2 and the flatten size is computed
    from the stack.
    """
    stem = [
        Conv2D(in_channels, 20, 5),
        ReLU(),
        MaxPool2D(2),
        Conv2D(20, 50, 5),
        ReLU(),
        MaxPool2D(2),
        Flatten(),
    ]
    flat = Network(stem, (in_channels, 28, 28)).output_shape[0]
    layers = stem + [Linear(flat, 256), ReLU(), Linear(256, 10)]
    return init_params(Network(layers, (in_channels, 28, 28)), seed)


def build_mnist_mlp(in_shape=(1, 28, 28), hidden=1024, seed=0) -> Network:
    """Dense digit classifier (flatten-FC-relu-dropout-FC); the shape the
    input-gradient baseline supports, since its double backward declines
    convolutions."""
    flat = int(np.prod(in_shape))
    layers = [Flatten(), Linear(flat, hidden), ReLU(), Dropout(0.25),
              Linear(hidden, 10)]
    return init_params(Network(layers, in_shape), seed)


def build_compas_mlp(n_features, seed=0) -> Network:
    """Two hidden layers of size 5 with ReLU and 0.1 dropout, two classes."""
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    layers = [
        Linear(n_features, 5), ReLU(), Dropout(0.1),
        Linear(5, 5), ReLU(), Dropout(0.1),
        Linear(5, 2),
    ]
    return init_params(Network(layers, (n_features,)), seed)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path, seed=None, extra=None) -> None:
    header = {
        "format": "cdep-checkpoint",
        "version": 1,
        "input_shape": list(net.input_shape),
        "frozen_prefix": net.frozen_prefix,
        "layers": [layer.spec() for layer in net.layers],
        "seed": seed,
        "extra": extra or {},
    }
    blocks = [p.data for p in net.all_parameters()]
    storage.write_blocks(path, header, blocks)


def load_checkpoint(path):
    """Rebuild a network from a checkpoint; returns (net, header)."""
    header, blocks = storage.read_blocks(path)
    if header.get("format") != "cdep-checkpoint":
        raise storage.ContainerError(f"{path}: not a checkpoint file")
    layers = [_layer_from_spec(spec) for spec in header["layers"]]
    net = Network(layers, tuple(header["input_shape"]),
                  frozen_prefix=header.get("frozen_prefix", 0))
    params = net.all_parameters()
    if len(params) != len(blocks):
        raise storage.ContainerError(
            f"{path}: {len(blocks)} blocks for {len(params)} parameters")
    it = iter(blocks)
    for layer in net.layers:
        if layer.params():
            layer.w = ad.Tensor(next(it), track=True)
            layer.b = ad.Tensor(next(it), track=True)
    return net, header


def _layer_from_spec(spec):
    kind = spec.get("kind")
    if kind == "linear":
        return Linear(spec["in"], spec["out"])
    if kind == "conv2d":
        return Conv2D(spec["c_in"], spec["c_out"], spec["k"])
    if kind == "relu":
        return ReLU()
    if kind == "maxpool2d":
        return MaxPool2D(spec["k"])
    if kind == "dropout":
        return Dropout(spec["p"])
    if kind == "flatten":
        return Flatten()
    raise storage.ContainerError(f"unknown layer kind in checkpoint: {kind!r}")

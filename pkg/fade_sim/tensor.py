# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Dense tensor engine with exact reverse-mode gradients.

Tensors are float32 numpy arrays with a leading batch axis. The layer
vocabulary is fixed (Conv2D, Linear, ReLU, MaxPool2x2, Flatten); layers are
stateless descriptions and read their parameters from a flat
name -> array mapping, so the same stack can run against any copy of the
parameters. Reductions accumulate in float64 and results are cast back to
the input dtype.
"""

from dataclasses import dataclass, field
from typing import ClassVar, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DataError, NumericError, ShapeError, UsageError

Tensor = np.ndarray
FLOAT = np.float32

Shape = Tuple[int, ...]


def check_finite(x: np.ndarray, what: str) -> None:
    """
    Raise NumericError when `x` holds NaN or Inf.

    For batched values the first offending sample index is reported.
    """
    finite = np.isfinite(x)
    if finite.all():
        return
    sample = None
    if x.ndim >= 1 and x.shape[0] > 0:
        bad = ~finite.reshape(x.shape[0], -1).all(axis=1) if x.ndim > 1 else ~finite
        sample = int(np.flatnonzero(bad)[0])
    raise NumericError(f"non-finite {what}", sample=sample)


def _contract(subscripts: str, *operands: np.ndarray) -> np.ndarray:
    return np.einsum(subscripts, *[np.asarray(op, dtype=np.float64) for op in operands], optimize=True)


@dataclass
class Gradients:
    """Gradients of a scalar with respect to stack parameters and stack input."""

    by_parameter: Dict[str, Tensor] = field(default_factory=dict)
    by_input: Optional[Tensor] = None


# ============================================================================
# LAYERS
# ============================================================================

class Layer:
    """
    Base class of the fixed layer vocabulary.

    `name` is the parameter prefix: a Linear layer named "backbone.8" reads
    "backbone.8.weight" and "backbone.8.bias".
    """

    kind: ClassVar[str] = ""

    def __init__(self, name: str = ""):
        self.name = name

    def named(self, name: str) -> "Layer":
        """Return a copy of this layer using a different parameter prefix."""
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.name = name
        return clone

    def param_shapes(self) -> Dict[str, Shape]:
        """Local parameter names ("weight", "bias") mapped to shapes."""
        return {}

    def param_names(self) -> List[str]:
        return [f"{self.name}.{local}" for local in self.param_shapes()]

    def fan_in(self) -> int:
        return 0

    def output_shape(self, input_shape: Shape) -> Shape:
        raise NotImplementedError

    def macs(self, input_shape: Shape) -> int:
        """Multiply-accumulate count for one sample."""
        return 0

    def forward(self, params: Mapping[str, Tensor], x: Tensor):
        raise NotImplementedError

    def backward(self, params: Mapping[str, Tensor], cache, upstream: Tensor, need_params: bool):
        raise NotImplementedError

    def _param(self, params: Mapping[str, Tensor], local: str) -> Tensor:
        full = f"{self.name}.{local}"
        try:
            value = params[full]
        except KeyError:
            raise ShapeError(f"missing parameter {full}") from None
        expected = self.param_shapes()[local]
        if tuple(value.shape) != expected:
            raise ShapeError(f"parameter {full} has shape {tuple(value.shape)}, expected {expected}")
        return value

    def spec(self) -> Dict:
        """Plain-dict description (kind and hyperparameters)."""
        return {"kind": self.kind}

    def __repr__(self) -> str:
        fields = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{self.kind}({fields})"


class Conv2D(Layer):
    """2-D convolution by explicit sliding window; weight [out, in, k, k]."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: int = 0, bias: bool = True, name: str = ""):
        super().__init__(name)
        if min(in_channels, out_channels, kernel, stride) < 1 or padding < 0:
            raise ShapeError(f"invalid Conv2D hyperparameters {in_channels}->{out_channels} k={kernel} "
                             f"s={stride} p={padding}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.bias = bias

    def param_shapes(self) -> Dict[str, Shape]:
        shapes = {"weight": (self.out_channels, self.in_channels, self.kernel, self.kernel)}
        if self.bias:
            shapes["bias"] = (self.out_channels,)
        return shapes

    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"Conv2D expects ({self.in_channels}, H, W), got {input_shape}")
        _, h, w = input_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2D kernel {self.kernel} does not fit input {input_shape}")
        return (self.out_channels, ho, wo)

    def macs(self, input_shape: Shape) -> int:
        _, ho, wo = self.output_shape(input_shape)
        return self.out_channels * self.in_channels * self.kernel * self.kernel * ho * wo

    def _windows(self, ho: int, wo: int):
        k, s = self.kernel, self.stride
        for i in range(k):
            for j in range(k):
                yield i, j, (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))

    def forward(self, params, x):
        weight = self._param(params, "weight")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        _, ho, wo = self.output_shape(x.shape[1:])
        out = np.zeros((x.shape[0], self.out_channels, ho, wo), dtype=np.float64)
        for i, j, window in self._windows(ho, wo):
            out += _contract("bchw,oc->bohw", xp[window], weight[:, :, i, j])
        if self.bias:
            out += self._param(params, "bias").astype(np.float64)[None, :, None, None]
        return out.astype(x.dtype), (xp, x.shape)

    def backward(self, params, cache, upstream, need_params):
        xp, in_shape = cache
        weight = self._param(params, "weight")
        _, _, h, w = in_shape
        ho, wo = upstream.shape[2:]
        dxp = np.zeros(xp.shape, dtype=np.float64)
        dweight = np.zeros(weight.shape, dtype=np.float64) if need_params else None
        for i, j, window in self._windows(ho, wo):
            dxp[window] += _contract("bohw,oc->bchw", upstream, weight[:, :, i, j])
            if need_params:
                dweight[:, :, i, j] = _contract("bohw,bchw->oc", upstream, xp[window])
        p = self.padding
        dx = dxp[:, :, p:p + h, p:p + w].astype(upstream.dtype)
        grads = {}
        if need_params:
            grads[f"{self.name}.weight"] = dweight.astype(weight.dtype)
            if self.bias:
                grads[f"{self.name}.bias"] = upstream.sum(axis=(0, 2, 3), dtype=np.float64).astype(weight.dtype)
        return dx, grads

    def spec(self) -> Dict:
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias}


class Linear(Layer):
    """Affine map logits = z . W + b with W of shape [fan_in, fan_out]."""

    kind = "linear"

    def __init__(self, in_features: int, out_features: int, bias: bool = True, name: str = ""):
        super().__init__(name)
        if in_features < 1 or out_features < 1:
            raise ShapeError(f"invalid Linear size {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias

    def param_shapes(self) -> Dict[str, Shape]:
        shapes = {"weight": (self.in_features, self.out_features)}
        if self.bias:
            shapes["bias"] = (self.out_features,)
        return shapes

    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"Linear expects ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def macs(self, input_shape: Shape) -> int:
        return self.in_features * self.out_features

    def forward(self, params, x):
        weight = self._param(params, "weight")
        out = _contract("bi,io->bo", x, weight)
        if self.bias:
            out += self._param(params, "bias").astype(np.float64)[None, :]
        return out.astype(x.dtype), x

    def backward(self, params, cache, upstream, need_params):
        weight = self._param(params, "weight")
        dx = _contract("bo,io->bi", upstream, weight).astype(upstream.dtype)
        grads = {}
        if need_params:
            grads[f"{self.name}.weight"] = _contract("bi,bo->io", cache, upstream).astype(weight.dtype)
            if self.bias:
                grads[f"{self.name}.bias"] = upstream.sum(axis=0, dtype=np.float64).astype(weight.dtype)
        return dx, grads

    def spec(self) -> Dict:
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features, "bias": self.bias}


class ReLU(Layer):
    """Rectifier; the subgradient at 0 is 0."""

    kind = "relu"

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def forward(self, params, x):
        mask = x > 0
        return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask

    def backward(self, params, cache, upstream, need_params):
        return np.where(cache, upstream, np.zeros((), dtype=upstream.dtype)), {}


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool"

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[1] < 2 or input_shape[2] < 2:
            raise ShapeError(f"MaxPool2x2 expects (C, H>=2, W>=2), got {tuple(input_shape)}")
        c, h, w = input_shape
        return (c, h // 2, w // 2)

    def forward(self, params, x):
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        windows = (x[:, :, :2 * ho, :2 * wo]
                   .reshape(b, c, ho, 2, wo, 2)
                   .transpose(0, 1, 2, 4, 3, 5)
                   .reshape(b, c, ho, wo, 4))
        # argmax returns the first maximum in row-major window order
        arg = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, params, cache, upstream, need_params):
        arg, in_shape = cache
        b, c, h, w = in_shape
        ho, wo = h // 2, w // 2
        routed = np.zeros((b, c, ho, wo, 4), dtype=upstream.dtype)
        np.put_along_axis(routed, arg[..., None], upstream[..., None], axis=-1)
        dx = np.zeros(in_shape, dtype=upstream.dtype)
        dx[:, :, :2 * ho, :2 * wo] = (routed.reshape(b, c, ho, wo, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(b, c, 2 * ho, 2 * wo))
        return dx, {}


class Flatten(Layer):
    """Collapse all non-batch axes."""

    kind = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, upstream, need_params):
        return upstream.reshape(cache), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, Linear, ReLU, MaxPool2x2, Flatten)}


def layer_from_spec(spec: Mapping, name: str = "") -> Layer:
    """Build a layer from its plain-dict description (inverse of `Layer.spec`)."""
    kind = spec.get("kind")
    if kind == "conv":
        return Conv2D(int(spec["in"]), int(spec["out"]), int(spec.get("kernel", 3)), int(spec.get("stride", 1)),
                      int(spec.get("padding", 0)), bool(spec.get("bias", True)), name=name)
    if kind == "linear":
        return Linear(int(spec["in"]), int(spec["out"]), bool(spec.get("bias", True)), name=name)
    if kind in LAYER_KINDS:
        return LAYER_KINDS[kind](name=name)
    raise ShapeError(f"unknown layer kind {kind!r}")


# ============================================================================
# STACKS
# ============================================================================

class Sequential:
    """
    An ordered layer stack with a declared input shape.

    `forward` caches the activations of the last call on this instance;
    independent instances can be evaluated concurrently.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        self.shapes = shapes
        self._caches = None

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def param_names(self) -> List[str]:
        return [name for layer in self.layers for name in layer.param_names()]

    def param_shapes(self) -> Dict[str, Shape]:
        return {f"{layer.name}.{local}": shape for layer in self.layers for local, shape in layer.param_shapes().items()}

    def macs(self) -> int:
        return sum(layer.macs(shape) for layer, shape in zip(self.layers, self.shapes))

    def then(self, other: "Sequential") -> "Sequential":
        """Concatenate two stacks."""
        if other.input_shape != self.output_shape:
            raise ShapeError(f"cannot compose {self.output_shape} into {other.input_shape}")
        return Sequential(self.layers + other.layers, self.input_shape)

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        """
        Run the stack on a batch.

        Args:
            params: Parameter mapping containing every name this stack reads
            x: Batch of shape [B, *input_shape]

        Returns:
            Output batch of shape [B, *output_shape]

        Raises:
            NumericError: the output holds NaN or Inf (first sample index attached)
        """
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {tuple(x.shape[1:])} does not match stack input {self.input_shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            caches.append(cache)
        self._caches = caches
        check_finite(x, "stack output")
        return x

    def backward(self, params: Mapping[str, Tensor], upstream: Tensor, need_params: bool = True) -> Gradients:
        """
        Propagate `upstream` (d scalar / d output) back through the last forward.

        Args:
            params: The same parameters used in forward
            upstream: Gradient with respect to the stack output
            need_params: Skip parameter gradients when only the input gradient is needed

        Returns:
            Gradients by parameter name and by stack input
        """
        if self._caches is None:
            raise UsageError("backward called before forward on this stack")
        if tuple(upstream.shape[1:]) != self.output_shape:
            raise ShapeError(f"upstream shape {tuple(upstream.shape[1:])} does not match output {self.output_shape}")
        grads: Dict[str, Tensor] = {}
        g = upstream
        for layer, cache in zip(reversed(self.layers), reversed(self._caches)):
            g, layer_grads = layer.backward(params, cache, g, need_params)
            grads.update(layer_grads)
        return Gradients(by_parameter=grads, by_input=g)

    def branch_signature(self) -> Tuple[np.ndarray, ...]:
        """
        ReLU masks and pooling argmaxes of the last forward.

        Two inputs with equal signatures lie in the same smooth piece of the
        stack; gradient checks compare signatures to skip kinks.
        """
        if self._caches is None:
            raise UsageError("branch_signature called before forward")
        parts = []
        for layer, cache in zip(self.layers, self._caches):
            if isinstance(layer, ReLU):
                parts.append(cache.copy())
            elif isinstance(layer, MaxPool2x2):
                parts.append(cache[0].copy())
        return tuple(parts)


# ============================================================================
# LOSS
# ============================================================================

def softmax(logits: Tensor) -> np.ndarray:
    """Row-wise softmax in float64 with max subtraction."""
    shifted = np.asarray(logits, dtype=np.float64)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def per_sample_cross_entropy(logits: Tensor, labels) -> Tuple[np.ndarray, Tensor]:
    """
    Cross-entropy of every row of a logits batch.

    Args:
        logits: [B, K] logits
        labels: B class indices in [0, K)

    Returns:
        (losses [B] in float64, d loss_i / d logits_i [B, K] in the logits dtype)
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True).astype(np.float64)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return losses, grad.astype(logits.dtype)


def softmax_cross_entropy(logits: Tensor, label) -> Tuple[float, Tensor]:
    """
    Mean softmax cross-entropy and its gradient.

    Accepts a single length-K logits vector with one label, or a [B, K] batch
    with B labels (loss and gradient then refer to the batch mean).
    """
    if logits.ndim == 1:
        losses, grad = per_sample_cross_entropy(logits[None, :], [label])
        return float(losses[0]), grad[0]
    losses, grad = per_sample_cross_entropy(logits, label)
    b = max(logits.shape[0], 1)
    return float(losses.mean()) if losses.size else 0.0, (grad / b).astype(logits.dtype)

# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Backbone networks, module partitions and auxiliary heads.

A `FadeModel` owns one backbone and any number of partition schemes over it
("joint", "2-module", "3-module", ...). Backbone parameters are shared by all
schemes; every non-final module of a scheme has its own auxiliary head.
Parameter names:

    backbone.<layer index>.weight / .bias
    head.<scheme>.<module index>.weight / .bias
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .exceptions import CheckpointError, ConfigError, ShapeError
from .tensor import (
    FLOAT,
    Flatten,
    Gradients,
    Layer,
    Linear,
    MaxPool2x2,
    Sequential,
    Tensor,
    layer_from_spec,
    per_sample_cross_entropy,
)
from .utils import stream

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FADE"
CHECKPOINT_VERSION = 1

AUX_HEADS = ("pool-linear", "linear")


# ============================================================================
# BACKBONE SPECS
# ============================================================================

@dataclass
class BackboneSpec:
    """Ordered layer descriptions of a backbone ending in K logits."""

    name: str
    input_shape: Tuple[int, ...]
    num_classes: int
    layers: List[Dict]

    def build_layers(self) -> List[Layer]:
        return [layer_from_spec(spec, name=f"backbone.{i}") for i, spec in enumerate(self.layers)]

    def stack(self) -> Sequential:
        """Validated full backbone stack."""
        stack = Sequential(self.build_layers(), self.input_shape)
        if stack.output_shape != (self.num_classes,):
            raise ShapeError(f"backbone {self.name} outputs {stack.output_shape}, expected ({self.num_classes},)")
        return stack


def cnn_small(input_shape: Sequence[int], num_classes: int) -> BackboneSpec:
    """Small CNN: convs c->8->16, 2x2 pool, conv ->16, then Linear ->64 ->K."""
    c, h, w = input_shape
    flat = 16 * (h // 2) * (w // 2)
    layers = [
        {"kind": "conv", "in": c, "out": 8, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "relu"},
        {"kind": "conv", "in": 8, "out": 16, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "relu"},
        {"kind": "maxpool"},
        {"kind": "conv", "in": 16, "out": 16, "kernel": 3, "stride": 1, "padding": 1},
        {"kind": "relu"},
        {"kind": "flatten"},
        {"kind": "linear", "in": flat, "out": 64},
        {"kind": "relu"},
        {"kind": "linear", "in": 64, "out": num_classes},
    ]
    return BackboneSpec("cnn-small", tuple(input_shape), num_classes, layers)


def mlp_tiny(input_shape: Sequence[int], num_classes: int) -> BackboneSpec:
    """Flatten -> Linear 32 -> ReLU -> Linear K."""
    flat = int(np.prod(input_shape))
    layers = [
        {"kind": "flatten"},
        {"kind": "linear", "in": flat, "out": 32},
        {"kind": "relu"},
        {"kind": "linear", "in": 32, "out": num_classes},
    ]
    return BackboneSpec("mlp-tiny", tuple(input_shape), num_classes, layers)


PRESETS = {"cnn-small": cnn_small, "mlp-tiny": mlp_tiny}

# Default cut points per preset and scheme name
PRESET_CUTS = {
    "cnn-small": {"joint": (), "2-module": (4,), "3-module": (2, 4)},
    "mlp-tiny": {"joint": (), "2-module": (3,)},
}


def parse_layers(text: str, input_shape: Sequence[int], num_classes: int) -> BackboneSpec:
    """
    Parse a custom backbone description.

    Tokens are comma separated: `conv:OUT[:KERNEL[:STRIDE[:PADDING]]]`,
    `linear[:OUT]`, `relu`, `maxpool`, `flatten`. Input sizes are inferred;
    a trailing `linear` without OUT maps to the K logits.
    """
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if not tokens:
        raise ConfigError("custom backbone has no layers")
    shape = tuple(input_shape)
    layers: List[Dict] = []
    for position, token in enumerate(tokens):
        kind, *args = token.split(":")
        try:
            values = [int(a) for a in args]
        except ValueError:
            raise ConfigError(f"bad layer token {token!r}") from None
        if kind == "conv":
            if not values or len(shape) != 3:
                raise ConfigError(f"bad conv token {token!r} for input {shape}")
            kernel, stride, padding = (values[1:] + [3, 1, 0][len(values) - 1:])[:3]
            spec = {"kind": "conv", "in": shape[0], "out": values[0], "kernel": kernel,
                    "stride": stride, "padding": padding}
        elif kind == "linear":
            if len(shape) != 1:
                raise ConfigError(f"linear layer {position} needs flat input, got {shape}")
            out = values[0] if values else num_classes
            spec = {"kind": "linear", "in": shape[0], "out": out}
        elif kind in ("relu", "maxpool", "flatten") and not values:
            spec = {"kind": kind}
        else:
            raise ConfigError(f"unknown layer token {token!r}")
        layers.append(spec)
        shape = tuple(layer_from_spec(spec).output_shape(shape))
    backbone = BackboneSpec("custom", tuple(input_shape), num_classes, layers)
    backbone.stack()
    return backbone


# ============================================================================
# PARTITIONS AND MODULES
# ============================================================================

@dataclass(frozen=True)
class Partition:
    """Cut points splitting the backbone into `count` non-overlapping modules."""

    name: str
    cuts: Tuple[int, ...] = ()
    aux_head: str = "pool-linear"

    @property
    def count(self) -> int:
        return len(self.cuts) + 1

    def validate(self, n_layers: int) -> None:
        previous = 0
        for cut in self.cuts:
            if cut <= previous or cut >= n_layers:
                raise ConfigError(f"partition {self.name}: cut points {list(self.cuts)} must be strictly "
                                  f"increasing inside (0, {n_layers})")
            previous = cut
        if self.aux_head not in AUX_HEADS:
            raise ConfigError(f"partition {self.name}: unknown auxiliary head {self.aux_head!r}")

    def bounds(self, n_layers: int) -> List[Tuple[int, int]]:
        edges = (0,) + tuple(self.cuts) + (n_layers,)
        return list(zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class ModuleRef:
    """Module `index` (1-based) of `count` in partition scheme `scheme`."""

    scheme: str
    index: int
    count: int

    @property
    def is_last(self) -> bool:
        return self.index == self.count

    @property
    def label(self) -> str:
        return f"{self.scheme}/{self.index}"


class ModuleNet:
    """
    Backbone slice of a module plus its early-exit head.

    The final module has no auxiliary head: its body already ends in the
    backbone's own logits.
    """

    def __init__(self, ref: ModuleRef, body: Sequential, head: Optional[Sequential]):
        self.ref = ref
        self.body = body
        self.head = head

    @property
    def input_shape(self):
        return self.body.input_shape

    def backbone_names(self) -> List[str]:
        return self.body.param_names()

    def head_names(self) -> List[str]:
        return self.head.param_names() if self.head is not None else []

    def param_names(self) -> List[str]:
        return self.backbone_names() + self.head_names()

    def clone(self) -> "ModuleNet":
        """Same structure with fresh activation caches."""
        head = Sequential(self.head.layers, self.head.input_shape) if self.head is not None else None
        return ModuleNet(self.ref, Sequential(self.body.layers, self.body.input_shape), head)

    def logits(self, params: Mapping[str, Tensor], z: Tensor) -> Tuple[Tensor, Tensor]:
        z_out = self.body.forward(params, z)
        logits = self.head.forward(params, z_out) if self.head is not None else z_out
        return z_out, logits

    def loss(self, params: Mapping[str, Tensor], z: Tensor, labels) -> Tuple[np.ndarray, Tensor]:
        """Per-sample early-exit losses and the module output."""
        z_out, logits = self.logits(params, z)
        losses, _ = per_sample_cross_entropy(logits, labels)
        return losses, z_out

    def loss_and_grads(self, params: Mapping[str, Tensor], z: Tensor, labels,
                       need_params: bool = True, reduction: str = "mean") -> Tuple[np.ndarray, Tensor, Gradients]:
        """
        Early-exit losses with gradients.

        Args:
            params: Parameter mapping
            z: Module input batch
            labels: Class indices
            need_params: Compute parameter gradients
            reduction: "mean" differentiates the batch-mean loss, "sum" gives
                every sample the gradient of its own loss

        Returns:
            (per-sample losses, module output, gradients)
        """
        z_out, logits = self.logits(params, z)
        losses, grad_logits = per_sample_cross_entropy(logits, labels)
        if reduction == "mean":
            grad_logits = (grad_logits / max(len(losses), 1)).astype(grad_logits.dtype)
        grads: Dict[str, Tensor] = {}
        upstream = grad_logits
        if self.head is not None:
            head_grads = self.head.backward(params, grad_logits, need_params)
            grads.update(head_grads.by_parameter)
            upstream = head_grads.by_input
        body_grads = self.body.backward(params, upstream, need_params)
        grads.update(body_grads.by_parameter)
        return losses, z_out, Gradients(by_parameter=grads, by_input=body_grads.by_input)

    def loss_and_input_grad(self, params: Mapping[str, Tensor], z: Tensor, labels) -> Tuple[np.ndarray, Tensor]:
        losses, _, grads = self.loss_and_grads(params, z, labels, need_params=False, reduction="sum")
        return losses, grads.by_input


@dataclass(eq=False)
class ModuleParams:
    """
    Parameters Θ_m = (w_m, θ_m) of one module.

    `head` is None for the last module of a scheme. The bound `net` gives the
    structure; it is not part of the value.
    """

    ref: ModuleRef
    net: ModuleNet = field(repr=False, compare=False)
    backbone: Dict[str, Tensor]
    head: Optional[Dict[str, Tensor]] = None

    def as_dict(self) -> Dict[str, Tensor]:
        merged = dict(self.backbone)
        if self.head:
            merged.update(self.head)
        return merged

    def names(self) -> List[str]:
        return list(self.backbone) + (list(self.head) if self.head else [])

    def num_params(self) -> int:
        return int(sum(a.size for a in self.as_dict().values()))

    def copy(self) -> "ModuleParams":
        head = {k: v.copy() for k, v in self.head.items()} if self.head is not None else None
        return ModuleParams(self.ref, self.net.clone(), {k: v.copy() for k, v in self.backbone.items()}, head)

    def to_vector(self) -> np.ndarray:
        """Flatten every tensor in declaration order into one float32 vector."""
        parts = [self.as_dict()[name].astype(FLOAT).ravel() for name in self.names()]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=FLOAT)

    def from_vector(self, vector: np.ndarray) -> "ModuleParams":
        """Inverse of `to_vector` using this value's shapes."""
        vector = np.asarray(vector, dtype=FLOAT)
        if vector.size != self.num_params():
            raise ShapeError(f"vector of {vector.size} values for module with {self.num_params()} parameters")
        offset = 0
        restored: Dict[str, Tensor] = {}
        for name in self.names():
            shape = self.as_dict()[name].shape
            size = int(np.prod(shape))
            restored[name] = vector[offset:offset + size].reshape(shape).copy()
            offset += size
        backbone = {k: restored[k] for k in self.backbone}
        head = {k: restored[k] for k in self.head} if self.head is not None else None
        return ModuleParams(self.ref, self.net.clone(), backbone, head)

    def loss_and_input_grad(self, z: Tensor, labels) -> Tuple[np.ndarray, Tensor]:
        return self.net.loss_and_input_grad(self.as_dict(), z, labels)


def module_forward_loss(m: ModuleParams, z_in: Tensor, labels) -> Tuple[float, Tensor]:
    """
    Early-exit loss of a module.

    Returns:
        (batch-mean loss through the auxiliary head, or through the backbone
        head for the last module; module output z_out)
    """
    losses, z_out = m.net.loss(m.as_dict(), z_in, labels)
    return float(losses.mean()) if losses.size else 0.0, z_out


# ============================================================================
# FULL MODEL
# ============================================================================

class FadeModel:
    """Backbone, partition schemes and the flat parameter dictionary."""

    def __init__(self, spec: BackboneSpec, partitions: Mapping[str, Partition], params: Dict[str, Tensor]):
        self._set_structure(spec, partitions)
        self.params = params
        missing = [name for name in self.param_shapes() if name not in params]
        if missing:
            raise ShapeError(f"missing parameters: {', '.join(missing[:5])}")

    @classmethod
    def build(cls, spec: BackboneSpec, partitions: Mapping[str, Partition], seed: int) -> "FadeModel":
        """
        Initialize every parameter with fan-in scaled uniform values.

        Each tensor draws from its own named stream, so layers shared by two
        partitions get identical values for the same seed.
        """
        model = cls.__new__(cls)
        model._set_structure(spec, partitions)
        fan_ins = {}
        for layer in model.layers + [l for head in model._heads.values() for l in head.layers]:
            for name in layer.param_names():
                fan_ins[name] = layer.fan_in()
        params = {}
        for name, shape in model.param_shapes().items():
            bound = float(np.sqrt(1.0 / fan_ins[name]))
            params[name] = stream(seed, f"init/{name}").uniform(-bound, bound, size=shape).astype(FLOAT)
        model.params = params
        return model

    def _set_structure(self, spec: BackboneSpec, partitions: Mapping[str, Partition]) -> None:
        self.spec = spec
        self.layers = spec.build_layers()
        self.backbone = spec.stack()
        self.partitions = dict(partitions)
        if not self.partitions:
            raise ConfigError("at least one partition scheme is required")
        for partition in self.partitions.values():
            partition.validate(len(self.layers))
        self._heads = self._build_heads()

    def _build_heads(self) -> Dict[ModuleRef, Sequential]:
        heads = {}
        for scheme, partition in self.partitions.items():
            bounds = partition.bounds(len(self.layers))
            for index, (_, end) in enumerate(bounds[:-1], start=1):
                ref = ModuleRef(scheme, index, partition.count)
                feature_shape = self.backbone.shapes[end]
                prefix = f"head.{scheme}.{index}"
                layers: List[Layer] = []
                if partition.aux_head == "pool-linear" and len(feature_shape) == 3 \
                        and feature_shape[1] >= 2 and feature_shape[2] >= 2:
                    layers.append(MaxPool2x2(name=prefix))
                layers.append(Flatten(name=prefix))
                pooled = Sequential(layers, feature_shape).output_shape
                layers.append(Linear(pooled[0], self.spec.num_classes, name=prefix))
                heads[ref] = Sequential(layers, feature_shape)
        return heads

    # -- structure ------------------------------------------------------------

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """All parameter shapes: backbone first, then heads by scheme and index."""
        shapes = dict(self.backbone.param_shapes())
        for ref in self.module_refs():
            if ref in self._heads:
                shapes.update(self._heads[ref].param_shapes())
        return shapes

    def module_refs(self) -> List[ModuleRef]:
        return [ModuleRef(scheme, index, partition.count)
                for scheme, partition in self.partitions.items()
                for index in range(1, partition.count + 1)]

    def ref(self, scheme: str, index: int) -> ModuleRef:
        if scheme not in self.partitions:
            raise ConfigError(f"unknown partition scheme {scheme!r}")
        count = self.partitions[scheme].count
        if not 1 <= index <= count:
            raise ConfigError(f"scheme {scheme} has modules 1..{count}, got {index}")
        return ModuleRef(scheme, index, count)

    def bounds(self, ref: ModuleRef) -> Tuple[int, int]:
        return self.partitions[ref.scheme].bounds(len(self.layers))[ref.index - 1]

    def upstream_stack(self, ref: ModuleRef) -> Sequential:
        start, _ = self.bounds(ref)
        return Sequential(self.layers[:start], self.spec.input_shape)

    def upstream_names(self, ref: ModuleRef) -> List[str]:
        return self.upstream_stack(ref).param_names()

    def module_net(self, ref: ModuleRef) -> ModuleNet:
        start, end = self.bounds(ref)
        body = Sequential(self.layers[start:end], self.backbone.shapes[start])
        head = self._heads.get(ref)
        head = Sequential(head.layers, head.input_shape) if head is not None else None
        return ModuleNet(ref, body, head)

    def joint_net(self) -> ModuleNet:
        """The whole backbone as a single module ending in its own logits."""
        return ModuleNet(ModuleRef("backbone", 1, 1), Sequential(self.layers, self.spec.input_shape), None)

    def module_params(self, ref: ModuleRef) -> ModuleParams:
        """Copy of Θ_m for one module."""
        net = self.module_net(ref)
        backbone = {name: self.params[name].copy() for name in net.backbone_names()}
        head = {name: self.params[name].copy() for name in net.head_names()} if net.head is not None else None
        return ModuleParams(ref, net, backbone, head)

    def copy(self) -> "FadeModel":
        return FadeModel(self.spec, self.partitions, {k: v.copy() for k, v in self.params.items()})

    # -- inference ------------------------------------------------------------

    def features(self, ref: ModuleRef, x: Tensor, batch_size: int = 256) -> Tensor:
        """Frozen forward pass through the modules upstream of `ref` (z_{m-1})."""
        stack = self.upstream_stack(ref)
        if not stack.layers:
            return x
        chunks = [stack.forward(self.params, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        if not chunks:
            return np.zeros((0,) + stack.output_shape, dtype=x.dtype)
        return np.concatenate(chunks, axis=0)

    def predict(self, x: Tensor, batch_size: int = 256) -> np.ndarray:
        """Joint-model class predictions."""
        stack = self.backbone
        out = [stack.forward(self.params, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build(spec: BackboneSpec, partition: Partition, seed: int) -> List[ModuleParams]:
    """Initialize a backbone under one partition and return Θ_1..Θ_M."""
    model = FadeModel.build(spec, {partition.name: partition}, seed)
    return [model.module_params(ref) for ref in model.module_refs()]


# ============================================================================
# PROFILE
# ============================================================================

@dataclass
class ModuleProfile:
    """Analytic size and compute of one module."""

    module: str
    backbone_params: int
    head_params: int
    backbone_macs: int
    head_macs: int

    @property
    def params(self) -> int:
        return self.backbone_params + self.head_params

    @property
    def macs(self) -> int:
        return self.backbone_macs + self.head_macs


def profile(spec: BackboneSpec, partition: Partition) -> List[ModuleProfile]:
    """
    Exact per-module parameter counts and multiply-accumulate counts.

    MACs are per sample for one forward pass.
    """
    model = FadeModel.__new__(FadeModel)
    model._set_structure(spec, {partition.name: partition})
    rows = []
    for ref in model.module_refs():
        net = model.module_net(ref)
        head_params = sum(int(np.prod(s)) for s in net.head.param_shapes().values()) if net.head else 0
        rows.append(ModuleProfile(
            module=ref.label,
            backbone_params=sum(int(np.prod(s)) for s in net.body.param_shapes().values()),
            head_params=head_params,
            backbone_macs=net.body.macs(),
            head_macs=net.head.macs() if net.head else 0,
        ))
    return rows


def profile_table(spec: BackboneSpec, partitions: Mapping[str, Partition]) -> pd.DataFrame:
    """Profiles of every scheme as shares of the joint backbone."""
    joint = spec.stack()
    joint_params = sum(int(np.prod(s)) for s in joint.param_shapes().values())
    joint_macs = joint.macs()
    rows = []
    for partition in partitions.values():
        for p in profile(spec, partition):
            rows.append({
                "module": p.module,
                "backbone_params": p.backbone_params,
                "head_params": p.head_params,
                "params": p.params,
                "macs": p.macs,
                "param_share": p.params / joint_params if joint_params else 0.0,
                "mac_share": p.macs / joint_macs if joint_macs else 0.0,
            })
    return pd.DataFrame(rows)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def encode_checkpoint(model: FadeModel) -> bytes:
    """Serialize every parameter tensor in declaration order."""
    names = list(model.param_shapes())
    header = [struct.pack("<4sIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(model.module_refs()), len(names))]
    payload = []
    for name in names:
        array = model.params[name]
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)) + encoded)
        header.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        payload.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(header + payload)


def decode_checkpoint(data: bytes, template: FadeModel, path: str = "<bytes>") -> FadeModel:
    """
    Read parameters against a model declaring the expected partition.

    Raises:
        CheckpointError: bad magic, unknown version, truncation or any
            name/shape/module-count mismatch with `template`
    """
    offset = 0

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise CheckpointError(path, f"truncated header at byte {offset}")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    magic, version, module_count, tensor_count = take("<4sIII")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(path, f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(path, f"unsupported format version {version}")
    expected_shapes = template.param_shapes()
    if module_count != len(template.module_refs()):
        raise CheckpointError(path, f"checkpoint has {module_count} modules, partition declares "
                                    f"{len(template.module_refs())}")
    if tensor_count != len(expected_shapes):
        raise CheckpointError(path, f"checkpoint has {tensor_count} tensors, model declares {len(expected_shapes)}")
    table = []
    for _ in range(tensor_count):
        (name_len,) = take("<H")
        if offset + name_len > len(data):
            raise CheckpointError(path, f"truncated tensor name at byte {offset}")
        name = data[offset:offset + name_len].decode("utf-8", errors="replace")
        offset += name_len
        (ndim,) = take("<B")
        dims = take(f"<{ndim}I") if ndim else ()
        if name not in expected_shapes:
            raise CheckpointError(path, f"unexpected tensor {name}")
        if tuple(dims) != tuple(expected_shapes[name]):
            raise CheckpointError(path, f"tensor {name} has shape {tuple(dims)}, expected {expected_shapes[name]}")
        table.append((name, tuple(dims)))
    params = {}
    for name, dims in table:
        size = int(np.prod(dims)) * 4
        if offset + size > len(data):
            raise CheckpointError(path, f"payload of {name} truncated: expected {size} bytes, "
                                        f"found {len(data) - offset}")
        params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=offset).astype(FLOAT).reshape(dims)
        offset += size
    if offset != len(data):
        raise CheckpointError(path, f"{len(data) - offset} trailing bytes")
    return FadeModel(template.spec, template.partitions, params)


def save_checkpoint(path: str, model: FadeModel) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(model))
    logger.info(f"Checkpoint written: {path}")


def load_checkpoint(path: str, template: FadeModel) -> FadeModel:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(path, f"cannot read checkpoint: {e}") from None
    return decode_checkpoint(data, template, path)

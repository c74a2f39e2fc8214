"""Declarative layer graphs: VGG19, the desk-scale VGG-mini, and the MLP baseline.

A model is a static, ordered list of layer specs plus a named parameter
store. Shapes are chain-checked at build time, before any parameter is
allocated, so a geometrically impossible configuration never produces a
half-built model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops, tensor
from .errors import ArgumentError, GeometryError, ShapeError, StateError
from .ops import ConvParams, PoolSpec
from .tensor import Rng, Tensor

VGG19_BLOCKS = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))
VGG_MINI_WIDTHS = (8, 16, 32)
VGG_MINI_HEAD = 64
DROPOUT_RATE = 0.5


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model graph; geometry fields are meaningful per kind."""

    kind: str                 # conv | relu | maxpool | flatten | dense | dropout
    name: str = ""            # parameter-bearing layers carry a stable unique name
    filters: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    width: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("conv", "relu", "maxpool", "flatten", "dense", "dropout"):
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.filters < 1 or self.kernel_size < 1 or not self.name):
            raise ArgumentError(f"conv layer needs positive filters/kernel_size and a name: {self}")
        if self.kind == "dense" and (self.width < 1 or not self.name):
            raise ArgumentError(f"dense layer needs a positive width and a name: {self}")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise ArgumentError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_shape: tuple[int, int, int]     # (C, H, W)
    num_classes: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ArgumentError(f"num_classes must be >= 2, got {self.num_classes}")
        self.feature_shapes()  # chain-check now, before anything is allocated

    def feature_shapes(self) -> list[tuple[int, ...]]:
        """Static shape chain: the feature shape after each layer (no batch dim)."""
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        names = set()
        for spec in self.layers:
            if spec.name:
                if spec.name in names:
                    raise ArgumentError(f"duplicate layer name {spec.name!r}")
                names.add(spec.name)
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise GeometryError(f"conv layer {spec.name!r} after flatten")
                c, h, w = shape
                oh = ops._out_extent(h, spec.kernel_size, spec.stride, spec.padding, spec.name)
                ow = ops._out_extent(w, spec.kernel_size, spec.stride, spec.padding, spec.name)
                shape = (spec.filters, oh, ow)
            elif spec.kind == "maxpool":
                if len(shape) != 3:
                    raise GeometryError("maxpool after flatten")
                c, h, w = shape
                oh = ops._out_extent(h, spec.kernel_size or 2, spec.stride, 0, "maxpool")
                ow = ops._out_extent(w, spec.kernel_size or 2, spec.stride, 0, "maxpool")
                shape = (c, oh, ow)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise GeometryError(f"dense layer {spec.name!r} needs flattened input, got {shape}")
                shape = (spec.width,)
            # relu / dropout preserve shape
            shapes.append(shape)
        if not self.layers or self.layers[-1].kind != "dense":
            raise GeometryError("model must end with a dense layer")
        if shapes[-1] != (self.num_classes,):
            raise GeometryError(f"final dense width {shapes[-1]} != num_classes {self.num_classes}")
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered parameter name -> shape map implied by the layer chain."""
        out: dict[str, tuple[int, ...]] = {}
        shape: tuple[int, ...] = self.input_shape
        for spec, after in zip(self.layers, self.feature_shapes()):
            if spec.kind == "conv":
                out[f"{spec.name}.kernel"] = (spec.filters, shape[0], spec.kernel_size, spec.kernel_size)
                out[f"{spec.name}.bias"] = (spec.filters,)
            elif spec.kind == "dense":
                out[f"{spec.name}.weight"] = (shape[0], spec.width)
                out[f"{spec.name}.bias"] = (spec.width,)
            shape = after
        return out

    def to_json(self) -> str:
        payload = {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(l) for l in self.layers],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        raw = json.loads(text)
        layers = tuple(LayerSpec(**l) for l in raw["layers"])
        return ModelConfig(
            name=raw["name"],
            input_shape=tuple(raw["input_shape"]),
            num_classes=int(raw["num_classes"]),
            layers=layers,
        )


class ParamStore:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: Tensor) -> None:
        if name in self._tensors:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        self._tensors[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name not in self._tensors:
            raise ArgumentError(f"unknown parameter {name!r}")
        if value.shape != self._tensors[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {value.shape} != {self._tensors[name].shape}")
        self._tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()


@dataclass
class Model:
    config: ModelConfig
    params: ParamStore
    mode: str = "train"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self


def _allocate(config: ModelConfig) -> Model:
    store = ParamStore()
    for name, shape in config.param_shapes().items():
        store.add(name, tensor.zeros(shape))
    return Model(config=config, params=store)


def param_count(model: Model) -> int:
    return sum(int(np.prod(t.shape)) for _, t in model.params.items())


# -- builders -----------------------------------------------------------------


def build_vgg19(num_classes: int, in_channels: int = 1) -> Model:
    """Standard 19-weight-layer VGG: 16 conv + 3 dense, 5 pools, 224x224 input."""
    if in_channels not in (1, 3):
        raise ArgumentError(f"in_channels must be 1 or 3, got {in_channels}")
    layers: list[LayerSpec] = []
    for block, (filters, repeats) in enumerate(VGG19_BLOCKS, start=1):
        for i in range(1, repeats + 1):
            layers.append(LayerSpec("conv", name=f"conv{block}_{i}", filters=filters,
                                    kernel_size=3, stride=1, padding=1))
            layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool", kernel_size=2, stride=2))
    layers.append(LayerSpec("flatten"))
    for i, width in enumerate((4096, 4096), start=1):
        layers.append(LayerSpec("dense", name=f"fc{i}", width=width))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("dropout", rate=DROPOUT_RATE))
    layers.append(LayerSpec("dense", name="fc3", width=num_classes))
    config = ModelConfig("vgg19", (in_channels, 224, 224), num_classes, tuple(layers))
    return _allocate(config)


def build_vgg_mini(num_classes: int, in_channels: int = 1, input_hw: int = 32) -> Model:
    """Three conv/pool blocks with widths (8, 16, 32) and a 64-wide dense head."""
    pools = len(VGG_MINI_WIDTHS)
    if input_hw < 1 or input_hw % (2 ** pools) != 0:
        raise GeometryError(f"input_hw must be a positive multiple of {2 ** pools}, got {input_hw}")
    layers: list[LayerSpec] = []
    for i, filters in enumerate(VGG_MINI_WIDTHS, start=1):
        layers.append(LayerSpec("conv", name=f"conv{i}", filters=filters,
                                kernel_size=3, stride=1, padding=1))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool", kernel_size=2, stride=2))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", name="fc1", width=VGG_MINI_HEAD))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", name="fc2", width=num_classes))
    config = ModelConfig("vgg-mini", (in_channels, input_hw, input_hw), num_classes, tuple(layers))
    return _allocate(config)


def build_mlp(num_classes: int, in_dim: int, hidden_widths: tuple[int, ...] = (),
              input_shape: tuple[int, int, int] | None = None) -> Model:
    if in_dim < 1 or any(w < 1 for w in hidden_widths):
        raise ArgumentError(f"in_dim and hidden widths must be positive: {in_dim}, {hidden_widths}")
    if input_shape is None:
        input_shape = (1, 1, in_dim)
    if int(np.prod(input_shape)) != in_dim:
        raise ArgumentError(f"input_shape {input_shape} does not flatten to in_dim {in_dim}")
    layers: list[LayerSpec] = [LayerSpec("flatten")]
    for i, width in enumerate(hidden_widths, start=1):
        layers.append(LayerSpec("dense", name=f"dense{i}", width=width))
        layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", name=f"dense{len(hidden_widths) + 1}", width=num_classes))
    config = ModelConfig("mlp", input_shape, num_classes, tuple(layers))
    return _allocate(config)


# -- initialization --------------------------------------------------------------

INIT_SCHEMES = ("he_normal", "xavier_uniform")


def init_params(model: Model, rng: Rng, scheme: str = "he_normal") -> None:
    """Draw kernels/weights per scheme, zero the biases. Deterministic given the seed."""
    if scheme not in INIT_SCHEMES:
        raise ArgumentError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    for name, t in model.params.items():
        if name.endswith(".bias"):
            model.params[name] = tensor.zeros(t.shape, dtype=t.dtype)
            continue
        shape = t.shape
        if len(shape) == 4:     # conv kernel [F, C, kh, kw]
            fan_in = shape[1] * shape[2] * shape[3]
            fan_out = shape[0] * shape[2] * shape[3]
        else:                   # dense weight [d_in, d_out]
            fan_in, fan_out = shape[0], shape[1]
        if scheme == "he_normal":
            std = float(np.sqrt(2.0 / fan_in))
            model.params[name] = tensor.rng_normal(rng, shape, 0.0, std, dtype=t.dtype)
        else:
            limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
            model.params[name] = tensor.rng_uniform(rng, shape, -limit, limit, dtype=t.dtype)


# -- whole-model forward / backward ------------------------------------------------


@dataclass
class _LayerRecord:
    spec: LayerSpec
    cache: object


def forward(model: Model, x: Tensor, rng: Rng | None = None) -> tuple[Tensor, list[_LayerRecord]]:
    """Run the layer chain; returns logits [N, c] and the caches backward consumes."""
    if x.ndim != 4 or x.shape[1:] != model.config.input_shape:
        raise ShapeError(
            f"input shape {x.shape} does not match [N, {', '.join(map(str, model.config.input_shape))}]"
        )
    training = model.mode == "train"
    records: list[_LayerRecord] = []
    cur = x
    for spec in model.config.layers:
        if spec.kind == "conv":
            p = ConvParams(kernel=model.params[f"{spec.name}.kernel"],
                           bias=model.params[f"{spec.name}.bias"],
                           stride=spec.stride, padding=spec.padding)
            cur, cache = ops.conv2d_forward(cur, p)
        elif spec.kind == "relu":
            cur, cache = ops.relu_forward(cur)
        elif spec.kind == "maxpool":
            cur, cache = ops.maxpool2d_forward(cur, PoolSpec((spec.kernel_size or 2,) * 2, spec.stride))
        elif spec.kind == "flatten":
            cache = cur.shape
            cur = Tensor(cur.array.reshape(cur.shape[0], -1))
        elif spec.kind == "dense":
            cur, cache = ops.dense_forward(cur, model.params[f"{spec.name}.weight"],
                                           model.params[f"{spec.name}.bias"])
        else:  # dropout
            cur, cache = ops.dropout_forward(cur, spec.rate, rng, training)
        records.append(_LayerRecord(spec, cache))
    return cur, records


def backward(model: Model, records: list[_LayerRecord], grad_logits: Tensor) -> ParamStore:
    """Reverse the chain; returns gradients keyed identically to the params."""
    if len(records) != len(model.config.layers):
        raise StateError("forward caches do not match the model's layer list")
    grads = ParamStore()
    g = grad_logits
    for rec in reversed(records):
        spec = rec.spec
        if spec.kind == "conv":
            g, gk, gb = ops.conv2d_backward(rec.cache, g)
            grads.add(f"{spec.name}.kernel", gk)
            grads.add(f"{spec.name}.bias", gb)
        elif spec.kind == "relu":
            g = ops.relu_backward(rec.cache, g)
        elif spec.kind == "maxpool":
            g = ops.maxpool2d_backward(rec.cache, g)
        elif spec.kind == "flatten":
            g = Tensor(g.array.reshape(rec.cache))
        elif spec.kind == "dense":
            g, gw, gb = ops.dense_backward(rec.cache, g)
            grads.add(f"{spec.name}.weight", gw)
            grads.add(f"{spec.name}.bias", gb)
        else:
            g = ops.dropout_backward(rec.cache, g)
    # re-key into parameter order so iteration order matches the store
    ordered = ParamStore()
    for name in model.params.names():
        ordered.add(name, grads[name])
    return ordered


def forward_loss(model: Model, x: Tensor, y_onehot: Tensor, rng: Rng | None = None) -> float:
    """Cross-entropy loss of one forward pass; no caches kept (cheap probe path)."""
    logits, _ = forward(model, x, rng)
    return ops.cross_entropy_loss(ops.softmax(logits), y_onehot)


def loss_and_gradients(model: Model, x: Tensor, y_onehot: Tensor,
                       rng: Rng | None = None) -> tuple[float, ParamStore]:
    """One training step's worth of math: loss plus gradients for every parameter."""
    logits, records = forward(model, x, rng)
    loss = ops.cross_entropy_loss(ops.softmax(logits), y_onehot)
    grads = backward(model, records, ops.softmax_xent_backward(logits, y_onehot))
    return loss, grads


def predict_proba(model: Model, x: Tensor) -> Tensor:
    if model.mode != "eval":
        raise StateError("predict_proba requires eval mode (call model.eval() first)")
    logits, _ = forward(model, x)
    return ops.softmax(logits)


def predict(model: Model, x: Tensor) -> np.ndarray:
    """Class labels [N]; argmax ties break toward the lower class index."""
    return np.argmax(predict_proba(model, x).array, axis=1)

"""Network architecture: truncated VGG-16 convolutional base plus a small
dense classification head.

The base is the standard 13-conv/5-pool VGG-16 feature stack. The head
flattens the final feature map and applies dense(head_width) -> relu ->
dense(num_classes) -> softmax. For the 80x80x3 input the base output is
(2, 2, 512), so the head sees a 2048-wide vector.

A ModelSpec is pure structure; a ModelState binds parameter arrays and the
per-channel input normalization to a spec.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import FormatError

DEFAULT_INPUT_SHAPE = (80, 80, 3)
DEFAULT_HEAD_WIDTH = 500
DEFAULT_NUM_CLASSES = 4

# (name, in_channels, out_channels) for the VGG-16 convolutional stack;
# "pool" rows mark the 2x2 max pools between blocks.
VGG16_CONV_PLAN: tuple[tuple[str, int, int], ...] = (
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("pool1", 0, 0),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("pool2", 0, 0),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("pool3", 0, 0),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("pool4", 0, 0),
    ("conv5_1", 512, 512),
    ("conv5_2", 512, 512),
    ("conv5_3", 512, 512),
    ("pool5", 0, 0),
)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | relu | pool | flatten | dense | softmax
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0

    def param_count(self) -> int:
        if self.kind == "conv":
            return 9 * self.in_channels * self.out_channels + self.out_channels
        if self.kind == "dense":
            return self.in_features * self.out_features + self.out_features
        return 0


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    head_width: int

    def conv_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "conv")

    def dense_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "dense")

    def param_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind in ("conv", "dense"))

    def num_params(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def digest(self) -> str:
        lines = [f"input={self.input_shape} classes={self.num_classes}"]
        for l in self.layers:
            lines.append(
                f"{l.kind}:{l.name}:{l.in_channels}:{l.out_channels}"
                f":{l.in_features}:{l.out_features}"
            )
        return hashlib.sha256("\n".join(lines).encode("ascii")).hexdigest()


def assemble_spec(
    conv_plan,
    input_shape: tuple[int, int, int],
    head_width: int,
    num_classes: int,
) -> ModelSpec:
    """Build a spec from a conv/pool plan: rows are ('convK_J', cin, cout)
    or ('poolK', 0, 0). The dense head is appended automatically."""
    if not conv_plan:
        raise ValueError("conv plan is empty")
    h, w, c = input_shape
    layers: list[LayerSpec] = []
    for name, cin, cout in conv_plan:
        if name.startswith("pool"):
            layers.append(LayerSpec(name, "pool"))
            h, w = h // 2, w // 2
            if h == 0 or w == 0:
                raise ValueError(f"input {input_shape} too small: {name} empties the feature map")
        else:
            if cin != c:
                raise ValueError(f"{name} expects {cin} channels, feature map has {c}")
            layers.append(LayerSpec(name, "conv", in_channels=cin, out_channels=cout))
            layers.append(LayerSpec(f"relu{name[4:]}", "relu"))
            c = cout
    feat = h * w * c
    layers.append(LayerSpec("flatten", "flatten", in_features=feat, out_features=feat))
    layers.append(LayerSpec("head.fc1", "dense", in_features=feat, out_features=head_width))
    layers.append(LayerSpec("head.relu", "relu"))
    layers.append(
        LayerSpec("head.fc2", "dense", in_features=head_width, out_features=num_classes)
    )
    layers.append(LayerSpec("softmax", "softmax"))
    return ModelSpec(
        layers=tuple(layers),
        input_shape=input_shape,
        num_classes=num_classes,
        head_width=head_width,
    )


def build_model_spec(
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE,
    head_width: int = DEFAULT_HEAD_WIDTH,
    num_classes: int = DEFAULT_NUM_CLASSES,
) -> ModelSpec:
    """The full pipeline network: VGG-16 conv stack plus the dense head."""
    if head_width < 1:
        raise ValueError(f"head_width must be >= 1, got {head_width}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return assemble_spec(VGG16_CONV_PLAN, input_shape, head_width, num_classes)


def build_surrogate_spec(
    input_shape: tuple[int, int, int] = (16, 16, 3),
    channels: tuple[int, ...] = (8, 16),
    head_width: int = 32,
    num_classes: int = DEFAULT_NUM_CLASSES,
) -> ModelSpec:
    """A scaled-down network with the same layer grammar (conv/relu/pool
    blocks then the dense head), small enough for fast tests and for
    end-to-end training on synthetic data."""
    plan: list[tuple[str, int, int]] = []
    cin = input_shape[2]
    for i, cout in enumerate(channels, start=1):
        plan.append((f"conv{i}_1", cin, cout))
        plan.append((f"pool{i}", 0, 0))
        cin = cout
    return assemble_spec(tuple(plan), input_shape, head_width, num_classes)


def backbone_output_shape(spec: ModelSpec) -> tuple[int, int, int]:
    """Feature-map shape after the last pool, before flattening."""
    h, w, c = spec.input_shape
    for l in spec.layers:
        if l.kind == "conv":
            c = l.out_channels
        elif l.kind == "pool":
            h, w = h // 2, w // 2
    return h, w, c


def param_summary(spec: ModelSpec) -> list[tuple[str, int]]:
    """(layer name, parameter count) for every parameterized layer, plus a
    ('total', n) row."""
    rows = [(l.name, l.param_count()) for l in spec.param_layers()]
    rows.append(("total", spec.num_params()))
    return rows


def _param_keys(layer: LayerSpec) -> tuple[str, str]:
    if layer.kind == "conv":
        return f"{layer.name}.kernel", f"{layer.name}.bias"
    return f"{layer.name}.weight", f"{layer.name}.bias"


def _param_shapes(layer: LayerSpec) -> tuple[tuple, tuple]:
    if layer.kind == "conv":
        return (3, 3, layer.in_channels, layer.out_channels), (layer.out_channels,)
    return (layer.in_features, layer.out_features), (layer.out_features,)


@dataclass
class ModelState:
    """A spec plus its parameter arrays, trainability flags, and the
    per-channel input normalization (applied as (x - mean) / std)."""

    spec: ModelSpec
    params: dict[str, np.ndarray]
    trainable: dict[str, bool] = field(default_factory=dict)
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self) -> None:
        for layer in self.spec.param_layers():
            for key, shape in zip(_param_keys(layer), _param_shapes(layer)):
                if key not in self.params:
                    raise FormatError(f"missing parameter {key!r}")
                if self.params[key].shape != shape:
                    raise FormatError(
                        f"parameter {key!r} has shape {self.params[key].shape}, expected {shape}"
                    )
            self.trainable.setdefault(layer.name, True)
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float32).reshape(3)
        self.norm_std = np.asarray(self.norm_std, dtype=np.float32).reshape(3)
        if np.any(self.norm_std <= 0):
            raise ValueError("normalization std must be positive")

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelState":
        return ModelState(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            trainable=dict(self.trainable),
            norm_mean=self.norm_mean.copy(),
            norm_std=self.norm_std.copy(),
        )

    def astype(self, dtype) -> "ModelState":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        return out

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape)


def init_state(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelState:
    """Fresh parameters: Glorot-uniform weights, zero biases, drawn in layer
    order from a generator seeded with `seed`."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for layer in spec.param_layers():
        wkey, bkey = _param_keys(layer)
        wshape, bshape = _param_shapes(layer)
        if layer.kind == "conv":
            fan_in = 9 * layer.in_channels
            fan_out = 9 * layer.out_channels
        else:
            fan_in, fan_out = layer.in_features, layer.out_features
        params[wkey] = _glorot(rng, wshape, fan_in, fan_out).astype(dtype)
        params[bkey] = np.zeros(bshape, dtype=dtype)
    return ModelState(spec=spec, params=params)


def load_backbone(
    spec: ModelSpec,
    weights: dict[str, np.ndarray],
    head_seed: int = 0,
    dtype=np.float32,
) -> ModelState:
    """Populate the conv stack from pretrained weights and initialize a fresh
    head. Every layer stays trainable. `weights` maps our parameter keys
    (e.g. 'conv1_1.kernel') to arrays."""
    state = init_state(spec, seed=head_seed, dtype=dtype)
    for layer in spec.conv_layers():
        for key, shape in zip(_param_keys(layer), _param_shapes(layer)):
            if key not in weights:
                raise FormatError(f"pretrained weights missing {key!r}")
            arr = np.asarray(weights[key])
            if arr.shape != shape:
                raise FormatError(
                    f"pretrained {key!r} has shape {arr.shape}, expected {shape}"
                )
            state.params[key] = arr.astype(dtype)
    return state


def _standardize(state: ModelState, batch: np.ndarray) -> np.ndarray:
    mean = state.norm_mean.astype(batch.dtype)
    std = state.norm_std.astype(batch.dtype)
    return (batch - mean) / std


def _check_batch(state: ModelState, batch: np.ndarray) -> None:
    expected = state.spec.input_shape
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(f"expected batch shaped (B, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}), got {batch.shape}")


def forward(state: ModelState, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Class probabilities, shape (B, num_classes). `mode` is accepted for
    interface symmetry; no layer behaves differently between train and eval."""
    probs, _ = forward_with_cache(state, batch, mode=mode, keep_cache=False)
    return probs


def forward_with_cache(
    state: ModelState, batch: np.ndarray, mode: str = "train", keep_cache: bool = True
) -> tuple[np.ndarray, list]:
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    _check_batch(state, batch)
    x = _standardize(state, batch)
    cache: list = []
    for layer in state.spec.layers:
        saved = None
        if layer.kind == "conv":
            saved = x
            wkey, bkey = _param_keys(layer)
            x = nn.conv3x3_forward(x, state.params[wkey], state.params[bkey])
        elif layer.kind == "relu":
            saved = x
            x = nn.relu_forward(x)
        elif layer.kind == "pool":
            shape = x.shape
            x, idx = nn.maxpool2x2_forward(x)
            saved = (shape, idx)
        elif layer.kind == "flatten":
            saved = x.shape
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == "dense":
            saved = x
            wkey, bkey = _param_keys(layer)
            x = nn.dense_forward(x, state.params[wkey], state.params[bkey])
        elif layer.kind == "softmax":
            x = nn.softmax_forward(x)
            saved = x
        else:  # pragma: no cover - specs are built by this module
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        if keep_cache:
            cache.append(saved)
    return x, cache


def backward(
    state: ModelState, cache: list, dprobs: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients given the gradient with respect to the output
    probabilities. Returns a dict keyed like state.params."""
    grads: dict[str, np.ndarray] = {}
    grad = dprobs
    for layer, saved in zip(reversed(state.spec.layers), reversed(cache)):
        if layer.kind == "softmax":
            grad = nn.softmax_backward(saved, grad)
        elif layer.kind == "dense":
            wkey, bkey = _param_keys(layer)
            grad, grads[wkey], grads[bkey] = nn.dense_backward(
                saved, state.params[wkey], grad
            )
        elif layer.kind == "relu":
            grad = nn.relu_backward(saved, grad)
        elif layer.kind == "flatten":
            grad = grad.reshape(saved)
        elif layer.kind == "pool":
            shape, idx = saved
            grad = nn.maxpool2x2_backward(shape, idx, grad)
        elif layer.kind == "conv":
            wkey, bkey = _param_keys(layer)
            grad, grads[wkey], grads[bkey] = nn.conv3x3_backward(
                saved, state.params[wkey], grad
            )
    return grads


def loss_and_grads(
    state: ModelState, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """One training step's worth of math: (mean loss, probs, param grads)."""
    probs, cache = forward_with_cache(state, batch, mode="train")
    loss = nn.cross_entropy(probs, labels)
    grads = backward(state, cache, nn.cross_entropy_backward(probs, labels))
    return loss, probs, grads


def predict_labels(state: ModelState, batch: np.ndarray) -> np.ndarray:
    return forward(state, batch).argmax(axis=1)

"""Layers, desk-scale architectures and feature instrumentation.

Normalization layers can hand their normalized activations to the model's
capture buffer. For conv feature maps every spatial position of every sample
contributes one vector whose dimension is the channel count.

Checkpoints are ``.npz`` archives: ``param/<name>`` and ``buffer/<name>``
arrays plus a ``meta`` member holding UTF-8 JSON (format version, arch,
seed lineage and any caller metadata).
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import make_rng
from .errors import ContractError, DomainError, FormatError, ShapeError
from .tensor import Tensor

CHECKPOINT_FORMAT = 1
ARCH_NAMES = ("mlp_bn", "cnn_bn", "mlp_ln")
CAPTURE_POINTS = ("pre_affine", "post_affine")


@dataclass(frozen=True)
class ModelArch:
    name: str = "mlp_bn"
    input_shape: tuple[int, ...] = (16,)
    num_classes: int = 4
    widths: tuple[int, ...] = (32, 32, 32)
    image_shape: tuple[int, ...] | None = None  # (c, h, w) for cnn_bn
    kernel_size: int = 3
    norm_eps: float = 1e-5
    bn_momentum: float = 0.1
    capture_point: str = "pre_affine"

    def __post_init__(self):
        for name in ("input_shape", "widths", "image_shape"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(d) for d in v))

    def validate(self) -> None:
        if self.name not in ARCH_NAMES:
            raise DomainError(f"unknown architecture {self.name!r}")
        if len(self.widths) < 3:
            raise DomainError("architectures need at least 3 normalization layers")
        if self.num_classes < 2:
            raise DomainError("need at least 2 classes")
        if self.capture_point not in CAPTURE_POINTS:
            raise DomainError(f"capture_point must be one of {CAPTURE_POINTS}")
        if self.name == "cnn_bn":
            img = self.image_shape
            if img is None or len(img) != 3:
                raise DomainError("cnn_bn needs image_shape (c, h, w)")
            if int(np.prod(img)) != int(np.prod(self.input_shape)):
                raise DomainError("image_shape must hold exactly the input elements")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(**d)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def forward(self, x: Tensor, mode: str, sink) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int):
        self.fan_in = in_features
        self.weight = Tensor(np.zeros((in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, mode, sink):
        return T.add_bias(T.matmul(x, self.weight), self.bias)


class Conv2d(Layer):
    """Same-padded, stride-1, bias-free convolution (a norm layer follows)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int):
        self.fan_in = in_channels * kernel_size * kernel_size
        self.padding = kernel_size // 2
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True)

    def params(self):
        return [("weight", self.weight)]

    def forward(self, x, mode, sink):
        return T.conv2d(x, self.weight, stride=1, padding=self.padding)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode, sink):
        return T.relu(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, mode, sink):
        return T.reshape(x, (x.shape[0], -1))


class ToImage(Layer):
    kind = "to_image"

    def __init__(self, image_shape):
        self.image_shape = tuple(image_shape)

    def forward(self, x, mode, sink):
        return T.reshape(x, (x.shape[0], *self.image_shape))


class _Norm(Layer):
    def __init__(self, num_features: int, eps: float):
        if eps <= 0:
            raise DomainError("epsilon must be positive")
        self.num_features = num_features
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.norm_index = 0

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _normalize(self, flat: Tensor, mode: str) -> Tensor:
        raise NotImplementedError

    def forward(self, x, mode, sink):
        spatial = x.ndim == 4
        if spatial:
            n, c, h, w = x.shape
            flat = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
        else:
            flat = x
        if flat.shape[1] != self.num_features:
            raise ShapeError(f"norm layer expects {self.num_features} features, got {flat.shape[1]}")
        xhat = self._normalize(flat, mode)
        out = T.scale_shift(xhat, self.gamma, self.beta)
        if sink is not None:
            sink(self.norm_index, xhat.data, out.data)
        if spatial:
            out = T.transpose(T.reshape(out, (n, h, w, c)), (0, 3, 1, 2))
        return out


class BatchNorm(_Norm):
    """Batch normalization over ``x[n, d]`` or, per channel, over ``x[n, c, h, w]``.

    Train mode uses the batch mean and biased (divisor n) variance and folds
    them into the running statistics with ``momentum``; eval mode uses the
    running statistics.
    """

    kind = "batch_norm"

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(num_features, eps)
        if not 0.0 < momentum <= 1.0:
            raise DomainError("momentum must be in (0, 1]")
        self.momentum = momentum
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def _normalize(self, flat, mode):
        if mode == "train":
            xhat, mu, var = T.batch_normalize(flat, self.eps)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu
            self.running_var = (1.0 - m) * self.running_var + m * var
            return xhat
        return T.normalize_with_stats(flat, self.running_mean, self.running_var, self.eps)


class LayerNorm(_Norm):
    """Per-sample normalization across features; identical in train and eval mode."""

    kind = "layer_norm"

    def _normalize(self, flat, mode):
        return T.layer_normalize(flat, self.eps)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class InstrumentedModel:
    """A feed-forward stack of layers whose norm layers can record features.

    ``captured[l]`` (l = 1..L, forward order) accumulates feature batches from
    every ``forward(..., capture=True)`` until :meth:`clear_capture`.
    """

    def __init__(self, arch: ModelArch, layers: list[Layer], seed: int | None = None):
        self.arch = arch
        self.layers = layers
        self.seed = seed
        self.lineage: list[str] = [] if seed is None else [f"init:{seed}"]
        self.captured: dict[int, list[np.ndarray]] = {}
        self.capture_enabled = False
        l = 0
        for layer in layers:
            if isinstance(layer, _Norm):
                l += 1
                layer.norm_index = l

    # -- structure ---------------------------------------------------------

    @property
    def norm_layers(self) -> list[_Norm]:
        return [layer for layer in self.layers if isinstance(layer, _Norm)]

    @property
    def num_norm_layers(self) -> int:
        return len(self.norm_layers)

    def norm_kinds(self) -> list[tuple[int, str]]:
        return [(layer.norm_index, layer.kind) for layer in self.norm_layers]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{i}.{name}", p) for i, layer in enumerate(self.layers) for name, p in layer.params()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{name}", b) for i, layer in enumerate(self.layers) for name, b in layer.buffers()]

    def param_layer_positions(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) for _ in layer.params()]

    def num_scalars(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @property
    def has_batch_norm(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    def clone(self) -> "InstrumentedModel":
        other = copy.deepcopy(self)
        other.captured = {}
        for p in other.parameters():
            p.grad = None
            p._node = None
        return other

    # -- forward -----------------------------------------------------------

    def clear_capture(self) -> None:
        self.captured = {}

    def _sink(self, l: int, pre: np.ndarray, post: np.ndarray) -> None:
        feats = pre if self.arch.capture_point == "pre_affine" else post
        self.captured.setdefault(l, []).append(np.array(feats, copy=True))

    def forward(
        self, x, mode: str = "eval", capture: bool = False, eval_norms_below: int = 0, start: int = 0
    ) -> Tensor:
        """Logits for ``x``. Norm layers with index <= ``eval_norms_below`` run in eval mode.

        ``start > 0`` feeds ``x`` to ``layers[start]``, skipping a prefix whose
        output was computed earlier with :meth:`forward_prefix`.
        """
        if mode not in ("train", "eval"):
            raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not 0 <= start <= len(self.layers):
            raise DomainError(f"start must be in [0, {len(self.layers)}], got {start}")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if start == 0 and tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeError(f"input shape {list(x.shape[1:])} != architecture input {list(self.arch.input_shape)}")
        self.capture_enabled = capture
        sink = self._sink if capture else None
        try:
            for layer in self.layers[start:]:
                frozen = isinstance(layer, _Norm) and layer.norm_index <= eval_norms_below
                x = layer.forward(x, "eval" if frozen else mode, sink)
        finally:
            self.capture_enabled = False
        return x

    __call__ = forward

    def forward_prefix(self, x, stop: int, batch_size: int = 1024) -> np.ndarray:
        """Output of ``layers[:stop]`` in eval mode, without recording a graph."""
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeError(f"input shape {list(x.shape[1:])} != architecture input {list(self.arch.input_shape)}")
        outs = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                h = Tensor(x[i : i + batch_size])
                for layer in self.layers[:stop]:
                    h = layer.forward(h, "eval", None)
                outs.append(h.data)
        return np.concatenate(outs, axis=0)

    def features(self, l: int) -> np.ndarray:
        """All captured vectors of norm layer ``l`` stacked as rows."""
        if l not in self.captured:
            raise DomainError(f"nothing captured for normalization layer {l}")
        return np.concatenate(self.captured[l], axis=0)

    # -- state -------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.named_parameters()}
        out.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            arr = arrays[f"param/{k}"]
            if arr.shape != p.shape:
                raise ShapeError(f"checkpoint shape mismatch for {k}")
            p.data = np.array(arr, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            for name, _ in layer.buffers():
                setattr(layer, name, np.array(arrays[f"buffer/{i}.{name}"], dtype=np.float64))


def build_layers(arch: ModelArch) -> list[Layer]:
    arch.validate()
    C = arch.num_classes
    layers: list[Layer] = []
    if arch.name in ("mlp_bn", "mlp_ln"):
        prev = int(np.prod(arch.input_shape))
        if len(arch.input_shape) != 1:
            layers.append(Flatten())
        for w in arch.widths:
            layers.append(Linear(prev, w))
            if arch.name == "mlp_bn":
                layers.append(BatchNorm(w, arch.norm_eps, arch.bn_momentum))
            else:
                layers.append(LayerNorm(w, arch.norm_eps))
            layers.append(ReLU())
            prev = w
        layers.append(Linear(prev, C))
    else:
        c, h, w = arch.image_shape
        if tuple(arch.input_shape) != (c, h, w):
            layers.append(ToImage((c, h, w)))
        prev = c
        for ch in arch.widths:
            layers.append(Conv2d(prev, ch, arch.kernel_size))
            layers.append(BatchNorm(ch, arch.norm_eps, arch.bn_momentum))
            layers.append(ReLU())
            prev = ch
        layers.append(Flatten())
        layers.append(Linear(prev * h * w, C))
    return layers


def init_params(arch: ModelArch, seed: int) -> InstrumentedModel:
    """Build ``arch`` with weights uniform in ±sqrt(6/fan_in), zero biases, γ=1, β=0."""
    layers = build_layers(arch)
    rng = make_rng(seed, "init")
    for layer in layers:
        if isinstance(layer, (Linear, Conv2d)):
            bound = np.sqrt(6.0 / layer.fan_in)
            layer.weight.data = rng.uniform(-bound, bound, size=layer.weight.shape)
    return InstrumentedModel(arch, layers, seed=seed)


def block_start(model: InstrumentedModel, k: int) -> int:
    """Index into ``model.layers`` of the first layer of norm block ``k`` (``L+1`` means past the end)."""
    L = model.num_norm_layers
    if not 1 <= k <= L + 1:
        raise DomainError(f"freeze_k must be in [1, {L + 1}], got {k}")
    if k == L + 1:
        return len(model.layers)
    if k == 1:
        return 0
    return model.layers.index(model.norm_layers[k - 2]) + 1


def freeze_prefix(model: InstrumentedModel, k: int) -> list[np.ndarray]:
    """Boolean update mask per parameter: train only from the k-th norm block on.

    Block ``k`` starts right after norm layer ``k-1``, so ``k=1`` trains
    everything and ``k=2`` freezes the first linear/conv + norm pair.
    ``k=L+1`` freezes every parameter, including the classifier head.
    """
    start = block_start(model, k)
    return [np.full(p.shape, pos >= start) for pos, p in zip(model.param_layer_positions(), model.parameters())]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    payload = dict(arrays)
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (ValueError, OSError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise FormatError(f"checkpoint {path} has no meta record")
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    return arrays, meta


def model_meta(model: InstrumentedModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "lineage": list(model.lineage),
    }


def model_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> InstrumentedModel:
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {meta.get('format')!r}")
    arch = ModelArch.from_dict(meta["arch"])
    model = InstrumentedModel(arch, build_layers(arch), seed=meta.get("seed"))
    model.lineage = list(meta.get("lineage", []))
    model.load_state_arrays(arrays)
    return model


def save_model(model: InstrumentedModel, path, extra: dict | None = None) -> None:
    meta = model_meta(model)
    if extra:
        meta["extra"] = extra
    save_arrays(path, model.state_arrays(), meta)


def load_model(path) -> InstrumentedModel:
    arrays, meta = load_arrays(path)
    model_keys = {k: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))}
    return model_from_arrays(model_keys, meta)


def same_parameters(a: InstrumentedModel, b: InstrumentedModel) -> bool:
    """Bit-exact equality of every parameter and buffer."""
    sa, sb = a.state_arrays(), b.state_arrays()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


def check_capture_dims(model: InstrumentedModel) -> None:
    for layer in model.norm_layers:
        for batch in model.captured.get(layer.norm_index, []):
            if batch.shape[1] != layer.num_features:
                raise ContractError(f"captured vectors at layer {layer.norm_index} have wrong dimension")


__all__ = [
    "ModelArch",
    "InstrumentedModel",
    "Linear",
    "Conv2d",
    "ReLU",
    "Flatten",
    "BatchNorm",
    "LayerNorm",
    "init_params",
    "build_layers",
    "freeze_prefix",
    "save_model",
    "load_model",
    "save_arrays",
    "load_arrays",
    "same_parameters",
]

"""Model construction, parameter accounting, and checkpoint serialization.

A :class:`ModelSpec` is a declarative layer stack; :func:`build_model` turns
it into concrete layers with seeded, reproducible initialization. Parameter
counts are computed twice, from the closed-form layer formulas and by
enumerating the stored buffers, and the two must agree exactly.

Checkpoints are a directory with ``manifest.json`` (format version, the full
spec, the build seed, and a tensor table) plus ``weights.bin`` holding every
tensor as little-endian IEEE-754 in manifest order.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as tcnn_rng
from .layers import (
    Conv2d,
    Flatten,
    Linear,
    MaxPool2x2,
    ReLU,
    TuckerConv2d,
    conv_output_size,
    softmax,
)
from .tensor import ShapeMismatchError, TuckerFactors, tucker_decompose

logger = logging.getLogger(__name__)

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RankConfig:
    """Per-mode rank upper bounds applied to every factorized conv layer.

    For a layer with dims (C, W, T, H) the effective ranks are
    ``(min(r_in, C), min(w, W), min(r_out, T), min(h, H))``.
    """

    r_in: int
    r_out: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.r_in, self.r_out, self.h, self.w) < 1:
            raise ValueError(f"rank bounds must be positive, got {self}")

    def clamp(self, c: int, w: int, t: int, h: int) -> tuple[int, int, int, int]:
        ranks = (min(self.r_in, c), min(self.w, w), min(self.r_out, t),
                 min(self.h, h))
        if ranks != (self.r_in, self.w, self.r_out, self.h):
            logger.info(
                "rank bounds %s clamped to %s for layer dims (C=%d, W=%d, T=%d, H=%d)",
                (self.r_in, self.r_out, self.h, self.w), ranks, c, w, t, h,
            )
        return ranks

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.r_in, self.r_out, self.h, self.w)


@dataclass
class LayerSpec:
    """One layer descriptor. ``kind`` is conv | tucker_conv | relu | maxpool |
    flatten | linear; unused fields stay None."""

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    ranks: tuple[int, int, int, int] | None = None
    in_features: int | None = None
    out_features: int | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for k in ("in_channels", "out_channels", "kernel", "in_features",
                  "out_features"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if self.kind in ("conv", "tucker_conv"):
            d["stride"] = self.stride
            d["padding"] = self.padding
        if self.ranks is not None:
            d["ranks"] = list(self.ranks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        ranks = d.get("ranks")
        return cls(
            kind=d["kind"],
            in_channels=d.get("in_channels"),
            out_channels=d.get("out_channels"),
            kernel=d.get("kernel"),
            stride=d.get("stride", 1),
            padding=d.get("padding", 0),
            ranks=tuple(ranks) if ranks is not None else None,
            in_features=d.get("in_features"),
            out_features=d.get("out_features"),
        )


@dataclass
class ModelSpec:
    """Input shape, class count, and the ordered layer stack."""

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: list[LayerSpec] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            num_classes=d["num_classes"],
            layers=[LayerSpec.from_dict(l) for l in d["layers"]],
        )

    def validate(self) -> None:
        """Propagate shapes through the stack; raise on any incompatibility."""
        shape = self.input_shape
        flat = None
        for i, l in enumerate(self.layers):
            where = f"layer {i} ({l.kind})"
            if l.kind in ("conv", "tucker_conv"):
                if flat is not None:
                    raise ShapeMismatchError(f"{where}: conv after flatten")
                c, h, w = shape
                if l.in_channels != c:
                    raise ShapeMismatchError(
                        f"{where}: expects {l.in_channels} channels, gets {c}"
                    )
                oh = conv_output_size(h, l.kernel, l.stride, l.padding)
                ow = conv_output_size(w, l.kernel, l.stride, l.padding)
                if oh < 1 or ow < 1:
                    raise ShapeMismatchError(f"{where}: output collapses to zero size")
                if l.kind == "tucker_conv":
                    dims = (l.in_channels, l.kernel, l.out_channels, l.kernel)
                    if l.ranks is None:
                        raise ShapeMismatchError(f"{where}: missing ranks")
                    for r, d in zip(l.ranks, dims):
                        if not 1 <= r <= d:
                            raise ShapeMismatchError(
                                f"{where}: rank {r} exceeds dimension {d}"
                            )
                shape = (l.out_channels, oh, ow)
            elif l.kind == "maxpool":
                c, h, w = shape
                if h < 2 or w < 2:
                    raise ShapeMismatchError(f"{where}: input too small to pool")
                shape = (c, h // 2, w // 2)
            elif l.kind == "relu":
                pass
            elif l.kind == "flatten":
                flat = int(np.prod(shape))
            elif l.kind == "linear":
                if flat is None:
                    raise ShapeMismatchError(f"{where}: linear before flatten")
                if l.in_features != flat:
                    raise ShapeMismatchError(
                        f"{where}: expects {l.in_features} features, gets {flat}"
                    )
                flat = l.out_features
            else:
                raise ValueError(f"{where}: unknown layer kind")
        if flat != self.num_classes:
            raise ShapeMismatchError(
                f"stack produces {flat} outputs, expected {self.num_classes} classes"
            )


def reference_spec(input_size: int = 64,
                   rank_config: RankConfig | None = None) -> ModelSpec:
    """The four-block architecture used throughout: conv(3->32, 32->64,
    64->96, 96->128), each followed by relu and 2x2 pooling, then a single
    linear head to 2 logits. All kernels 3x3, stride 1, padding 1.

    With a ``rank_config`` every conv becomes a factorized conv with
    per-layer clamped ranks.
    """
    channels = [3, 32, 64, 96, 128]
    layers: list[LayerSpec] = []
    size = input_size
    for c_in, c_out in zip(channels, channels[1:]):
        if rank_config is None:
            layers.append(LayerSpec("conv", in_channels=c_in, out_channels=c_out,
                                    kernel=3, stride=1, padding=1))
        else:
            ranks = rank_config.clamp(c_in, 3, c_out, 3)
            layers.append(LayerSpec("tucker_conv", in_channels=c_in,
                                    out_channels=c_out, kernel=3, stride=1,
                                    padding=1, ranks=ranks))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool"))
        size //= 2
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("linear", in_features=channels[-1] * size * size,
                            out_features=2))
    spec = ModelSpec(input_shape=(3, input_size, input_size), num_classes=2,
                     layers=layers)
    spec.validate()
    return spec


class Model:
    """An instantiated layer stack plus the spec and seed that produced it."""

    def __init__(self, spec: ModelSpec, seed: int, layers: list):
        self.spec = spec
        self.seed = seed
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Backpropagate through the stack; returns per-layer gradient dicts
        aligned with ``self.layers``. The input gradient of the first layer is
        never needed and is skipped when that layer is a convolution."""
        grads: list[dict[str, np.ndarray]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and isinstance(layer, (Conv2d, TuckerConv2d)):
                dout, g = layer.backward(dout, need_input_grad=False)
            else:
                dout, g = layer.backward(dout)
            grads[i] = g
        return grads

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((f"layers.{i}.{name}", arr))
        return out

    @property
    def dtype(self) -> np.dtype:
        for _, arr in self.named_params():
            return arr.dtype
        return np.dtype(np.float32)

    def copy(self) -> "Model":
        """Fresh model with identical parameters (scratch buffers and caches
        are not carried over)."""
        clone = build_model(self.spec, self.seed, dtype=self.dtype)
        for (_, src), (_, dst) in zip(self.named_params(), clone.named_params()):
            dst[...] = src
        return clone


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Instantiate the spec with deterministic seeded initialization.

    Each layer draws from its own counter-based substream ``(seed, index)``,
    so identical (spec, seed) pairs yield bit-identical parameters.
    """
    spec.validate()
    layers = []
    for i, l in enumerate(spec.layers):
        gen = tcnn_rng.stream(seed, i)
        if l.kind == "conv":
            layers.append(Conv2d.init(gen, l.in_channels, l.out_channels,
                                      l.kernel, l.stride, l.padding, dtype))
        elif l.kind == "tucker_conv":
            layers.append(TuckerConv2d.init(gen, l.in_channels, l.out_channels,
                                            l.kernel, l.ranks, l.stride,
                                            l.padding, dtype))
        elif l.kind == "relu":
            layers.append(ReLU())
        elif l.kind == "maxpool":
            layers.append(MaxPool2x2())
        elif l.kind == "flatten":
            layers.append(Flatten())
        elif l.kind == "linear":
            layers.append(Linear.init(gen, l.in_features, l.out_features, dtype))
        else:
            raise ValueError(f"unknown layer kind {l.kind!r}")
    return Model(copy.deepcopy(spec), seed, layers)


@dataclass
class LayerParamCount:
    index: int
    dims: tuple[int, int, int, int]
    ranks: tuple[int, int, int, int] | None
    n_dense: int
    n_stored: int

    @property
    def ratio(self) -> float:
        return self.n_dense / self.n_stored


@dataclass
class ParamReport:
    """Closed-form parameter accounting for one model.

    ``n_c`` is the dense-equivalent conv weight count, ``n_c_f`` the count
    actually stored (equal for dense layers), ``n_b`` the conv biases,
    ``n_r`` the classification head. ``c_r = n_c / n_c_f`` is the conv
    compression ratio.
    """

    n_c: int
    n_c_f: int
    n_b: int
    n_r: int
    per_layer: list[LayerParamCount]

    @property
    def n_cnn(self) -> int:
        return self.n_c + self.n_b + self.n_r

    @property
    def n_tcnn(self) -> int:
        return self.n_c_f + self.n_b + self.n_r

    @property
    def c_r(self) -> float:
        return self.n_c / self.n_c_f

    def to_dict(self) -> dict:
        return {
            "n_c": self.n_c,
            "n_c_f": self.n_c_f,
            "n_b": self.n_b,
            "n_r": self.n_r,
            "n_cnn": self.n_cnn,
            "n_tcnn": self.n_tcnn,
            "c_r": self.c_r,
            "per_layer": [
                {
                    "index": p.index,
                    "dims": list(p.dims),
                    "ranks": list(p.ranks) if p.ranks else None,
                    "n_dense": p.n_dense,
                    "n_stored": p.n_stored,
                    "ratio": p.ratio,
                }
                for p in self.per_layer
            ],
        }


def tucker_param_count(dims: tuple[int, int, int, int],
                       ranks: tuple[int, int, int, int]) -> int:
    """Stored weight count of a factorized conv layer: one (dim x rank)
    matrix per mode plus the core."""
    c, w, t, h = dims
    r1, r2, r3, r4 = ranks
    return c * r1 + w * r2 + t * r3 + h * r4 + r1 * r2 * r3 * r4


def count_params(model: Model) -> ParamReport:
    """Count parameters by category, checking the closed forms against the
    stored buffers; any disagreement is a bug and raises."""
    n_c = n_c_f = n_b = n_r = 0
    per_layer = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            dims = layer.weight.shape
            dense = int(np.prod(dims))
            n_c += dense
            n_c_f += dense
            n_b += layer.bias.size
            per_layer.append(LayerParamCount(i, dims, None, dense, dense))
        elif isinstance(layer, TuckerConv2d):
            dims = layer.factors.full_shape
            ranks = layer.factors.ranks
            dense = int(np.prod(dims))
            stored = tucker_param_count(dims, ranks)
            n_c += dense
            n_c_f += stored
            n_b += layer.bias.size
            per_layer.append(LayerParamCount(i, dims, ranks, dense, stored))
        elif isinstance(layer, Linear):
            n_r += layer.weight.size + layer.bias.size
    report = ParamReport(n_c=n_c, n_c_f=n_c_f, n_b=n_b, n_r=n_r,
                         per_layer=per_layer)
    brute = sum(arr.size for _, arr in model.named_params())
    if brute != report.n_tcnn:
        raise RuntimeError(
            f"parameter accounting mismatch: buffers hold {brute}, "
            f"closed form gives {report.n_tcnn}"
        )
    return report


def tensorize_pretrained(model: Model, rank_config: RankConfig) -> Model:
    """Replace every dense conv layer by a factorized conv layer whose factors
    come from the truncated HOSVD of the trained kernel (decomposition in
    float64, stored at the model dtype). Biases and all other layers are
    copied unchanged."""
    if any(isinstance(l, TuckerConv2d) for l in model.layers):
        raise ValueError("model already contains factorized conv layers")
    dtype = model.dtype
    new_layers = []
    new_spec = copy.deepcopy(model.spec)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            c, w, t, h = layer.weight.shape
            ranks = rank_config.clamp(c, w, t, h)
            factors = tucker_decompose(layer.weight.astype(np.float64), ranks)
            new_layers.append(TuckerConv2d(factors.astype(dtype),
                                           layer.bias.copy(), layer.stride,
                                           layer.padding))
            ls = new_spec.layers[i]
            ls.kind = "tucker_conv"
            ls.ranks = ranks
        else:
            new_layers.append(copy.deepcopy(layer))
    return Model(new_spec, model.seed, new_layers)


def predict_scores(model: Model, images: np.ndarray,
                   batch_size: int = 64) -> np.ndarray:
    """Per-sample probability of the defective class, evaluated in batches."""
    scores = []
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward(images[start : start + batch_size].astype(
            model.dtype, copy=False))
        scores.append(softmax(logits)[:, 1])
    return np.concatenate(scores).astype(np.float64)


# --- checkpoint I/O ---------------------------------------------------------

def _dtype_tag(dtype: np.dtype) -> str:
    if dtype == np.float32:
        return "f32"
    if dtype == np.float64:
        return "f64"
    raise ValueError(f"unsupported parameter dtype {dtype}")


def save_checkpoint(model: Model, out_dir: str | Path) -> Path:
    """Write manifest.json plus weights.bin; bit-exact and portable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    blobs = []
    offset = 0
    for name, arr in model.named_params():
        tag = _dtype_tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": tag,
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "tensors": table,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "weights.bin", "wb") as f:
        f.write(b"".join(blobs))
    return out


def load_checkpoint(ckpt_dir: str | Path) -> Model:
    """Rebuild the model from a checkpoint directory, bit-exact."""
    ckpt = Path(ckpt_dir)
    with open(ckpt / "manifest.json") as f:
        manifest = json.load(f)
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {manifest['format_version']}"
        )
    spec = ModelSpec.from_dict(manifest["spec"])
    blob = (ckpt / "weights.bin").read_bytes()
    tensors = {}
    dtype = np.float32
    for entry in manifest["tensors"]:
        dt = _DTYPE_TAGS[entry["dtype"]]
        raw = blob[entry["byte_offset"] : entry["byte_offset"] + entry["byte_length"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        dtype = tensors[entry["name"]].dtype
    model = build_model(spec, manifest["seed"], dtype=dtype)
    for name, arr in model.named_params():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name}")
        if tensors[name].shape != arr.shape:
            raise ShapeMismatchError(
                f"checkpoint tensor {name} has shape {tensors[name].shape}, "
                f"model expects {arr.shape}"
            )
        arr[...] = tensors[name]
    return model

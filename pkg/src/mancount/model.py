"""Toy counting network: conv backbone, region-attention encoder, density decoder."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .attention import (
    GLOBAL_WEIGHT_NAMES,
    WEIGHT_NAMES,
    AttentionParams,
    RegionMaps,
    attention_combined,
    attention_global,
    coverage_maps,
    learnable_region_maps,
)
from .errors import ConfigurationError, DimensionError, ParseError
from .ndgrad import Tensor

BACKBONE_STRIDE = 8
MAX_GRID = 32


@dataclass
class ModelConfig:
    d: int = 32
    layers: int = 4
    channels: tuple[int, int] = (16, 32)
    ffn_hidden: int | None = None
    upsample: int = 2
    use_lra: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.d
        if self.layers < 1:
            raise ConfigurationError(f"encoder needs at least one layer, got {self.layers}")
        if self.d < 4 or self.d % 4:
            raise ConfigurationError(f"d must be a positive multiple of 4, got {self.d}")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ConfigurationError(f"channel plan needs two positive widths, got {self.channels}")
        if self.upsample not in (1, 2, 4, 8):
            raise ConfigurationError(f"upsample must be a power of two <= 8, got {self.upsample}")

    @property
    def density_stride(self) -> int:
        return BACKBONE_STRIDE // self.upsample


@dataclass
class DensityMap:
    grid: Tensor  # (W', H') indexed [x, y]
    stride: int

    @property
    def count(self) -> float:
        return float(self.grid.data.sum())


@dataclass
class ForwardResult:
    density: DensityMap
    regions: list[RegionMaps] = field(default_factory=list)
    features: Tensor | None = None


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded weights uniform in +-1/sqrt(fan_in); zero biases; unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    raw: dict[str, np.ndarray] = {}
    c1, c2 = config.channels
    plan = [(1, c1), (c1, c2), (c2, config.d)]
    for k, (cin, cout) in enumerate(plan, start=1):
        raw[f"backbone.conv{k}.w"] = _uniform(rng, (cout, cin, 3, 3), cin * 9)
        raw[f"backbone.conv{k}.b"] = np.zeros(cout)
    d, hid = config.d, config.ffn_hidden
    names = WEIGHT_NAMES if config.use_lra else GLOBAL_WEIGHT_NAMES
    for layer in range(config.layers):
        p = f"enc{layer}."
        for n in names:
            raw[p + n] = _uniform(rng, (d, d), d)
        raw[p + "ln1.g"] = np.ones(d)
        raw[p + "ln1.b"] = np.zeros(d)
        raw[p + "ffn1.w"] = _uniform(rng, (d, hid), d)
        raw[p + "ffn1.b"] = np.zeros(hid)
        raw[p + "ffn2.w"] = _uniform(rng, (hid, d), hid)
        raw[p + "ffn2.b"] = np.zeros(d)
        raw[p + "ln2.g"] = np.ones(d)
        raw[p + "ln2.b"] = np.zeros(d)
    dec = [(d, d // 2, 3), (d // 2, d // 4, 3), (d // 4, 1, 1)]
    for k, (cin, cout, ks) in enumerate(dec, start=1):
        raw[f"decoder.conv{k}.w"] = _uniform(rng, (cout, cin, ks, ks), cin * ks * ks)
        raw[f"decoder.conv{k}.b"] = np.zeros(cout)
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in raw.items()}


def backbone_forward(image: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Three conv3x3+relu blocks, each followed by 2x2 mean pooling (stride 8 overall)."""
    if image.ndim != 3 or image.shape[0] != 1:
        raise DimensionError(f"image must be (1, W, H), got {image.shape}")
    _, w, h = image.shape
    if w % BACKBONE_STRIDE or h % BACKBONE_STRIDE:
        raise ConfigurationError(f"image extents {w}x{h} must be divisible by {BACKBONE_STRIDE}")
    x = image
    for k in (1, 2, 3):
        x = nd.conv2d(x, params[f"backbone.conv{k}.w"], params[f"backbone.conv{k}.b"], 1, 1)
        x = nd.avg_pool2(nd.relu(x))
    return x


def encoder_layer_forward(
    x: Tensor, params: dict[str, Tensor], prefix: str, w: int, h: int, use_lra: bool = True
) -> tuple[Tensor, RegionMaps | None]:
    """Post-norm transformer layer whose attention is global (+ region branch)."""
    att = AttentionParams.from_dict({n: params.get(prefix + n) for n in WEIGHT_NAMES})
    regions = None
    if use_lra:
        regions = learnable_region_maps(coverage_maps(x, x, att), w, h)
        a = attention_combined(x, x, x, att, regions)
    else:
        a = attention_global(x, x, x, att)
    y1 = nd.layer_norm_rows(x + a, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    hidden = nd.relu(nd.linear(y1, params[prefix + "ffn1.w"], params[prefix + "ffn1.b"]))
    ffn = nd.linear(hidden, params[prefix + "ffn2.w"], params[prefix + "ffn2.b"])
    y = nd.layer_norm_rows(y1 + ffn, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    return y, regions


def decoder_forward(features: Tensor, params: dict[str, Tensor], upsample: int = 2) -> Tensor:
    """Upsample then conv3x3, conv3x3, conv1x1, all relu; returns the ``(W', H')`` grid."""
    x = nd.upsample_nearest(features, upsample)
    x = nd.relu(nd.conv2d(x, params["decoder.conv1.w"], params["decoder.conv1.b"], 1, 1))
    x = nd.relu(nd.conv2d(x, params["decoder.conv2.w"], params["decoder.conv2.b"], 1, 1))
    x = nd.relu(nd.conv2d(x, params["decoder.conv3.w"], params["decoder.conv3.b"], 1, 0))
    return nd.reshape(x, x.shape[1:])


def model_forward(image: Tensor, params: dict[str, Tensor], config: ModelConfig) -> ForwardResult:
    features = backbone_forward(image, params)
    _, w, h = features.shape
    if w > MAX_GRID or h > MAX_GRID:
        raise ConfigurationError(
            f"token grid {w}x{h} exceeds the {MAX_GRID}x{MAX_GRID} cap on region maps"
        )
    x = nd.flatten_spatial(features)
    regions = []
    for layer in range(config.layers):
        x, r = encoder_layer_forward(x, params, f"enc{layer}.", w, h, config.use_lra)
        if r is not None:
            regions.append(r)
    density = decoder_forward(nd.unflatten_spatial(x, w, h), params, config.upsample)
    return ForwardResult(DensityMap(density, config.density_stride), regions, features)


def image_tensor(image: np.ndarray) -> Tensor:
    """Row-major ``(H, W)`` pixels to the ``(1, W, H)`` model input."""
    return Tensor(np.asarray(image, dtype=nd.DTYPE).T[None])


class CountingModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def __call__(self, image) -> ForwardResult:
        if not isinstance(image, Tensor):
            image = image_tensor(image)
        return model_forward(image, self.params, self.config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def predict_count(self, image) -> float:
        with nd.no_grad():
            return self(image).density.count


def summary(config: ModelConfig, size: int = 64) -> dict:
    """Parameter count and forward cost of one ``size x size`` image."""
    model = CountingModel(config)
    with nd.no_grad(), nd.count_flops() as counter:
        model(np.zeros((size, size)))
    return {
        "parameters": int(sum(p.size for p in model.parameters())),
        "macs": counter.macs,
        "flops": counter.flops,
        "tensors": len(model.params),
    }


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MANT"
FORMAT_VERSION = 1
CONFIG_KEY = "meta.config"


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ParseError(path, 0, f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(path, pos, f"truncated {what}: need {n} bytes, have {len(buf) - pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise ParseError(path, 4, f"unsupported format version {version}")
    tensors: dict[str, np.ndarray] = {}
    while pos < len(buf):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(path, start + 4, f"tensor name is not UTF-8: {exc}") from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise ParseError(path, pos - 4, f"implausible rank {rank} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        payload = take(4 * count, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return tensors


def save_checkpoint(path, model: CountingModel) -> None:
    cfg = model.config
    meta = [cfg.d, cfg.layers, cfg.channels[0], cfg.channels[1], cfg.ffn_hidden, cfg.upsample,
            int(cfg.use_lra)]
    tensors = {CONFIG_KEY: np.array(meta, dtype=np.float32)}
    tensors.update({n: p.data for n, p in model.params.items()})
    write_tensors(path, tensors)


def load_checkpoint(path) -> CountingModel:
    tensors = read_tensors(path)
    if CONFIG_KEY not in tensors:
        raise ParseError(path, 8, f"missing {CONFIG_KEY!r} entry")
    d, layers, c1, c2, hid, up, lra = (int(v) for v in tensors.pop(CONFIG_KEY))
    config = ModelConfig(d=d, layers=layers, channels=(c1, c2), ffn_hidden=hid, upsample=up,
                         use_lra=bool(lra))
    expected = init_params(config)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ParseError(path, len(Path(path).read_bytes()), f"missing tensors {missing[:3]}")
    params = {}
    for name, ref in expected.items():
        if tensors[name].shape != ref.shape:
            raise ParseError(path, 8, f"{name!r} has shape {tensors[name].shape}, expected {ref.shape}")
        params[name] = Tensor(tensors[name], requires_grad=True, name=name)
    return CountingModel(config, params)

"""Synthetic crowd scenes and their on-disk dataset format.

A dataset directory holds ``manifest.txt`` (one ``img/NNNN.pgm ann/NNNN.csv``
pair per line), binary PGM images (P5, maxval 255) and headerless ``x,y``
annotation CSVs.  Images are row-major ``(H, W)`` arrays; annotation
``(x, y)`` is in continuous pixel units, column ``x`` and row ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError


@dataclass
class SceneParams:
    size: int = 64
    n_min: int = 5
    n_max: int = 50
    r_base: float = 1.5
    slope: float = 1.5
    amplitude: float = 0.8
    background: float = 0.1
    noise: float = 0.03

    def radius(self, y):
        """Head radius at row ``y``; grows linearly toward the bottom of the frame."""
        return self.r_base * (1.0 + self.slope * np.asarray(y) / self.size)

    @property
    def max_count(self) -> int:
        return int(self.size * self.size // (4 * self.r_base * self.r_base))

    def validate(self) -> None:
        if self.size < 1:
            raise ConfigurationError(f"size must be positive, got {self.size}")
        if self.n_min < 0 or self.n_max < self.n_min:
            raise ConfigurationError(f"bad count range [{self.n_min}, {self.n_max}]")
        if self.r_base <= 0 or self.slope <= -1.0:
            raise ConfigurationError("head radius must stay positive across the frame")
        if self.n_max > self.max_count:
            raise ConfigurationError(
                f"n_max={self.n_max} exceeds the packing bound {self.max_count} "
                f"for a {self.size}x{self.size} image"
            )


@dataclass
class CrowdScene:
    image: np.ndarray  # (H, W) in [0, 1]
    points: np.ndarray  # (N, 2) columns x, y
    seed: int | None = None
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def count(self) -> int:
        return int(self.points.shape[0])


def _sample_rows(rng, n, params: SceneParams) -> np.ndarray:
    # rejection sampling with acceptance (r(0)/r(y))^2: far rows hold more heads
    out = []
    r0 = params.radius(0.0)
    while len(out) < n:
        y = rng.uniform(0.0, params.size, 4 * n + 8)
        accept = rng.uniform(0.0, 1.0, y.size) < (r0 / params.radius(y)) ** 2
        out.extend(y[accept].tolist())
    return np.array(out[:n])


def generate_scene(params: SceneParams, seed: int) -> CrowdScene:
    params.validate()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(params.n_min, params.n_max + 1))
    xs = rng.uniform(0.0, params.size, n)
    ys = _sample_rows(rng, n, params) if n else np.zeros(0)
    radii = params.radius(ys)
    centers = np.arange(params.size) + 0.5
    img = np.full((params.size, params.size), params.background)
    for x, y, r in zip(xs, ys, radii):
        gx = np.exp(-((centers - x) ** 2) / (2 * r * r))
        gy = np.exp(-((centers - y) ** 2) / (2 * r * r))
        img += params.amplitude * np.outer(gy, gx)
    img += params.noise * rng.standard_normal(img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return CrowdScene(img, np.stack([xs, ys], axis=1).reshape(n, 2), seed, radii)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------- PGM


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"write_pgm needs a 2D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def _header_tokens(buf: bytes, path, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= len(buf):
            raise ParseError(path, pos, "truncated PGM header")
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append((start, buf[start:pos]))
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM as a ``(H, W)`` uint8 array."""
    buf = Path(path).read_bytes()
    tokens, pos = _header_tokens(buf, path, 4)
    (_, magic), (ow, wtok), (oh, htok), (om, mtok) = tokens
    if magic != b"P5":
        raise ParseError(path, 0, f"bad magic {magic!r}, expected b'P5'")
    dims = []
    for offset, tok in ((ow, wtok), (oh, htok), (om, mtok)):
        if not tok.isdigit():
            raise ParseError(path, offset, f"expected a decimal integer, got {tok!r}")
        dims.append(int(tok))
    w, h, maxval = dims
    if maxval != 255:
        raise ParseError(path, om, f"only maxval 255 is supported, got {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError(path, pos, "missing whitespace after PGM header")
    pos += 1
    need = w * h
    if len(buf) - pos < need:
        raise ParseError(path, len(buf), f"truncated pixel data: need {need} bytes, have {len(buf) - pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


# ---------------------------------------------------------------- datasets


def write_dataset(scenes, directory) -> None:
    root = Path(directory)
    (root / "img").mkdir(parents=True, exist_ok=True)
    (root / "ann").mkdir(parents=True, exist_ok=True)
    lines = []
    for k, scene in enumerate(scenes):
        img_rel, ann_rel = f"img/{k:04d}.pgm", f"ann/{k:04d}.csv"
        write_pgm(root / img_rel, quantize(scene.image))
        rows = "".join(f"{float(x)!r},{float(y)!r}\n" for x, y in scene.points)
        (root / ann_rel).write_text(rows, encoding="utf-8")
        lines.append(f"{img_rel} {ann_rel}\n")
    (root / "manifest.txt").write_text("".join(lines), encoding="utf-8")


def read_points(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pts = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text:
            parts = text.split(b",")
            try:
                if len(parts) != 2:
                    raise ValueError
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise ParseError(path, offset, f"expected 'x,y', got {text[:40]!r}") from None
        offset += len(line)
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def read_dataset(directory) -> list[CrowdScene]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise ParseError(manifest, 0, "manifest not found")
    raw = manifest.read_bytes()
    scenes = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text:
            try:
                parts = text.decode("utf-8").split()
            except UnicodeDecodeError:
                raise ParseError(manifest, offset, "manifest line is not UTF-8") from None
            if len(parts) != 2:
                raise ParseError(manifest, offset, f"expected '<image> <annotations>', got {text[:60]!r}")
            img_path, ann_path = root / parts[0], root / parts[1]
            for p in (img_path, ann_path):
                if not p.is_file():
                    raise ParseError(manifest, offset, f"referenced file {p} does not exist")
            image = read_pgm(img_path).astype(np.float64) / 255.0
            scenes.append(CrowdScene(image, read_points(ann_path)))
        offset += len(line)
    return scenes


def generate_splits(root, n_train: int, n_test: int, params: SceneParams, seed: int) -> None:
    """Write ``root/train`` and ``root/test`` from disjoint seed ranges."""
    root = Path(root)
    train = [generate_scene(params, seed + k) for k in range(n_train)]
    test = [generate_scene(params, seed + n_train + k) for k in range(n_test)]
    write_dataset(train, root / "train")
    write_dataset(test, root / "test")


def resolve_split(directory, split: str) -> Path:
    """``directory`` itself if it has a manifest, else ``directory/split``."""
    root = Path(directory)
    if (root / "manifest.txt").is_file():
        return root
    return root / split


def mean_radius_by_row(scenes, bins: int = 4, size: int | None = None) -> list[float]:
    size = size or scenes[0].image.shape[0]
    ys = np.concatenate([s.points[:, 1] for s in scenes])
    rs = np.concatenate([s.radii for s in scenes])
    edges = np.linspace(0, size, bins + 1)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ys >= lo) & (ys < hi)
        out.append(float(rs[sel].mean()) if sel.any() else math.nan)
    return out

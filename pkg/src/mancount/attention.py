"""Global attention, the hard region filter, and learnable region attention.

Token ``i`` of a WH-length axis is grid cell ``(x, y)`` with ``i = y*W + x``.
Per-query maps are stored as ``(W, H)`` arrays indexed ``[x, y]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import ndgrad as nd
from .errors import BoundsError, DimensionError
from .ndgrad import Tensor

WEIGHT_NAMES = ("wq_glb", "wk_glb", "wv", "wq1", "wk1", "wq2", "wk2", "wq_loc", "wk_loc")
GLOBAL_WEIGHT_NAMES = ("wq_glb", "wk_glb", "wv")


@dataclass
class AttentionParams:
    """The d x d projections of one attention module.

    ``wv`` is shared by the global and region branches.  The region-branch
    matrices may be ``None`` for a global-only module.
    """

    wq_glb: Tensor
    wk_glb: Tensor
    wv: Tensor
    wq1: Tensor | None = None
    wk1: Tensor | None = None
    wq2: Tensor | None = None
    wk2: Tensor | None = None
    wq_loc: Tensor | None = None
    wk_loc: Tensor | None = None

    def __post_init__(self):
        d = self.wv.shape[0]
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None and t.shape != (d, d):
                raise DimensionError(f"{f.name} has shape {t.shape}, expected ({d}, {d})")

    @property
    def d(self) -> int:
        return self.wv.shape[0]

    @property
    def has_region_branch(self) -> bool:
        return all(getattr(self, n) is not None for n in WEIGHT_NAMES)

    @classmethod
    def from_dict(cls, weights: dict) -> "AttentionParams":
        return cls(**{n: weights.get(n) for n in WEIGHT_NAMES})

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, region: bool = True, requires_grad=True):
        bound = 1.0 / math.sqrt(d)
        names = WEIGHT_NAMES if region else GLOBAL_WEIGHT_NAMES
        return cls(**{
            n: Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=requires_grad)
            for n in names
        })


@dataclass
class CoverageMaps:
    """Row-stochastic WH x WH coverage matrices; row ``i`` is query ``i``'s map."""

    c1: Tensor
    c2: Tensor

    def row_map(self, which: int, i: int, w: int, h: int) -> np.ndarray:
        c = (self.c1 if which == 1 else self.c2).data
        return c[i].reshape(h, w).T


@dataclass
class RegionMaps:
    """Complete region maps ``rtilde`` of shape ``(WH, W, H)`` and their CDF terms."""

    rtilde: Tensor
    w: int
    h: int
    bl1: Tensor | None = None
    ur2: Tensor | None = None
    ur1: Tensor | None = None
    bl2: Tensor | None = None

    def as_matrix(self) -> Tensor:
        """``(WH, WH)`` with both axes in token order."""
        n = self.w * self.h
        return nd.reshape(nd.transpose(self.rtilde, (0, 2, 1)), (n, n))


def _check_tokens(*mats: Tensor) -> None:
    first = mats[0].shape
    for m in mats:
        if m.ndim != 2 or m.shape != first:
            raise DimensionError(f"token matrices must share shape, got {[t.shape for t in mats]}")


def _check_d(x: Tensor, params: AttentionParams) -> None:
    if x.shape[1] != params.d:
        raise DimensionError(f"tokens have width {x.shape[1]}, params expect d={params.d}")


def hard_region_map(b: tuple[int, int], u: tuple[int, int], w: int, h: int) -> np.ndarray:
    """Binary ``(W, H)`` mask of the closed rectangle with corners ``b`` and ``u``."""
    for name, (px, py) in (("b", b), ("u", u)):
        if not (0 <= px < w and 0 <= py < h):
            raise BoundsError(f"vertex {name}=({px}, {py}) outside a {w}x{h} grid")
    xs = np.arange(w)[:, None]
    ys = np.arange(h)[None, :]
    fil_bl = (xs >= b[0]) & (ys >= b[1])
    fil_ur = (xs <= u[0]) & (ys <= u[1])
    return (fil_bl & fil_ur).astype(nd.DTYPE)


def coverage_maps(q: Tensor, k: Tensor, params: AttentionParams) -> CoverageMaps:
    _check_tokens(q, k)
    _check_d(q, params)
    c1 = nd.softmax_rows(nd.matmul(q @ params.wq1, nd.transpose(k @ params.wk1)))
    c2 = nd.softmax_rows(nd.matmul(q @ params.wq2, nd.transpose(k @ params.wk2)))
    return CoverageMaps(c1, c2)


def _row_maps(c: Tensor, w: int, h: int) -> Tensor:
    n = w * h
    return nd.transpose(nd.reshape(c, (n, h, w)), (0, 2, 1))


def learnable_region_maps(cov: CoverageMaps, w: int, h: int) -> RegionMaps:
    n = w * h
    if cov.c1.shape != (n, n) or cov.c2.shape != (n, n):
        raise DimensionError(f"coverage maps {cov.c1.shape} do not match a {w}x{h} grid")
    m1 = _row_maps(cov.c1, w, h)
    m2 = _row_maps(cov.c2, w, h)
    bl1 = nd.cumsum2d_stack(m1, "bl")
    ur1 = nd.cumsum2d_stack(m1, "ur")
    bl2 = nd.cumsum2d_stack(m2, "bl")
    ur2 = nd.cumsum2d_stack(m2, "ur")
    rtilde = nd.hadamard(bl1, ur2) + nd.hadamard(ur1, bl2)
    return RegionMaps(rtilde, w, h, bl1=bl1, ur2=ur2, ur1=ur1, bl2=bl2)


def region_maps_from_arrays(c1: np.ndarray, c2: np.ndarray, w: int, h: int) -> RegionMaps:
    """Region maps for fixed (untracked) coverage matrices."""
    return learnable_region_maps(CoverageMaps(Tensor(c1), Tensor(c2)), w, h)


def attention_global(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams) -> Tensor:
    _check_tokens(q, k, v)
    _check_d(q, params)
    logits = nd.matmul(q @ params.wq_glb, nd.transpose(k @ params.wk_glb))
    weights = nd.softmax_rows(nd.scale(logits, 1.0 / math.sqrt(params.d)))
    return weights @ (v @ params.wv)


def attention_lra(
    q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, regions: RegionMaps
) -> Tensor:
    """Region-modulated attention: the region map scales the logits before softmax."""
    _check_tokens(q, k, v)
    _check_d(q, params)
    n = q.shape[0]
    if regions.w * regions.h != n:
        raise DimensionError(f"region maps cover {regions.w}x{regions.h}, tokens number {n}")
    logits = nd.matmul(q @ params.wq_loc, nd.transpose(k @ params.wk_loc))
    modulated = nd.hadamard(logits, regions.as_matrix())
    weights = nd.softmax_rows(nd.scale(modulated, 1.0 / math.sqrt(params.d)))
    return weights @ (v @ params.wv)


def attention_combined(
    q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, regions: RegionMaps
) -> Tensor:
    return attention_global(q, k, v, params) + attention_lra(q, k, v, params, regions)


def export_region_pgms(regions: RegionMaps, queries, prefix: str) -> list[str]:
    """Write one PGM per probed query ``(x, y)``; values in [0, 2] map to [0, 255]."""
    from .synthcrowd import write_pgm

    paths = []
    data = regions.rtilde.data
    for qx, qy in queries:
        if not (0 <= qx < regions.w and 0 <= qy < regions.h):
            raise BoundsError(f"probe ({qx}, {qy}) outside a {regions.w}x{regions.h} grid")
        i = qy * regions.w + qx
        img = np.clip(data[i] / 2.0, 0.0, 1.0).T
        path = f"{prefix}_q{qx}_{qy}.pgm"
        write_pgm(path, np.round(img * 255).astype(np.uint8))
        paths.append(path)
    return paths

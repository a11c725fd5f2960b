"""Local attention regularization on region-weighted features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .attention import RegionMaps
from .errors import ContractError, DimensionError
from .ndgrad import Tensor


@dataclass
class WeightedFeatures:
    e: Tensor  # (WH, C), row i is the feature total under region map i
    e_bar: Tensor  # (C,)


def weighted_features(features: Tensor, regions: RegionMaps) -> WeightedFeatures:
    """Contract a ``(C, W, H)`` feature map against every region map."""
    if features.ndim != 3:
        raise DimensionError(f"features must be (C, W, H), got {features.shape}")
    c, w, h = features.shape
    if (w, h) != (regions.w, regions.h):
        raise DimensionError(
            f"features are {w}x{h} but region maps are {regions.w}x{regions.h}"
        )
    n = w * h
    r = nd.reshape(regions.rtilde, (regions.rtilde.shape[0], n))
    f = nd.reshape(features, (c, n))
    e = nd.matmul(r, nd.transpose(f))
    mean_row = Tensor._wrap(np.full((1, e.shape[0]), 1.0 / e.shape[0]))
    e_bar = nd.reshape(nd.matmul(mean_row, e), (c,))
    return WeightedFeatures(e, e_bar)


def deviation_penalty(ei: Tensor, ej: Tensor) -> Tensor:
    """``1 - cos(ei, ej)``; zero when either vector has (near) zero norm."""
    if ei.shape != ej.shape or ei.ndim != 1:
        raise DimensionError(f"penalty needs equal-length vectors, got {ei.shape}, {ej.shape}")
    return nd.tsum(nd.cosine_deviation_rows(nd.reshape(ei, (1, ei.shape[0])), ej))


def layer_penalty(features: Tensor, regions: RegionMaps) -> Tensor:
    wf = weighted_features(features, regions)
    return nd.tsum(nd.cosine_deviation_rows(wf.e, wf.e_bar))


def lar_regularizer(features: Tensor, layer_regions: list[RegionMaps]) -> Tensor:
    """Sum over locations of each layer's deviation penalty, averaged over layers."""
    if not layer_regions:
        raise ContractError("lar_regularizer needs region maps from at least one layer")
    total = layer_penalty(features, layer_regions[0])
    for regions in layer_regions[1:]:
        total = total + layer_penalty(features, regions)
    return nd.scale(total, 1.0 / len(layer_regions))

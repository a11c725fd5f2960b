"""Finite-difference gate over every differentiable op and the full model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndgrad as nd
from .attention import AttentionParams, RegionMaps, attention_combined, coverage_maps, learnable_region_maps
from .lar import lar_regularizer, weighted_features
from .losses import instance_attention_loss, instance_deviations, instance_mask, posterior_map, total_loss
from .model import CountingModel, ModelConfig, init_params
from .errors import EvaluationError
from .ndgrad import Tensor

TOLERANCE = 1e-4
STEP = 1e-5
KINK_MARGIN = 100 * STEP
MAX_DRAWS = 500

# small enough that every parameter can be perturbed within the time budget
GRADCHECK_MODEL = ModelConfig(d=4, layers=4, channels=(2, 4), ffn_hidden=8)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _probe(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _weighted_sum(out: Tensor, weights: Tensor) -> Tensor:
    return nd.tsum(nd.hadamard(out, weights))


def _op_cases(rng) -> list[tuple[str, Callable, list[Tensor]]]:
    def r(*shape):
        return Tensor(rng.standard_normal(shape))

    cases = []
    for kind in ("add", "sub", "hadamard"):
        w = _probe(rng, (3, 3))
        cases.append((f"ewise.{kind}", lambda a, b, k=kind, w=w: _weighted_sum(nd.ewise(k, a, b), w),
                      [r(3, 3), r(3, 3)]))
    for kind in ("relu", "abs", "neg"):
        w = _probe(rng, (3, 3))
        cases.append((f"ewise.{kind}", lambda a, k=kind, w=w: _weighted_sum(nd.ewise(k, a), w), [r(3, 3)]))
    w = _probe(rng, (3, 3))
    cases.append(("ewise.scale", lambda a, w=w: _weighted_sum(nd.ewise("scale", a, -1.7), w), [r(3, 3)]))
    w = _probe(rng, (3, 3))
    cases.append(("ewise.sqrt", lambda a, w=w: _weighted_sum(nd.sqrt(a), w),
                  [Tensor(rng.uniform(0.5, 2.0, (3, 3)))]))
    w = _probe(rng, (5, 3))
    cases.append(("matmul", lambda a, b, w=w: _weighted_sum(nd.matmul(a, b), w), [r(5, 4), r(4, 3)]))
    w = _probe(rng, (4, 6))
    cases.append(("softmax_rows", lambda a, w=w: _weighted_sum(nd.softmax_rows(a), w), [r(4, 6)]))
    for direction in ("bl", "ur"):
        w = _probe(rng, (6, 5))
        cases.append((f"cumsum2d.{direction}",
                      lambda a, d=direction, w=w: _weighted_sum(nd.cumsum2d(a, d), w), [r(6, 5)]))
    w = _probe(rng, (3, 5, 5))
    cases.append(("conv2d", lambda x, k, b, w=w: _weighted_sum(nd.conv2d(x, k, b, 1, 1), w),
                  [r(2, 5, 5), r(3, 2, 3, 3), r(3)]))
    w = _probe(rng, (3, 3, 3))
    cases.append(("conv2d.stride2", lambda x, k, w=w: _weighted_sum(nd.conv2d(x, k, None, 2, 1), w),
                  [r(2, 5, 5), r(3, 2, 3, 3)]))
    w = _probe(rng, (2, 6, 4))
    cases.append(("upsample_nearest", lambda x, w=w: _weighted_sum(nd.upsample_nearest(x, 2), w),
                  [r(2, 3, 2)]))
    w = _probe(rng, (2, 2, 3))
    cases.append(("avg_pool2", lambda x, w=w: _weighted_sum(nd.avg_pool2(x), w), [r(2, 4, 6)]))
    w = _probe(rng, (4, 6))
    cases.append(("layer_norm_rows", lambda x, g, b, w=w: _weighted_sum(nd.layer_norm_rows(x, g, b), w),
                  [r(4, 6), r(6), r(6)]))
    w = _probe(rng, (4,))
    cases.append(("cosine_deviation_rows",
                  lambda e, ref, w=w: _weighted_sum(nd.cosine_deviation_rows(e, ref), w), [r(4, 3), r(3)]))
    w = _probe(rng, (3, 2))
    cases.append(("transpose_reshape",
                  lambda a, w=w: _weighted_sum(nd.reshape(nd.transpose(a, (2, 0, 1)), (3, 2)), w),
                  [r(1, 2, 3)]))
    w = _probe(rng, (4, 3))
    cases.append(("add_row", lambda x, b, w=w: _weighted_sum(nd.add_row(x, b), w), [r(4, 3), r(3)]))

    # region attention end to end on a 3x2 grid, d=3
    gw, gh, d = 3, 2, 3
    n = gw * gh
    probe = _probe(rng, (n, d))
    names = ("wq_glb", "wk_glb", "wv", "wq1", "wk1", "wq2", "wk2", "wq_loc", "wk_loc")

    def lra(x, *weights):
        p = AttentionParams(**dict(zip(names, weights)))
        regions = learnable_region_maps(coverage_maps(x, x, p), gw, gh)
        return _weighted_sum(attention_combined(x, x, x, p, regions), probe)

    cases.append(("attention_combined", lra, [r(n, d)] + [r(d, d) for _ in names]))

    feats = r(2, gw, gh)

    def lar(x, *weights):
        p = AttentionParams(**dict(zip(names, weights)))
        regions = learnable_region_maps(coverage_maps(x, x, p), gw, gh)
        return lar_regularizer(feats, [regions])

    cases.append(("lar_regularizer", lar, [r(n, d)] + [r(d, d) for _ in names]))

    def weighted(f, rt):
        wf = weighted_features(f, RegionMaps(rt, gw, gh))
        return _weighted_sum(wf.e, Tensor(np.arange(n * 2.0).reshape(n, 2))) + nd.tsum(wf.e_bar)

    cases.append(("weighted_features", weighted, [r(2, gw, gh), r(n, gw, gh)]))

    pts = rng.uniform(0, 16, (3, 2))
    post = posterior_map(pts, 4, 4, 4.0, 4.0)

    def deviations(dens):
        return _weighted_sum(instance_deviations(post, dens), Tensor([0.3, -1.2, 0.8]))

    cases.append(("instance_deviations", deviations, [Tensor(rng.uniform(0, 0.3, (4, 4)))]))
    return cases


def kink_margin(out: Tensor) -> float:
    """Smallest distance of any relu or abs input in the graph of ``out`` from its kink."""
    margin = math.inf
    for node in nd.Tape.record(out).nodes:
        if node.fn in (nd.Relu, nd.Abs):
            margin = min(margin, float(np.abs(node.parents[0].data).min()))
    return margin


def model_case(rng):
    """Full-model loss on a 16x16 scene with two annotations, every parameter checked.

    Central differences are only meaningful away from relu/abs kinks and away
    from ties in the instance mask, so the point is redrawn until every such
    quantity clears ``KINK_MARGIN``.
    """
    config = GRADCHECK_MODEL
    for _ in range(MAX_DRAWS):
        params = init_params(config, seed=int(rng.integers(2**31)))
        for name, p in params.items():
            if name.endswith(".b"):
                # zero biases park relu inputs exactly on the kink
                params[name] = Tensor(rng.normal(0.0, 0.1, p.shape))
        image = rng.uniform(0.0, 1.0, (16, 16))
        points = rng.uniform(1.0, 15.0, (2, 2))
        post = posterior_map(points, 4, 4, config.density_stride, 8.0)
        names = list(params)

        def loss(*tensors, image=image, post=post, names=names):
            model = CountingModel(config, dict(zip(names, tensors)))
            res = model(image)
            e = instance_deviations(post, res.density.grid)
            l_ia = instance_attention_loss(e, instance_mask(e, 0.9))
            return total_loss(l_ia, lar_regularizer(res.features, res.regions), 100.0)

        leaves = [Tensor(params[n].data, requires_grad=True) for n in names]
        out = loss(*leaves)
        e = np.sort(instance_deviations(post, CountingModel(config, params)(image).density.grid).data)
        margin = min(kink_margin(out), float(np.diff(e).min()) if e.size > 1 else math.inf)
        if margin > KINK_MARGIN:
            return "model", loss, [params[n] for n in names]
    raise EvaluationError(f"no kink-free check point in {MAX_DRAWS} draws")


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    if include_model:
        cases.append(model_case(rng))
    return [CheckResult(name, seed, nd.finite_diff_check(f, xs, STEP)) for name, f, xs in cases]


def gradcheck_cmd(seed: int = 0, out=print) -> int:
    """Run the suite for one seed; 0 iff every relative error is below tolerance."""
    results = run_suite(seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        out(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<24} seed={r.seed} max_rel_err={r.error:.3e}")
    if failed:
        out(f"{len(failed)} gradient check(s) failed: " + ", ".join(
            f"{r.name} (seed {r.seed}, {r.error:.3e})" for r in failed))
        return 1
    return 0

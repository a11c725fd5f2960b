"""Training, evaluation, sweeps, ablation and inference."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .attention import export_region_pgms
from .config import TrainConfig
from .errors import ConfigurationError, ParseError, TrainingDiverged, UsageError
from .lar import lar_regularizer
from .losses import (
    instance_attention_loss,
    instance_deviations,
    instance_mask,
    posterior_map,
    total_loss,
)
from .model import BACKBONE_STRIDE, CountingModel, load_checkpoint, save_checkpoint
from .synthcrowd import read_dataset, read_pgm, resolve_split, write_pgm

log = logging.getLogger(__name__)

LOSS_LOG = "loss_log.csv"
FINAL_CKPT = "model.mant"
INIT_CKPT = "init.mant"


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new = p.data - update
            new.flags.writeable = False
            p.data = new

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class StepLosses:
    l_ia: float
    r_lra: float
    total: float


def step_loss(model: CountingModel, image, posterior, config: TrainConfig):
    """Forward one scene; returns the differentiable total and the logged parts."""
    res = model(image)
    e = instance_deviations(posterior, res.density.grid)
    l_ia = instance_attention_loss(e, instance_mask(e, config.delta))
    if res.regions:
        r_lra = lar_regularizer(res.features, res.regions)
    else:
        r_lra = nd.Tensor(0.0)
    loss = total_loss(l_ia, r_lra, config.lam)
    return loss, StepLosses(l_ia.item(), r_lra.item(), loss.item())


def _check_grid(size_w: int, size_h: int, config: TrainConfig) -> None:
    if size_w % BACKBONE_STRIDE or size_h % BACKBONE_STRIDE:
        raise ConfigurationError(f"image {size_w}x{size_h} is not divisible by {BACKBONE_STRIDE}")
    gw, gh = size_w // BACKBONE_STRIDE, size_h // BACKBONE_STRIDE
    if gw > config.max_grid or gh > config.max_grid:
        raise ConfigurationError(
            f"token grid {gw}x{gh} exceeds max_grid={config.max_grid}; use smaller images"
        )


def _posteriors(scenes, model: CountingModel, config: TrainConfig):
    stride = model.config.density_stride
    out = []
    for s in scenes:
        h, w = s.image.shape
        out.append(posterior_map(s.points, w // stride, h // stride, stride, config.sigma))
    return out


def train(data_dir, config: TrainConfig, out_dir, progress=None) -> Path:
    """Train on ``data_dir`` (or its ``train`` split); returns the final checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = read_dataset(resolve_split(data_dir, "train"))
    if not scenes:
        raise UsageError(f"no training scenes in {data_dir}")
    for s in scenes:
        _check_grid(s.image.shape[1], s.image.shape[0], config)
    model = CountingModel(config.model_config(), seed=config.seed)
    posts = _posteriors(scenes, model, config)
    images = [nd.Tensor(s.image.T[None]) for s in scenes]
    opt = Adam(model.parameters(), config.lr, config.beta1, config.beta2, config.adam_eps)
    order_rng = np.random.default_rng(config.seed + 1)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    save_checkpoint(out / INIT_CKPT, model)

    order: list[int] = []
    with open(out / LOSS_LOG, "w", encoding="utf-8") as log_file:
        log_file.write("step,l_ia,r_lra,total\n")
        for step in range(1, config.steps + 1):
            if not order:
                order = order_rng.permutation(len(scenes)).tolist()
            idx = order.pop(0)
            loss, parts = step_loss(model, images[idx], posts[idx], config)
            if not math.isfinite(parts.total):
                dump = out / f"diverged_step{step}.json"
                dump.write_text(json.dumps({
                    "step": step,
                    "scene": idx,
                    "losses": asdict(parts),
                    "param_norms": {n: float(np.linalg.norm(p.data)) for n, p in model.params.items()},
                }, indent=1))
                raise TrainingDiverged(step, dump, "non-finite loss")
            opt.zero_grad()
            nd.backward(loss)
            opt.step()
            log_file.write(f"{step},{parts.l_ia!r},{parts.r_lra!r},{parts.total!r}\n")
            if step % config.checkpoint_every == 0 and step != config.steps:
                save_checkpoint(out / f"ckpt_{step:06d}.mant", model)
            if progress is not None:
                progress(step, parts)
    final = out / FINAL_CKPT
    save_checkpoint(final, model)
    return final


def count_metrics(gt, pred) -> tuple[float, float]:
    """MAE and root-mean-square error of predicted counts."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.size == 0:
        raise UsageError("cannot compute metrics over an empty test set")
    err = gt - pred
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


@dataclass
class EvalReport:
    gt: list[float]
    pred: list[float]
    mae: float
    mse: float
    config: dict = field(default_factory=dict)
    seconds: float = 0.0

    def write_csv(self, path) -> None:
        rows = ["index,gt,pred\n"]
        rows += [f"{k},{g!r},{p!r}\n" for k, (g, p) in enumerate(zip(self.gt, self.pred))]
        Path(path).write_text("".join(rows), encoding="utf-8")

    def line(self) -> str:
        return f"MAE={self.mae:.4f} MSE={self.mse:.4f}"


def evaluate_model(model: CountingModel, scenes) -> EvalReport:
    if not scenes:
        raise UsageError("empty test set")
    t0 = time.perf_counter()
    gt = [float(s.count) for s in scenes]
    pred = [model.predict_count(s.image) for s in scenes]
    mae, mse = count_metrics(gt, pred)
    cfg = model.config
    echo = {"d": cfg.d, "layers": cfg.layers, "use_lra": cfg.use_lra, "ffn_hidden": cfg.ffn_hidden}
    return EvalReport(gt, pred, mae, mse, echo, time.perf_counter() - t0)


def evaluate(data_dir, checkpoint) -> EvalReport:
    model = load_checkpoint(checkpoint)
    return evaluate_model(model, read_dataset(resolve_split(data_dir, "test")))


def delta_sweep(data_dir, config: TrainConfig, deltas, out_dir) -> list[tuple[float, float, float]]:
    """Train and evaluate one model per delta under identical seeds."""
    out = Path(out_dir)
    rows = []
    for delta in deltas:
        cfg = config.replace(delta=float(delta))
        ckpt = train(data_dir, cfg, out / f"delta_{delta}")
        report = evaluate(data_dir, ckpt)
        rows.append((float(delta), report.mae, report.mse))
    out.mkdir(parents=True, exist_ok=True)
    lines = ["delta,mae,mse\n"] + [f"{d!r},{a!r},{b!r}\n" for d, a, b in rows]
    (out / "delta_sweep.csv").write_text("".join(lines), encoding="utf-8")
    return rows


ABLATION_GRID = [
    (lra, lar, ial) for lra in (False, True) for lar in (False, True) for ial in (False, True)
]


def ablation_config(config: TrainConfig, lra: bool, lar: bool, ial: bool) -> TrainConfig:
    return config.replace(
        use_lra=lra,
        lam=config.lam if lar else 0.0,
        delta=config.delta if ial else 1.0,
    )


def ablate(data_dir, config: TrainConfig, out_dir) -> list[dict]:
    """Train the 2x2x2 grid of {LRA, LAR, IAL} on/off and report test metrics."""
    out = Path(out_dir)
    rows = []
    for lra, lar, ial in ABLATION_GRID:
        cfg = ablation_config(config, lra, lar, ial)
        tag = f"lra{int(lra)}_lar{int(lar)}_ial{int(ial)}"
        report = evaluate(data_dir, train(data_dir, cfg, out / tag))
        rows.append({"lra": lra, "lar": lar, "ial": ial, "lambda": cfg.lam, "delta": cfg.delta,
                     "mae": report.mae, "mse": report.mse})
    out.mkdir(parents=True, exist_ok=True)
    lines = ["lra,lar,ial,lambda,delta,mae,mse\n"]
    lines += [
        f"{int(r['lra'])},{int(r['lar'])},{int(r['ial'])},{r['lambda']!r},{r['delta']!r},"
        f"{r['mae']!r},{r['mse']!r}\n"
        for r in rows
    ]
    (out / "ablation.csv").write_text("".join(lines), encoding="utf-8")
    return rows


def write_density(prefix, density: np.ndarray) -> dict[str, Path]:
    """Write ``<prefix>.csv``, ``<prefix>.raw`` and a ``<prefix>.pgm`` preview of a (W', H') grid."""
    prefix = str(prefix)
    w, h = density.shape
    ys, xs = np.divmod(np.arange(w * h), w)
    flat = density.T.reshape(-1)
    paths = {"csv": Path(prefix + ".csv"), "raw": Path(prefix + ".raw"), "pgm": Path(prefix + ".pgm")}
    paths["csv"].write_text(
        "".join(f"{x},{y},{float(v)!r}\n" for x, y, v in zip(xs, ys, flat)), encoding="utf-8"
    )
    paths["raw"].write_bytes(b"MAND" + struct.pack("<II", w, h) + flat.astype("<f4").tobytes())
    lo, hi = float(flat.min()), float(flat.max())
    norm = (density.T - lo) / (hi - lo) if hi > lo else np.zeros((h, w))
    write_pgm(paths["pgm"], np.round(norm * 255).astype(np.uint8))
    return paths


def read_density_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != b"MAND":
        raise ParseError(path, 0, f"bad magic {buf[:4]!r}, expected b'MAND'")
    if len(buf) < 12:
        raise ParseError(path, len(buf), "truncated header")
    w, h = struct.unpack("<II", buf[4:12])
    if len(buf) != 12 + 4 * w * h:
        raise ParseError(path, len(buf), f"payload holds {len(buf) - 12} bytes, expected {4 * w * h}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w).T.copy()


def infer(checkpoint, image_file, out_prefix, probes=()) -> float:
    model = load_checkpoint(checkpoint)
    pixels = read_pgm(image_file)
    h, w = pixels.shape
    if w % BACKBONE_STRIDE or h % BACKBONE_STRIDE:
        pad_w = (-w) % BACKBONE_STRIDE
        pad_h = (-h) % BACKBONE_STRIDE
        raise UsageError(
            f"image is {w}x{h}; extents must be divisible by {BACKBONE_STRIDE} "
            f"(pad by {pad_w} columns and {pad_h} rows)"
        )
    with nd.no_grad():
        res = model(pixels.astype(np.float64) / 255.0)
    density = res.density.grid.data
    write_density(out_prefix, density)
    if probes and res.regions:
        export_region_pgms(res.regions[-1], probes, f"{out_prefix}_region")
    return float(density.sum())

"""Depth metrics, clear/corrupted benchmark runs and visual exports."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import ConfigError, TrainConfig
from .synthdata import Corruption, SamplePair, SynthDataset, apply_corruption, quantize, write_ppm
from .tensor import Tensor

METRIC_NAMES = ("AbsRel", "SqRel", "RMSE", "RMSElog", "a1", "a2", "a3")
# depth values are clamped into [MIN_EVAL_DEPTH, cap] before scoring
MIN_EVAL_DEPTH = 1e-3


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSet:
    AbsRel: float
    SqRel: float
    RMSE: float
    RMSElog: float
    a1: float
    a2: float
    a3: float

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, items: Sequence["MetricSet"]) -> "MetricSet":
        if not items:
            raise EvaluationError("cannot average an empty list of metrics")
        return cls(**{k: float(np.mean([getattr(m, k) for m in items])) for k in METRIC_NAMES})


def compute_metrics(pred: np.ndarray, gt: np.ndarray, cap: float, median_scale: bool = True) -> MetricSet:
    """Standard depth error and accuracy metrics over pixels with gt > 0.

    With ``median_scale`` the prediction is first multiplied by
    median(gt) / median(pred) over valid pixels.  Both maps are then clamped
    to (0, cap].
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    valid = np.isfinite(gt) & (gt > 0) & np.isfinite(pred)
    if not np.any(valid):
        raise EvaluationError("no valid ground-truth pixels")
    p = pred[valid]
    g = gt[valid]
    if median_scale:
        mp = np.median(p)
        if mp <= 0:
            raise EvaluationError("median of prediction is not positive; cannot median-scale")
        p = p * (np.median(g) / mp)
    p = np.clip(p, MIN_EVAL_DEPTH, cap)
    g = np.clip(g, MIN_EVAL_DEPTH, cap)
    ratio = np.maximum(p / g, g / p)
    return MetricSet(
        AbsRel=float(np.mean(np.abs(p - g) / g)),
        SqRel=float(np.mean((p - g) ** 2 / g)),
        RMSE=float(np.sqrt(np.mean((p - g) ** 2))),
        RMSElog=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25**2)),
        a3=float(np.mean(ratio < 1.25**3)),
    )


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------
Predictor = Callable[[np.ndarray, Sequence[SamplePair]], np.ndarray]


@dataclass
class BenchmarkReport:
    splits: dict[str, MetricSet]
    per_image: dict[str, list[MetricSet]]
    config_hash: str = ""
    checkpoint_id: str = ""
    median_scale: bool = True

    @property
    def deltas(self) -> dict[str, dict[str, float]]:
        """Corrupted minus clear for every non-clear split."""
        if "clear" not in self.splits:
            return {}
        base = self.splits["clear"].as_dict()
        return {
            name: {k: v - base[k] for k, v in m.as_dict().items()}
            for name, m in self.splits.items()
            if name != "clear"
        }

    def gap(self, split: str = "aug", metric: str = "AbsRel") -> float:
        return self.deltas[split][metric]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", *METRIC_NAMES, *[f"d_{k}" for k in METRIC_NAMES], "config_hash", "checkpoint"])
        deltas = self.deltas
        for name, m in self.splits.items():
            d = deltas.get(name)
            w.writerow([
                name,
                *[f"{getattr(m, k):.6f}" for k in METRIC_NAMES],
                *[("" if d is None else f"{d[k]:+.6f}") for k in METRIC_NAMES],
                self.config_hash,
                self.checkpoint_id,
            ])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{'split':<22}" + "".join(f"{k:>9}" for k in METRIC_NAMES) + f"{'dAbsRel':>10}"
        lines = [head, "-" * len(head)]
        deltas = self.deltas
        for name, m in self.splits.items():
            d = deltas.get(name, {}).get("AbsRel")
            lines.append(f"{name:<22}" + "".join(f"{getattr(m, k):>9.4f}" for k in METRIC_NAMES) + (f"{d:>+10.4f}" if d is not None else f"{'':>10}"))
        return "\n".join(lines)

    def to_plot_data(self) -> str:
        """Whitespace-separated ``level AbsRel`` rows per corruption kind."""
        rows = ["# kind level AbsRel dAbsRel"]
        deltas = self.deltas
        for name, m in self.splits.items():
            if "@" in name:
                kind, level = name.split("@")
                rows.append(f"{kind} {level} {m.AbsRel:.6f} {deltas[name]['AbsRel']:+.6f}")
        return "\n".join(rows) + "\n"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "benchmark.csv", "table": out / "benchmark.txt", "plot": out / "degradation.dat"}
        paths["csv"].write_text(self.to_csv())
        paths["table"].write_text(self.to_table() + "\n")
        paths["plot"].write_text(self.to_plot_data())
        return paths


def split_images(samples: Sequence[SamplePair], split: str) -> np.ndarray:
    """Input images for a benchmark split.

    ``clear`` and ``aug`` use the stored twins; ``<kind>@<level>`` applies
    that corruption to the clear image with a per-sample seed.
    """
    if split == "clear":
        return np.stack([s.image for s in samples])
    if split == "aug":
        return np.stack([s.image_aug for s in samples])
    if "@" in split:
        kind, level = split.split("@", 1)
        try:
            c = Corruption(kind, int(level))
        except ValueError as exc:
            raise EvaluationError(f"bad split {split!r}: {exc}") from None
        return np.stack([quantize(apply_corruption(s.image, c, s.seed ^ 0xC0FFEE, s.gt_depth)) for s in samples])
    raise EvaluationError(f"unknown split {split!r}; use clear, aug or <kind>@<level>")


def run_benchmark(
    predictor: Predictor,
    dataset: SynthDataset,
    splits: Sequence[str] = ("clear", "aug"),
    eval_split: str = "test",
    median_scale: bool = True,
    config_hash: str = "",
    checkpoint_id: str = "",
) -> BenchmarkReport:
    """Score ``predictor(images, samples) -> depth (N,1,H,W)`` on each split."""
    samples = dataset.split(eval_split)
    if not samples:
        raise EvaluationError(f"dataset has no {eval_split!r} samples")
    result: dict[str, MetricSet] = {}
    per_image: dict[str, list[MetricSet]] = {}
    for name in splits:
        images = split_images(samples, name)
        pred = predictor(images, samples)
        ms = [compute_metrics(pred[i], s.gt_depth, dataset.d_max, median_scale) for i, s in enumerate(samples)]
        per_image[name] = ms
        result[name] = MetricSet.mean(ms)
    return BenchmarkReport(result, per_image, config_hash, checkpoint_id, median_scale)


def checkpoint_predictor(ckpt: Checkpoint, dataset: SynthDataset, chunk: int = 16) -> Predictor:
    """Predictor running the full 20-step sampler of a checkpoint.

    Each image draws its initial noise from its own seed, so predictions do
    not depend on batch layout.
    """
    from .trainer import load_nets, predict_depth_seeded, schedule_for

    cfg = TrainConfig.from_dict(ckpt.config)
    trained_dmax = ckpt.meta.get("d_max")
    if trained_dmax is not None and abs(trained_dmax - dataset.d_max) > 1e-9:
        raise ConfigError(f"checkpoint was trained with d_max={trained_dmax}, dataset has d_max={dataset.d_max}")
    nets = load_nets(ckpt)
    sched = schedule_for(cfg)

    def predict(images: np.ndarray, samples: Sequence[SamplePair]) -> np.ndarray:
        seeds = np.array([s.seed for s in samples], dtype=np.int64)
        d = predict_depth_seeded(nets, images.astype(cfg.np_dtype), seeds, sched, logit_space=cfg.odr, salt=7, chunk=chunk)
        return d * dataset.d_max

    return predict


def benchmark_checkpoint(ckpt: Checkpoint, dataset: SynthDataset, splits: Sequence[str] = ("clear", "aug"),
                         median_scale: bool = True, eval_split: str = "test") -> BenchmarkReport:
    return run_benchmark(checkpoint_predictor(ckpt, dataset), dataset, splits, eval_split, median_scale,
                         ckpt.config_hash, ckpt.id)


# ---------------------------------------------------------------------------
# visuals
# ---------------------------------------------------------------------------
@dataclass
class VisualSet:
    files: dict[str, Path] = field(default_factory=dict)
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)


def _normalise(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo < 1e-12:
        return np.full_like(x, 0.5, dtype=np.float64), lo, hi
    return (x - lo) / (hi - lo), lo, hi


def export_visuals(
    path: str | Path,
    pred: np.ndarray,
    gt: np.ndarray,
    image: np.ndarray,
    image_aug: np.ndarray,
    feat: np.ndarray | None = None,
    refined: np.ndarray | None = None,
) -> VisualSet:
    """Write the panels of one sample into directory ``path``.

    Scalar maps are min-max normalised per image and saved as PGM; the
    ranges go to ``ranges.txt`` so the values can be recovered.  The
    feature panel is written only when ``feat`` is given.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create visual directory: {exc.strerror}") from None
    vs = VisualSet()
    scalars = {"depth_pred": pred, "depth_gt": gt}
    if feat is not None:
        scalars["feature"] = feat
    for name, arr in scalars.items():
        a = np.asarray(arr, dtype=np.float64).reshape(np.asarray(arr).shape[-2:])
        norm, lo, hi = _normalise(a)
        vs.files[name] = out / f"{name}.pgm"
        write_ppm(vs.files[name], norm[None])
        vs.ranges[name] = (lo, hi)
    colour = {"image": image, "image_aug": image_aug}
    if refined is not None:
        colour["refined"] = refined
    for name, arr in colour.items():
        vs.files[name] = out / f"{name}.ppm"
        write_ppm(vs.files[name], np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0))
    lines = ["# panel min max  (value = min + pixel/255 * (max - min))"]
    lines += [f"{k} {lo!r} {hi!r}" for k, (lo, hi) in vs.ranges.items()]
    sidecar = out / "ranges.txt"
    sidecar.write_text("\n".join(lines) + "\n")
    vs.files["ranges"] = sidecar
    return vs


def read_ranges(path: str | Path) -> dict[str, tuple[float, float]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        name, lo, hi = line.split()
        out[name] = (float(lo), float(hi))
    return out


def visuals_for_sample(ckpt: Checkpoint, sample: SamplePair, d_max: float, path: str | Path) -> VisualSet:
    """Forward one sample through a checkpoint and export its panels."""
    from .trainer import load_nets, predict_depth_seeded, schedule_for

    cfg = TrainConfig.from_dict(ckpt.config)
    nets = load_nets(ckpt)
    img = sample.image_aug[None].astype(cfg.np_dtype)
    with T.no_grad():
        refined = nets.refine_image(Tensor(img))
        _, feat = nets.build_condition(refined)
    depth = predict_depth_seeded(nets, img, [sample.seed], schedule_for(cfg), logit_space=cfg.odr, salt=7)[0] * d_max
    return export_visuals(path, depth, sample.gt_depth, sample.image, sample.image_aug,
                          feat.data[0] if cfg.fic else None, refined.data[0])

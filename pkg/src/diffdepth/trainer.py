"""Stage-0 bootstrap, stage-1 and stage-2 training loops.

Every stage runs the same pipeline: refine the image, build the condition
(image plus feature map), noise the pseudo-depth latent at a random step,
predict the noise, and turn the one-step clean estimate into depth for the
photometric, distillation and smoothness terms.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, TrainConfig
from .diffusion import (
    DiffusionSchedule,
    build_schedule,
    denoise_depth,
    from_latent,
    predict_z0,
    q_sample,
    to_latent,
)
from .geometry import CameraIntrinsics, synthesize_view
from .losses import (
    LOSS_TERMS,
    LossReport,
    adaptive_mask,
    ddim_loss,
    distill_loss,
    edge_aware_smoothness,
    min_photometric,
    photometric_loss,
    stage_loss,
    trinity_feature,
    trinity_image,
    trinity_noise,
)
from .networks import NetworkSet, freeze_teacher
from .optim import AdamW, clip_grad_norm
from .synthdata import SynthDataset
from .tensor import Tensor

log = logging.getLogger(__name__)

# depth handed to the warp never drops below this fraction of d_max
MIN_DEPTH_FRACTION = 1e-3
TEACHER_CHUNK = 16
# initial-noise salt for teacher pseudo-depth (evaluation uses a different one)
TEACHER_SALT = 1000


class TrainingDivergence(RuntimeError):
    """Raised when a loss term turns non-finite."""


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------
@dataclass
class TrainData:
    """Training split stacked into arrays of shape (N, C, H, W)."""

    images: np.ndarray
    images_aug: np.ndarray
    aux: list[np.ndarray]
    poses: list[list]  # poses[k][i]: target -> aux frame k for sample i
    seeds: np.ndarray
    K: CameraIntrinsics
    d_max: float

    @classmethod
    def from_dataset(cls, ds: SynthDataset, split: str = "train", dtype=np.float64) -> "TrainData":
        samples = ds.split(split)
        if not samples:
            raise ConfigError(f"dataset has no {split!r} samples")
        n_aux = len(samples[0].aux_images)
        return cls(
            images=np.stack([s.image for s in samples]).astype(dtype),
            images_aug=np.stack([s.image_aug for s in samples]).astype(dtype),
            aux=[np.stack([s.aux_images[k] for s in samples]).astype(dtype) for k in range(n_aux)],
            poses=[[s.poses[k] for s in samples] for k in range(n_aux)],
            seeds=np.array([s.seed for s in samples], dtype=np.int64),
            K=ds.K,
            d_max=ds.d_max,
        )

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class TeacherTargets:
    """Frozen-teacher outputs for every training sample."""

    pseudo: np.ndarray  # normalised depth in (0, 1), (N,1,H,W)
    ph_min: np.ndarray | None = None  # min photometric map under teacher depth
    feat: np.ndarray | None = None  # teacher feature map of the clear image


@dataclass
class Batch:
    image: np.ndarray
    image_aug: np.ndarray
    aux: list[np.ndarray]
    poses: list[list]
    pseudo: np.ndarray
    ph_min: np.ndarray | None
    feat: np.ndarray | None
    index: np.ndarray


@dataclass
class Draws:
    """The (tau, eps) pair shared by the clear and corrupted branches."""

    taus: np.ndarray
    eps: np.ndarray


def make_batch(data: TrainData, targets: TeacherTargets, idx: np.ndarray) -> Batch:
    return Batch(
        image=data.images[idx],
        image_aug=data.images_aug[idx],
        aux=[a[idx] for a in data.aux],
        poses=[[p[i] for i in idx] for p in data.poses],
        pseudo=targets.pseudo[idx],
        ph_min=None if targets.ph_min is None else targets.ph_min[idx],
        feat=None if targets.feat is None else targets.feat[idx],
        index=np.asarray(idx),
    )


def draw(rng: np.random.Generator, n: int, shape: tuple[int, ...], sched: DiffusionSchedule, dtype) -> Draws:
    taus = rng.integers(1, sched.T_train + 1, size=n)
    eps = rng.standard_normal((n,) + tuple(shape)).astype(dtype)
    return Draws(taus=taus, eps=eps)


def schedule_for(cfg: TrainConfig) -> DiffusionSchedule:
    return build_schedule(cfg.T_train, cfg.beta_start, cfg.beta_end, cfg.infer_steps)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------
def warp_all(image_target: Tensor, aux: list[np.ndarray], poses: list[list], depth: Tensor, K: CameraIntrinsics):
    """Synthesise the target from every clean auxiliary frame."""
    return [synthesize_view(Tensor(a), depth, p, K) for a, p in zip(aux, poses)]


def predict_depth(nets: NetworkSet, images: np.ndarray, sched: DiffusionSchedule, rng: np.random.Generator,
                  logit_space: bool = True) -> np.ndarray:
    """Full reverse-chain depth in (0, 1) for a batch of images (no gradients)."""
    with T.no_grad():
        refined = nets.refine_image(Tensor(images))
        cond, _ = nets.build_condition(refined)
    return denoise_depth(cond.data, nets, sched, rng, logit_space=logit_space)


def _per_sample_rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(salt)])


def predict_depth_seeded(nets: NetworkSet, images: np.ndarray, seeds, sched: DiffusionSchedule,
                         logit_space: bool = True, salt: int = 0, chunk: int = TEACHER_CHUNK) -> np.ndarray:
    """Sample depth image by image with a per-image RNG so results do not
    depend on batch composition."""
    out = []
    for start in range(0, len(images), chunk):
        sl = slice(start, start + chunk)
        with T.no_grad():
            refined = nets.refine_image(Tensor(images[sl]))
            cond, _ = nets.build_condition(refined)
        n, _, h, w = cond.shape
        z = np.stack([_per_sample_rng(s, salt).standard_normal((1, h, w)) for s in seeds[sl]]).astype(cond.dtype)
        out.append(_denoise_from(cond.data, z, nets, sched, logit_space))
    return np.concatenate(out)


def _denoise_from(cond: np.ndarray, z: np.ndarray, nets: NetworkSet, sched: DiffusionSchedule, logit_space: bool) -> np.ndarray:
    from .diffusion import ddim_step

    n = len(cond)
    cond_t = Tensor(cond)
    steps = list(sched.infer_steps)
    d = z
    for i in range(len(steps) - 1, -1, -1):
        tau = steps[i]
        tau_prev = steps[i - 1] if i > 0 else 0
        with T.no_grad():
            eps_hat = nets.predict_noise(Tensor(d), np.full(n, tau), cond_t).data
        d = ddim_step(d, eps_hat, tau, tau_prev, sched)
    return from_latent(d, logit_space)


def teacher_targets(teacher: NetworkSet, data: TrainData, cfg: TrainConfig, sched: DiffusionSchedule) -> TeacherTargets:
    """Pseudo-depth, min photometric map and features from the frozen teacher."""
    pseudo = predict_depth_seeded(teacher, data.images, data.seeds, sched, logit_space=cfg.odr, salt=TEACHER_SALT)
    ph_parts, feat_parts = [], []
    for start in range(0, len(data), TEACHER_CHUNK):
        sl = slice(start, start + TEACHER_CHUNK)
        with T.no_grad():
            img = Tensor(data.images[sl])
            depth = Tensor(np.maximum(pseudo[sl], MIN_DEPTH_FRACTION) * data.d_max)
            warps = warp_all(img, [a[sl] for a in data.aux], [p[sl] for p in data.poses], depth, data.K)
            ph, _ = min_photometric(img, warps, cfg.weights)
            _, feat = teacher.build_condition(teacher.refine_image(img))
        ph_parts.append(ph.data)
        feat_parts.append(feat.data)
    return TeacherTargets(pseudo=pseudo, ph_min=np.concatenate(ph_parts), feat=np.concatenate(feat_parts))


def bootstrap_targets(data: TrainData, dtype) -> TeacherTargets:
    """Stage-0 pseudo-depth cache: flat mid-range depth (latent 0)."""
    n, _, h, w = data.images.shape
    return TeacherTargets(pseudo=np.full((n, 1, h, w), 0.5, dtype=dtype))


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------
def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def compute_losses(
    nets: NetworkSet,
    batch: Batch,
    draws: Draws,
    cfg: TrainConfig,
    sched: DiffusionSchedule,
    K: CameraIntrinsics,
    d_max: float,
    epoch: int,
    berhu_c: float | None = None,
) -> tuple[Tensor, LossReport, dict]:
    """Build the stage loss for one batch.

    Returns the scalar loss, its report and a dict of intermediates
    (``depth`` and ``z0`` as ndarrays).  ``berhu_c`` pins the BerHu
    threshold, which is otherwise taken from the current residuals.
    """
    w = cfg.weights
    dtype = batch.image.dtype
    stage = cfg.stage
    img = Tensor(batch.image)
    refined = nets.refine_image(img)
    cond, feat = nets.build_condition(refined)

    z_pseudo = to_latent(batch.pseudo, cfg.odr)
    d_tau = Tensor(q_sample(z_pseudo, draws.taus, draws.eps, sched))
    levels = set(cfg.levels)
    mode = cfg.trinity_mode
    parts: dict = {k: None for k in LOSS_TERMS}

    if stage == 0:
        eps_used = nets.predict_noise(d_tau, draws.taus, cond)
        parts["nis"] = ddim_loss(eps_used, draws.eps)
        parts["dis"] = _zero(dtype)
    else:
        img_aug = Tensor(batch.image_aug)
        refined_aug = nets.refine_image(img_aug)
        cond_aug, feat_aug = nets.build_condition(refined_aug)
        eps_aug = nets.predict_noise(d_tau, draws.taus, cond_aug)
        eps_used = eps_aug
        if mode == "off" or "NIS" not in levels:
            parts["nis"] = ddim_loss(eps_aug, draws.eps)
        else:
            eps_clear = nets.predict_noise(d_tau, draws.taus, cond)
            parts["nis"] = trinity_noise(eps_aug, eps_clear, draws.eps, w, mode)
            if mode == "contrast":
                parts["nis"] = parts["nis"] + ddim_loss(eps_aug, draws.eps)

    z0 = predict_z0(d_tau, eps_used, draws.taus, sched)
    depth = from_latent(z0, cfg.odr)
    # the one-step estimate divides by sqrt(alpha_bar); past depth_tau_max it
    # is dominated by amplified noise, so those samples skip the depth terms
    sel = np.flatnonzero(draws.taus <= cfg.depth_tau_max)
    if len(sel) == 0:
        parts["ph"] = _zero(dtype)
        parts["edge"] = _zero(dtype)
        if stage >= 1:
            parts["dis"] = _zero(dtype)
    else:
        d_sel = depth if len(sel) == len(draws.taus) else depth[sel]
        d_pos = T.clamp(d_sel, MIN_DEPTH_FRACTION, None)
        img_sel = Tensor(batch.image[sel])
        warps = warp_all(img_sel, [a[sel] for a in batch.aux], [[p[i] for i in sel] for p in batch.poses], d_pos * d_max, K)
        parts["ph"] = photometric_loss(img_sel, warps, w)
        parts["edge"] = edge_aware_smoothness(d_pos, batch.image[sel])
        if stage >= 1:
            if cfg.pde:
                mask = adaptive_mask(batch.ph_min[sel], epoch, w.mask_lambda)
                parts["dis"] = distill_loss(d_sel, batch.pseudo[sel], mask, c=berhu_c, use_berhu=True)
            else:
                parts["dis"] = distill_loss(d_sel, batch.pseudo[sel], None, use_berhu=False)
    if stage == 2:
        on = mode != "off"
        parts["feat"] = trinity_feature(feat, feat_aug, batch.feat, w, mode) if on and "DF" in levels else _zero(dtype)
        parts["img"] = trinity_image(refined_aug, refined, batch.image, w, mode) if on and "IMG" in levels else _zero(dtype)

    total, report = stage_loss(stage, parts, w)
    for name, value in report.as_row().items():
        if value is not None and not np.isfinite(value):
            raise TrainingDivergence(f"stage {stage}: loss term {name} is {value} (epoch {epoch}, samples {batch.index.tolist()})")
    return total, report, {"depth": depth.data, "z0": z0.data}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
@dataclass
class TrainState:
    cfg: TrainConfig
    nets: NetworkSet
    teacher: NetworkSet | None
    optimizer: AdamW
    rng: np.random.Generator
    epoch: int = 0
    targets: TeacherTargets | None = None
    history: list | None = None
    d_max: float = 0.0
    image_size: tuple[int, int] = (0, 0)


def _trainable(nets: NetworkSet) -> list[tuple[str, Tensor]]:
    return list(nets.named_parameters())


def step(state: TrainState, batch: Batch, data: TrainData, sched: DiffusionSchedule) -> LossReport:
    """One optimiser update on ``batch``."""
    cfg = state.cfg
    n, _, h, w = batch.image.shape
    draws = draw(state.rng, n, (1, h, w), sched, batch.image.dtype)
    state.optimizer.zero_grad()
    total, report, inter = compute_losses(state.nets, batch, draws, cfg, sched, data.K, data.d_max, state.epoch + 1)
    total.backward()
    params = [p for _, p in state.optimizer.params]
    report.extras["grad_norm"] = clip_grad_norm(params, cfg.grad_clip)
    state.optimizer.step()
    if cfg.stage == 0:
        _refresh_bootstrap(state, batch, sched)
    return report


def _refresh_bootstrap(state: TrainState, batch: Batch, sched: DiffusionSchedule) -> None:
    """Move the stage-0 cache entries to the updated model's deterministic
    one-step estimate at ``bootstrap_tau``."""
    nets, cfg = state.nets, state.cfg
    tau = np.full(len(batch.index), cfg.bootstrap_tau)
    d_tau = q_sample(to_latent(batch.pseudo, cfg.odr), tau, 0.0, sched)
    with T.no_grad():
        cond, _ = nets.build_condition(nets.refine_image(Tensor(batch.image)))
        eps_hat = nets.predict_noise(Tensor(d_tau), tau, cond).data
    fresh = from_latent(predict_z0(d_tau, eps_hat, tau, sched), cfg.odr)
    state.targets.pseudo[batch.index] = np.clip(fresh, MIN_DEPTH_FRACTION, 1.0 - MIN_DEPTH_FRACTION)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def build_state(cfg: TrainConfig, data: TrainData, init: Checkpoint | None = None) -> TrainState:
    """Fresh training state; ``init`` supplies starting weights and, for
    stages 1 and 2, the teacher."""
    dtype = cfg.np_dtype
    nets = NetworkSet(seed=cfg.seed, fic=cfg.fic, width=cfg.width, dtype=dtype, alpha_bars=schedule_for(cfg).alpha_bars)
    teacher = None
    if cfg.stage > 0:
        if init is None:
            raise ConfigError(f"stage {cfg.stage} needs a stage-{cfg.stage - 1} checkpoint")
        if init.stage != cfg.stage - 1:
            raise ConfigError(f"stage {cfg.stage} needs a stage-{cfg.stage - 1} checkpoint, got stage {init.stage}")
        nets.load_state_dict(init.weights)
        teacher = freeze_teacher(nets)
    total_steps = cfg.epochs * steps_per_epoch(len(data), cfg.batch_size)
    opt = AdamW(_trainable(nets), lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=total_steps)
    rng = np.random.default_rng(cfg.seed)
    return TrainState(cfg=cfg, nets=nets, teacher=teacher, optimizer=opt, rng=rng, history=[])


def _check_compatible(cfg: TrainConfig, init: Checkpoint | None) -> None:
    if init is None:
        return
    prev = init.config
    for key in ("fic", "width", "odr"):
        if key in prev and prev[key] != getattr(cfg, key):
            raise ConfigError(f"config {key}={getattr(cfg, key)!r} does not match checkpoint {key}={prev[key]!r}")


def train(
    cfg: TrainConfig,
    dataset: SynthDataset,
    init: Checkpoint | None = None,
    resume: Checkpoint | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> Checkpoint:
    """Train one stage and return its final checkpoint.

    ``init`` is the previous stage's checkpoint (required for stages 1 and 2).
    ``resume`` continues an interrupted run of this same stage.
    """
    _check_compatible(cfg, init)
    data = TrainData.from_dataset(dataset, "train", cfg.np_dtype)
    sched = schedule_for(cfg)
    state = build_state(cfg, data, init)
    state.d_max = data.d_max
    state.image_size = tuple(int(v) for v in data.images.shape[2:])
    if resume is not None:
        _restore(state, resume)
    if state.targets is None:
        state.targets = teacher_targets(state.teacher, data, cfg, sched) if state.teacher is not None else bootstrap_targets(data, cfg.np_dtype)

    writer = None
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "a" if resume is not None else "w", newline="")
        writer = csv.writer(fh)
        if resume is None:
            writer.writerow(["step", "epoch", *LOSS_TERMS, "total"])
    try:
        while state.epoch < cfg.epochs:
            order = state.rng.permutation(len(data))
            for start in range(0, len(data), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                report = step(state, make_batch(data, state.targets, idx), data, sched)
                state.history.append(report)
                if writer is not None:
                    row = report.as_row()
                    writer.writerow([state.optimizer.step_count, state.epoch + 1, *[_fmt(row[k]) for k in LOSS_TERMS], _fmt(report.total)])
            state.epoch += 1
            log.info("stage %d epoch %d/%d loss %.5f", cfg.stage, state.epoch, cfg.epochs, _epoch_mean(state, data, cfg))
            if checkpoint_dir is not None:
                snapshot(state, init).save(Path(checkpoint_dir) / f"epoch{state.epoch:03d}.ckpt")
            if on_epoch is not None:
                on_epoch(state)
    finally:
        if fh is not None:
            fh.close()
    ckpt = snapshot(state, init)
    if cfg.stage == 0:
        ckpt.meta["bootstrap_gate"] = cfg.bootstrap_gate
    return ckpt


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _epoch_mean(state: TrainState, data: TrainData, cfg: TrainConfig) -> float:
    k = steps_per_epoch(len(data), cfg.batch_size)
    return float(np.mean([r.total for r in state.history[-k:]])) if state.history else float("nan")


def epoch_losses(history: list[LossReport], n: int, batch_size: int) -> list[float]:
    """Mean total loss per epoch."""
    k = steps_per_epoch(n, batch_size)
    return [float(np.mean([r.total for r in history[i : i + k]])) for i in range(0, len(history), k)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def snapshot(state: TrainState, init: Checkpoint | None = None) -> Checkpoint:
    cfg = state.cfg
    extras = {}
    if state.targets is not None:
        extras["targets.pseudo"] = state.targets.pseudo.copy()
        if state.targets.ph_min is not None:
            extras["targets.ph_min"] = state.targets.ph_min.copy()
            extras["targets.feat"] = state.targets.feat.copy()
    meta = {"parent": init.id if init is not None else None, "d_max": state.d_max, "image_size": list(state.image_size)}
    return Checkpoint(
        stage=cfg.stage,
        epoch=state.epoch,
        config=cfg.to_dict(),
        config_hash=cfg.hash(),
        seed=cfg.seed,
        weights=state.nets.state_dict(),
        optimizer=state.optimizer.state_dict(),
        optimizer_step=state.optimizer.step_count,
        rng_state=state.rng.bit_generator.state,
        teacher=state.teacher.state_dict() if state.teacher is not None else {},
        extras=extras,
        meta=meta,
    )


def _restore(state: TrainState, ckpt: Checkpoint) -> None:
    cfg = state.cfg
    if ckpt.stage != cfg.stage:
        raise CheckpointError(f"resume checkpoint is stage {ckpt.stage}, config is stage {cfg.stage}")
    if ckpt.config_hash != cfg.hash():
        raise CheckpointError(f"resume checkpoint config hash {ckpt.config_hash} != {cfg.hash()}")
    state.nets.load_state_dict(ckpt.weights)
    if state.teacher is not None and ckpt.teacher:
        state.teacher.load_state_dict(ckpt.teacher)
    state.optimizer.load_state_dict(ckpt.optimizer, ckpt.optimizer_step)
    state.rng.bit_generator.state = _decode_rng_state(ckpt.rng_state)
    state.epoch = ckpt.epoch
    if "targets.pseudo" in ckpt.extras:
        state.targets = TeacherTargets(
            pseudo=ckpt.extras["targets.pseudo"].copy(),
            ph_min=ckpt.extras.get("targets.ph_min"),
            feat=ckpt.extras.get("targets.feat"),
        )


def _decode_rng_state(s: dict) -> dict:
    # JSON turns the 128-bit PCG64 integers into plain ints already
    return s


def load_nets(ckpt: Checkpoint) -> NetworkSet:
    cfg = TrainConfig.from_dict(ckpt.config)
    nets = NetworkSet(seed=cfg.seed, fic=cfg.fic, width=cfg.width, dtype=cfg.np_dtype, alpha_bars=schedule_for(cfg).alpha_bars)
    nets.load_state_dict(ckpt.weights)
    return nets


def train_stage0(cfg: TrainConfig, dataset: SynthDataset, **kw) -> Checkpoint:
    if cfg.stage != 0:
        cfg = cfg.replace(stage=0)
    return train(cfg, dataset, **kw)


def train_stage1(cfg: TrainConfig, dataset: SynthDataset, teacher: Checkpoint, **kw) -> Checkpoint:
    if cfg.stage != 1:
        cfg = cfg.replace(stage=1)
    return train(cfg, dataset, init=teacher, **kw)


def train_stage2(cfg: TrainConfig, dataset: SynthDataset, stage1: Checkpoint, **kw) -> Checkpoint:
    if cfg.stage != 2:
        cfg = cfg.replace(stage=2)
    return train(cfg, dataset, init=stage1, **kw)

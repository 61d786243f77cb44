"""Noise schedule, forward noising and deterministic DDIM sampling of depth.

Depth in (0, 1) is diffused in logit space and squashed back with a
sigmoid, so sampled depth can never leave (0, 1) whatever the denoiser
outputs.  With ``logit_space=False`` the raw normalised depth is diffused
instead; this is the ablation that lets outliers through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOGIT_EPS = 1e-4


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray  # betas[s - 1] is beta_s
    alpha_bars: np.ndarray  # alpha_bars[tau], index 0 holds 1.0
    infer_steps: tuple[int, ...]

    @property
    def T_train(self) -> int:
        return len(self.betas)

    def alpha_bar(self, tau) -> np.ndarray:
        return self.alpha_bars[np.asarray(tau)]

    def to_dict(self) -> dict:
        return {
            "T_train": self.T_train,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
            "infer_count": len(self.infer_steps),
        }


def build_schedule(
    T_train: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    infer_count: int = 20,
) -> DiffusionSchedule:
    """Linear beta schedule with a uniform-stride inference subset ending at T."""
    if T_train < 1:
        raise ScheduleError(f"T_train must be >= 1, got {T_train}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not (1 <= infer_count <= T_train):
        raise ScheduleError(f"infer_count must be in [1, {T_train}], got {infer_count}")
    betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    return schedule_from_betas(betas, infer_count)


def schedule_from_betas(betas: np.ndarray, infer_count: int) -> DiffusionSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    n = len(betas)
    stride = n / infer_count
    steps = tuple(int(round(stride * (i + 1))) for i in range(infer_count))
    if len(set(steps)) != len(steps):
        raise ScheduleError("inference steps collide; lower infer_count")
    return DiffusionSchedule(betas, alpha_bars, steps)


# ---------------------------------------------------------------------------
# depth <-> latent
# ---------------------------------------------------------------------------
def to_latent(d, logit_space: bool = True):
    """Map normalised depth in (0, 1) to the diffusion latent.

    Input is clamped to [LOGIT_EPS, 1 - LOGIT_EPS] before the logit.
    Works on Tensors and ndarrays.
    """
    if not logit_space:
        return d
    if isinstance(d, Tensor):
        c = T.clamp(d, LOGIT_EPS, 1.0 - LOGIT_EPS)
        return T.log(c) - T.log(1.0 - c)
    c = np.clip(d, LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(c) - np.log1p(-c)


def from_latent(z, logit_space: bool = True):
    """Inverse of ``to_latent``; output lies in [LOGIT_EPS, 1 - LOGIT_EPS]."""
    if not logit_space:
        return z
    lim = float(np.log(1.0 - LOGIT_EPS) - np.log(LOGIT_EPS))
    if isinstance(z, Tensor):
        return T.sigmoid(T.clamp(z, -lim, lim))
    zc = np.clip(z, -lim, lim)
    return 1.0 / (1.0 + np.exp(-zc))


# ---------------------------------------------------------------------------
# forward / reverse process
# ---------------------------------------------------------------------------
def _per_sample(values: np.ndarray, ndim: int, dtype) -> np.ndarray:
    values = np.asarray(values, dtype=dtype)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (ndim - 1))


def _check_tau(tau, sched: DiffusionSchedule) -> None:
    t = np.asarray(tau)
    if np.any(t < 1) or np.any(t > sched.T_train):
        raise ScheduleError(f"tau out of range 1..{sched.T_train}: {tau}")


def q_sample(z0, tau, eps, sched: DiffusionSchedule):
    """Noisy latent sqrt(ab) * z0 + sqrt(1 - ab) * eps at step ``tau``.

    ``tau`` is an int or one int per batch item.
    """
    _check_tau(tau, sched)
    ndim = z0.ndim
    dtype = z0.dtype
    ab = _per_sample(sched.alpha_bar(tau), ndim, dtype)
    a = np.sqrt(ab)
    b = np.sqrt(1.0 - ab)
    return z0 * a + eps * b


def predict_z0(d_tau, eps_hat, tau, sched: DiffusionSchedule):
    """Clean-latent estimate (d_tau - sqrt(1 - ab) * eps_hat) / sqrt(ab)."""
    ab = _per_sample(sched.alpha_bar(tau), d_tau.ndim, d_tau.dtype)
    return (d_tau - eps_hat * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))


def ddim_step(d_tau, eps_hat, tau: int, tau_prev: int, sched: DiffusionSchedule):
    """Deterministic (sigma = 0) DDIM update from ``tau`` to ``tau_prev``.

    ``tau_prev == 0`` returns the clean-latent estimate itself.
    """
    if not (0 <= tau_prev < tau <= sched.T_train):
        raise ScheduleError(f"invalid step order tau={tau} -> tau_prev={tau_prev}")
    z0 = predict_z0(d_tau, eps_hat, tau, sched)
    if tau_prev == 0:
        return z0
    ab_prev = sched.alpha_bars[tau_prev]
    return z0 * np.sqrt(ab_prev) + eps_hat * np.sqrt(1.0 - ab_prev)


def sample_latent(
    denoiser: Callable,
    shape: tuple[int, ...],
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    dtype=np.float64,
    trajectory: list | None = None,
) -> np.ndarray:
    """Run the reverse chain from standard normal noise.

    ``denoiser(d_tau, tau) -> eps_hat`` works on ndarrays.  Randomness is
    consumed only for the initial latent.
    """
    d = rng.standard_normal(shape).astype(dtype)
    steps = list(sched.infer_steps)
    for i in range(len(steps) - 1, -1, -1):
        tau = steps[i]
        tau_prev = steps[i - 1] if i > 0 else 0
        eps_hat = denoiser(d, tau)
        d = ddim_step(d, eps_hat, tau, tau_prev, sched)
        if trajectory is not None:
            trajectory.append(d.copy())
    return d


def denoise_depth(
    condition: np.ndarray,
    denoiser,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    logit_space: bool = True,
) -> np.ndarray:
    """Sample normalised depth (N,1,H,W) for a batch of conditions (N,C,H,W).

    ``denoiser`` is a ConditionalDenoiser-like object exposing
    ``predict(d_tau, tau, condition) -> eps_hat`` on Tensors.
    """
    cond = condition.data if isinstance(condition, Tensor) else np.asarray(condition)
    n, _, h, w = cond.shape
    cond_t = Tensor(cond)

    def eps_fn(d, tau):
        with T.no_grad():
            taus = np.full(n, tau, dtype=np.int64)
            return denoiser.predict_noise(Tensor(d), taus, cond_t).data

    z0 = sample_latent(eps_fn, (n, 1, h, w), sched, rng, dtype=cond.dtype)
    return from_latent(z0, logit_space)

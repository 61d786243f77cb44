"""Learnable components: feature extractor, conditional denoiser, refiner.

All three are small conv nets over NCHW batches whose spatial size is
divisible by 4.  The denoiser's and refiner's last layers start at zero, so
a fresh denoiser predicts zero noise and a fresh refiner is the identity.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .diffusion import build_schedule
from .nn import Conv2d, Linear, Module, _param
from .tensor import Tensor

TIME_EMBED_DIM = 16
SKIP_RATE = 100.0


def timestep_embedding(taus, dim: int = TIME_EMBED_DIM, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding, shape (N, dim)."""
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = taus[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def _check_image(op: str, x: Tensor, channels: int) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise T.ShapeError(op, x.shape, detail=f"expected N x {channels} x H x W")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise T.ShapeError(op, x.shape, detail="H and W must be divisible by 4")


class FeatureExtractor(Module):
    """Image (N,3,H,W) -> one-channel depth feature (N,1,H,W)."""

    def __init__(self, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.c1 = Conv2d(3, 8, rng, dtype=dtype)
        self.c2 = Conv2d(8, 16, rng, stride=2, dtype=dtype)
        self.c3 = Conv2d(16, 16, rng, dtype=dtype)
        self.c4 = Conv2d(16, 1, rng, dtype=dtype)

    def forward(self, image: Tensor) -> Tensor:
        _check_image("FeatureExtractor", image, 3)
        h = T.elu(self.c1(image))
        h = T.elu(self.c2(h))
        h = T.elu(self.c3(h))
        return self.c4(T.upsample2x(h))


class ConditionalDenoiser(Module):
    """Two-level UNet predicting the noise in a one-channel latent.

    Input is the noisy latent concatenated with the condition; the timestep
    embedding is projected and added at every encoder scale.

    The UNet output ``u`` is mixed with the noisy latent as
    ``eps = skip * sqrt(1 - abar) * d_tau - sqrt(abar) * u``.  With
    ``skip = 1`` this is velocity prediction, whose implied clean latent
    ``sqrt(abar) * d_tau + sqrt(1 - abar) * u`` stays well conditioned at
    large steps where plain noise prediction barely depends on the
    condition.  ``skip`` is a learned scalar that starts at zero, so a
    fresh denoiser with a zeroed last layer still predicts exactly zero.
    The gain is ``min(SKIP_RATE * skip, 1)``: the rate lets it reach
    one within a few dozen optimizer steps, and the upper bound keeps it
    from overshooting, since any gain other than one leaves an amplified
    copy of the noisy latent in the clean-latent estimate at large steps.
    """

    def __init__(
        self,
        cond_channels: int,
        rng: np.random.Generator,
        width: int = 16,
        zero_final: bool = True,
        dtype=np.float64,
        alpha_bars: np.ndarray | None = None,
    ):
        super().__init__()
        if alpha_bars is None:
            alpha_bars = build_schedule().alpha_bars
        self.alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        self.skip = _param(np.zeros(1, dtype=dtype))
        w, w2 = width, 2 * width
        self.cond_channels = cond_channels
        self.inc = Conv2d(1 + cond_channels, w, rng, dtype=dtype)
        self.down1 = Conv2d(w, w2, rng, stride=2, dtype=dtype)
        self.down2 = Conv2d(w2, w2, rng, stride=2, dtype=dtype)
        self.mid = Conv2d(w2, w2, rng, dtype=dtype)
        self.up1 = Conv2d(w2 + w2, w, rng, dtype=dtype)
        self.up2 = Conv2d(w + w, w, rng, dtype=dtype)
        self.out = Conv2d(w, 1, rng, zero=zero_final, dtype=dtype)
        self.t0 = Linear(TIME_EMBED_DIM, w, rng, dtype=dtype)
        self.t1 = Linear(TIME_EMBED_DIM, w2, rng, dtype=dtype)
        self.t2 = Linear(TIME_EMBED_DIM, w2, rng, dtype=dtype)

    def forward(self, d_tau: Tensor, taus, cond: Tensor) -> Tensor:
        if d_tau.ndim != 4 or d_tau.shape[1] != 1:
            raise T.ShapeError("ConditionalDenoiser", d_tau.shape, detail="latent must be N x 1 x H x W")
        _check_image("ConditionalDenoiser", cond, self.cond_channels)
        if cond.shape[0] != d_tau.shape[0] or cond.shape[2:] != d_tau.shape[2:]:
            raise T.ShapeError("ConditionalDenoiser", d_tau.shape, cond.shape)
        n = d_tau.shape[0]
        taus = np.broadcast_to(np.asarray(taus), (n,))
        emb = Tensor(timestep_embedding(taus, dtype=d_tau.dtype))

        def tproj(layer):
            e = layer(emb)
            return T.reshape(e, (n, e.shape[1], 1, 1))

        x = T.concat([d_tau, cond], axis=1)
        h0 = T.elu(self.inc(x) + tproj(self.t0))
        h1 = T.elu(self.down1(h0) + tproj(self.t1))
        h2 = T.elu(self.down2(h1) + tproj(self.t2))
        m = T.elu(self.mid(h2))
        u1 = T.elu(self.up1(T.concat([T.upsample2x(m), h1], axis=1)))
        u2 = T.elu(self.up2(T.concat([T.upsample2x(u1), h0], axis=1)))
        if np.any(taus < 1) or np.any(taus >= len(self.alpha_bars)):
            raise ValueError(f"timesteps must lie in 1..{len(self.alpha_bars) - 1}")
        ab = self.alpha_bars[taus.astype(int)].reshape(n, 1, 1, 1)
        noise_coef = Tensor(np.sqrt(1.0 - ab).astype(d_tau.dtype))
        latent_coef = Tensor(np.sqrt(ab).astype(d_tau.dtype))
        gain = T.clamp(self.skip * SKIP_RATE, None, 1.0)
        return gain * noise_coef * d_tau - latent_coef * self.out(u2)

    predict_noise = forward


class Refiner(Module):
    """Down-up conv net whose output is added back to its input image."""

    def __init__(self, rng: np.random.Generator, width: int = 8, zero_final: bool = True, dtype=np.float64):
        super().__init__()
        self.d1 = Conv2d(3, width, rng, stride=2, dtype=dtype)
        self.d2 = Conv2d(width, width, rng, stride=2, dtype=dtype)
        self.u1 = Conv2d(width, width, rng, dtype=dtype)
        self.u2 = Conv2d(width, 3, rng, zero=zero_final, dtype=dtype)

    def forward(self, image: Tensor) -> Tensor:
        _check_image("Refiner", image, 3)
        h = T.elu(self.d1(image))
        h = T.elu(self.d2(h))
        h = T.elu(self.u1(T.upsample2x(h)))
        return self.u2(T.upsample2x(h)) + image


class NetworkSet(Module):
    """Feature extractor + denoiser + refiner trained together.

    With ``fic`` the denoiser is conditioned on image and feature map
    (4 channels); without it, on the image alone (3 channels).
    """

    def __init__(
        self,
        seed: int = 0,
        fic: bool = True,
        width: int = 16,
        zero_final: bool = True,
        dtype=np.float64,
        alpha_bars: np.ndarray | None = None,
    ):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fic = fic
        self.extractor = FeatureExtractor(rng, dtype=dtype)
        self.denoiser = ConditionalDenoiser(
            4 if fic else 3, rng, width=width, zero_final=zero_final, dtype=dtype, alpha_bars=alpha_bars
        )
        self.refiner = Refiner(rng, zero_final=zero_final, dtype=dtype)

    def build_condition(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Return the denoiser condition and the feature map."""
        feat = self.extractor(image)
        if not self.fic:
            return image, feat
        return T.concat([image, feat], axis=1), feat

    def predict_noise(self, d_tau: Tensor, taus, cond: Tensor) -> Tensor:
        return self.denoiser(d_tau, taus, cond)

    def refine_image(self, image: Tensor) -> Tensor:
        return self.refiner(image)


def freeze_teacher(student: NetworkSet) -> NetworkSet:
    """Frozen deep copy of ``student``; it never builds autodiff nodes."""
    return student.frozen_copy()

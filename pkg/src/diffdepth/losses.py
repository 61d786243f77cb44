"""Loss terms and their stage compositions.

Every reduction is a mean over valid pixels; a reduction over an empty
mask is defined as 0.  Images are NCHW in [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    ph_ssim: float = 0.85
    ph_l1: float = 0.15
    mask_lambda: float = 1.5
    nis_pair: float = 0.5  # eta_1
    nis_anchor: float = 1.0  # eta_2
    feat_pair: float = 1.0  # omega_1
    feat_anchor: float = 0.5  # omega_2
    img_anchor: float = 1.0  # beta_1
    img_pair: float = 0.5  # beta_2
    edge: float = 1e-3  # rho
    multilevel: float = 0.5  # theta
    # stage-0 weight on the noise-regression term; its target is the
    # model's own refreshed estimate, which at full weight pins the depth
    # to the constant initial cache faster than the photometric term moves it
    bootstrap_nis: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossWeights":
        d = d or {}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**d)


LOSS_TERMS = ("ph", "dis", "nis", "feat", "img", "edge")


@dataclass
class LossReport:
    ph: float | None = None
    dis: float | None = None
    nis: float | None = None
    feat: float | None = None
    img: float | None = None
    edge: float | None = None
    total: float | None = None
    stage: int = 1
    extras: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {k: getattr(self, k) for k in LOSS_TERMS}
        row["total"] = self.total
        return row

    def recompute_total(self, w: LossWeights) -> float:
        parts = {k: (getattr(self, k) or 0.0) for k in LOSS_TERMS}
        return compose_stage(self.stage, parts, w)


def masked_mean(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over entries where ``mask`` is 1 (broadcast over channels)."""
    if mask is None:
        return T.mean(x)
    m = np.broadcast_to(mask, x.shape).astype(x.dtype)
    count = float(m.sum())
    if count == 0:
        return T.Tensor(np.zeros((), dtype=x.dtype))
    return T.sum_(x * m) * (1.0 / count)


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------
def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Per-pixel SSIM from 3x3 local statistics (reflection padded)."""
    xp = T.pad_reflect(x, 1)
    yp = T.pad_reflect(y, 1)
    mu_x = T.avg_pool3x3(xp)
    mu_y = T.avg_pool3x3(yp)
    sigma_x = T.avg_pool3x3(xp * xp) - mu_x * mu_x
    sigma_y = T.avg_pool3x3(yp * yp) - mu_y * mu_y
    sigma_xy = T.avg_pool3x3(xp * yp) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return num / den


def photometric_map(target: Tensor, warped: Tensor, w: LossWeights | None = None) -> Tensor:
    """Per-pixel (N,1,H,W) map w1 * (1 - SSIM) / 2 + w2 * |I - I_warp|."""
    w = w or LossWeights()
    if target.shape != warped.shape:
        raise T.ShapeError("photometric", target.shape, warped.shape)
    s = T.clamp((1.0 - ssim(target, warped)) * 0.5, 0.0, 1.0)
    l1 = T.abs_(target - warped)
    per_channel = s * w.ph_ssim + l1 * w.ph_l1
    return T.mean(per_channel, axis=1, keepdims=True)


def min_photometric(target: Tensor, warps: Sequence[tuple[Tensor, np.ndarray]], w: LossWeights | None = None) -> tuple[Tensor, np.ndarray]:
    """Per-pixel minimum of photometric maps over auxiliary frames.

    Invalid warps are excluded from the minimum; the returned mask marks
    pixels valid in at least one frame.
    """
    maps = []
    masks = []
    for warped, mask in warps:
        pm = photometric_map(target, warped, w)
        # push invalid pixels above any real value so min skips them
        maps.append(pm + (1.0 - mask) * 1e3)
        masks.append(mask)
    valid = np.clip(np.sum(masks, axis=0), 0, 1)
    if len(maps) == 1:
        return maps[0], valid
    return T.minimum(maps), valid


def photometric_loss(target: Tensor, warps: Sequence[tuple[Tensor, np.ndarray]], w: LossWeights | None = None) -> Tensor:
    pm, valid = min_photometric(target, warps, w)
    return masked_mean(pm, valid)


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------
def adaptive_mask(ph_maps: Sequence[np.ndarray] | np.ndarray, epoch: int, lam: float = 1.5) -> np.ndarray:
    """1 where the min photometric error over aux frames is below lam / epoch."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    arr = np.asarray(ph_maps.data if isinstance(ph_maps, Tensor) else ph_maps)
    if isinstance(ph_maps, (list, tuple)):
        arr = np.min(np.stack([np.asarray(p.data if isinstance(p, Tensor) else p) for p in ph_maps]), axis=0)
    return (arr < lam / epoch).astype(arr.dtype)


def berhu_threshold(e: np.ndarray) -> float:
    return max(0.2 * float(np.max(np.abs(e))), 1e-8)


def berhu(e: Tensor, c: float | None = None) -> Tensor:
    """Reverse Huber: |e| up to c, (e^2 + c^2) / 2c above it."""
    if c is None:
        c = berhu_threshold(e.data)
    if c <= 0:
        raise ValueError("berhu threshold must be positive")
    a = T.abs_(e)
    quad = (T.square(e) + c * c) * (1.0 / (2.0 * c))
    small = (a.data <= c).astype(e.dtype)
    return a * small + quad * (1.0 - small)


def distill_loss(d_student: Tensor, d_teacher, mask: np.ndarray | None = None, c: float | None = None, use_berhu: bool = True) -> Tensor:
    """Mask-weighted mean BerHu (or L1) error against detached teacher depth."""
    teacher = d_teacher.data if isinstance(d_teacher, Tensor) else np.asarray(d_teacher)
    e = d_student - teacher
    per_px = berhu(e, c) if use_berhu else T.abs_(e)
    if mask is not None and not np.any(mask):
        return T.Tensor(np.zeros((), dtype=e.dtype))
    return masked_mean(per_px, mask)


# ---------------------------------------------------------------------------
# trinity contrasts
# ---------------------------------------------------------------------------
def _mse(a: Tensor, b) -> Tensor:
    return T.mean(T.square(a - b))


def _l1(a: Tensor, b) -> Tensor:
    return T.mean(T.abs_(a - b))


def _const(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def trinity_noise(eps_aug: Tensor, eps_clear: Tensor, eps, w: LossWeights | None = None, mode: str = "trinity") -> Tensor:
    """eta1 * |e_aug - e_clr|^2 + eta2 * (|e_aug - eps|^2 + |e_clr - eps|^2).

    ``mode='distill'`` keeps only the anchor terms and ``mode='contrast'``
    only the pairwise term; the sampled noise never receives gradient.
    """
    w = w or LossWeights()
    eps = _const(eps)
    pair = _mse(eps_aug, eps_clear)
    anchor = _mse(eps_aug, eps) + _mse(eps_clear, eps)
    if mode == "trinity":
        return pair * w.nis_pair + anchor * w.nis_anchor
    if mode == "distill":
        return anchor * w.nis_anchor
    if mode == "contrast":
        return pair * w.nis_pair
    raise ValueError(f"unknown trinity mode {mode!r}")


def ddim_loss(eps_hat: Tensor, eps) -> Tensor:
    """Plain noise-regression loss ||eps - eps_hat||^2 (mean)."""
    return _mse(eps_hat, _const(eps))


def trinity_feature(f_clear: Tensor, f_aug: Tensor, f_teacher, w: LossWeights | None = None, mode: str = "trinity") -> Tensor:
    """w1 * |F(I) - F(I_aug)| + w2 * (|F_T(I) - F(I)| + |F_T(I) - F(I_aug)|)."""
    w = w or LossWeights()
    ft = _const(f_teacher)
    pair = _l1(f_clear, f_aug)
    anchor = _l1(f_clear, ft) + _l1(f_aug, ft)
    if mode == "trinity":
        return pair * w.feat_pair + anchor * w.feat_anchor
    if mode == "distill":
        return anchor * w.feat_anchor
    if mode == "contrast":
        return pair * w.feat_pair
    raise ValueError(f"unknown trinity mode {mode!r}")


def trinity_image(refined_aug: Tensor, refined_clear: Tensor, clear, w: LossWeights | None = None, mode: str = "trinity") -> Tensor:
    """b1 * (|I'_aug - I| + |I' - I|) + b2 * |I'_aug - I'|.

    The anchor terms carry beta_1 and the pairwise term beta_2.
    """
    w = w or LossWeights()
    img = _const(clear)
    anchor = _l1(refined_aug, img) + _l1(refined_clear, img)
    pair = _l1(refined_aug, refined_clear)
    if mode == "trinity":
        return anchor * w.img_anchor + pair * w.img_pair
    if mode == "distill":
        return anchor * w.img_anchor
    if mode == "contrast":
        return pair * w.img_pair
    raise ValueError(f"unknown trinity mode {mode!r}")


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------
def edge_aware_smoothness(d: Tensor, image) -> Tensor:
    """mean(|dx d*| e^{-|dx I|}) + mean(|dy d*| e^{-|dy I|}), d* = d / mean(d).

    Image gradients are averaged over channels.
    """
    img = _const(image)
    mean_d = d.data.mean(axis=(1, 2, 3), keepdims=True)
    if np.any(mean_d <= 0):
        raise ValueError("edge_aware_smoothness: depth must have positive mean")
    dn = d / T.mean(d, axis=(1, 2, 3), keepdims=True)
    total = T.Tensor(np.zeros((), dtype=d.dtype))
    if d.shape[-1] > 1:
        gx_i = np.abs(img[..., 1:] - img[..., :-1]).mean(axis=1, keepdims=True)
        total = total + T.mean(T.abs_(T.diff_x(dn)) * np.exp(-gx_i))
    if d.shape[-2] > 1:
        gy_i = np.abs(img[..., 1:, :] - img[..., :-1, :]).mean(axis=1, keepdims=True)
        total = total + T.mean(T.abs_(T.diff_y(dn)) * np.exp(-gy_i))
    return total


# ---------------------------------------------------------------------------
# stage composition
# ---------------------------------------------------------------------------
STAGE_PARTS = {
    1: ("nis", "dis", "ph", "edge"),
    2: ("nis", "dis", "ph", "edge", "feat", "img"),
}


def compose_stage(stage: int, parts: dict, w: LossWeights | None = None):
    """L1 = nis + dis + ph + rho * edge;  L2 = L1 + theta * (feat + img).

    Works on floats or Tensors.  Stage 0 (teacher bootstrap) composes like
    stage 1 with the ``nis`` slot holding the plain noise-regression loss,
    scaled by ``w.bootstrap_nis``.
    """
    w = w or LossWeights()
    key = 1 if stage == 0 else stage
    if key not in STAGE_PARTS:
        raise ValueError(f"unknown stage {stage}")
    missing = [k for k in STAGE_PARTS[key] if parts.get(k) is None]
    if missing:
        raise KeyError(f"stage {stage} loss is missing parts: {missing}")
    nis = parts["nis"] * w.bootstrap_nis if stage == 0 else parts["nis"]
    total = nis + parts["dis"] + parts["ph"] + parts["edge"] * w.edge
    if key == 2:
        total = total + (parts["feat"] + parts["img"]) * w.multilevel
    return total


def stage_loss(stage: int, parts: dict, w: LossWeights | None = None) -> tuple[object, LossReport]:
    total = compose_stage(stage, parts, w)

    def val(x):
        if x is None:
            return None
        return float(x.data) if isinstance(x, Tensor) else float(x)

    report = LossReport(stage=stage, **{k: val(parts.get(k)) for k in LOSS_TERMS})
    report.total = val(total)
    return total, report

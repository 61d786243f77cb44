"""Procedural scenes with exact depth, exact poses and RGB corruptions.

A scene is a ground plane, a slanted back wall and a few boxes, each with a
smooth solid texture defined in 3-D so every view of the scene sees the
same surface colours.  Views are ray-cast analytically: depth comes from
the ray through each pixel centre and is exact, while colour averages a
few sub-pixel rays.

On disk a dataset is a directory holding ``manifest.json``, 8-bit PPM
images and depth maps in the tensor blob format.  Images are quantised to
8 bits at generation time so that a saved and reloaded dataset is
identical to the in-memory one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import geometry as G
from .geometry import CameraIntrinsics, Pose, rotation_matrix
from .tensor import Tensor, load_tensor, save_tensor

CORRUPTION_KINDS = ("gaussian_noise", "blur", "brightness_contrast", "rain_streaks", "fog")
MANIFEST_FORMAT = "diffdepth-synth/1"

NOISE_SIGMA = (0.02, 0.04, 0.06, 0.08, 0.10)
BLUR_SIGMA = (0.5, 0.75, 1.0, 1.25, 1.5)
CONTRAST = (0.9, 0.8, 0.7, 0.6, 0.5)
BRIGHTNESS = (0.04, 0.08, 0.12, 0.16, 0.2)
RAIN_DENSITY = (0.004, 0.008, 0.012, 0.016, 0.02)
FOG_K = (0.05, 0.1, 0.15, 0.2, 0.3)
FOG_AIRLIGHT = 0.8
# Gaussian texture prefilter width, in pixels of the rendering camera
TEXTURE_FILTER_PX = 0.5


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    pass


# ---------------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------------
@dataclass
class Plane:
    normal: np.ndarray  # unit normal n, surface is n . X = offset
    offset: float
    color: np.ndarray
    texture: "SolidTexture"


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray
    texture: "SolidTexture"


@dataclass
class SolidTexture:
    freqs: np.ndarray  # (k, 3) spatial angular frequencies
    phases: np.ndarray  # (k,)
    amps: np.ndarray  # (k,)

    def __call__(self, pts: np.ndarray, footprint: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
        """Texture value in [-1, 1] at points (n, 3).

        ``footprint`` holds the world-space offsets (n, 3) spanned by one
        pixel step in u and in v.  Each wave is then attenuated by a
        Gaussian in its phase change across the pixel, which band-limits
        the texture the way mip-mapping does.
        """
        waves = np.sin(pts @ self.freqs.T + self.phases)
        if footprint is not None:
            du, dv = footprint
            phase_step = (du @ self.freqs.T) ** 2 + (dv @ self.freqs.T) ** 2
            waves = waves * np.exp(-0.5 * TEXTURE_FILTER_PX**2 * phase_step)
        return (waves @ self.amps) / max(float(np.abs(self.amps).sum()), 1e-12)

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 4, scale: float = 1.0) -> "SolidTexture":
        """Sum of ``k`` plane waves; ``scale`` stretches every wavelength."""
        wavelengths = rng.uniform(1.2, 4.0, size=k) * scale
        dirs = rng.normal(size=(k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(dirs * (2 * np.pi / wavelengths)[:, None], rng.uniform(0, 2 * np.pi, k), rng.uniform(0.5, 1.0, k))


@dataclass
class Scene:
    planes: list[Plane]
    boxes: list[Box]
    d_min: float
    d_max: float

    def cast(self, origin: np.ndarray, dirs: np.ndarray,
             pixel_step: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Ray parameter and RGB of the first hit for rays ``origin + s * dirs``.

        ``dirs`` has shape (..., 3); when its camera-frame z component is 1,
        ``s`` equals the camera-frame depth.  ``pixel_step`` gives the change
        of a ray direction for one pixel in u and in v; with it, textures
        are filtered over the pixel footprint.
        """
        shape = dirs.shape[:-1]
        d = dirs.reshape(-1, 3)
        best = np.full(d.shape[0], np.inf)
        color = np.zeros((d.shape[0], 3))

        def shade(hit, s, normal, surface):
            pts = origin + s[hit, None] * d[hit]
            footprint = None
            if pixel_step is not None:
                footprint = tuple(_surface_step(step, d[hit], s[hit], normal) for step in pixel_step)
            color[hit] = _shade(surface.color, surface.texture, pts, footprint)

        for pl in self.planes:
            denom = d @ pl.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (pl.offset - origin @ pl.normal) / denom
            s = np.where((denom != 0) & (s > 1e-6), s, np.inf)
            hit = s < best
            if np.any(hit):
                best = np.where(hit, s, best)
                shade(hit, s, pl.normal, pl)
        for bx in self.boxes:
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t1 = (bx.lo - origin) * inv
                t2 = (bx.hi - origin) * inv
            near = np.minimum(t1, t2)
            tmin = np.nanmax(near, axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            s = np.where((tmax >= tmin) & (tmin > 1e-6), tmin, np.inf)
            hit = s < best
            if np.any(hit):
                best = np.where(hit, s, best)
                # the entry face is the slab whose near crossing is latest
                normals = np.eye(3)[np.nanargmax(near[hit], axis=1)]
                shade(hit, s, normals, bx)
        return best.reshape(shape), color.reshape(shape + (3,))


def _surface_step(step: np.ndarray, d: np.ndarray, s: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """World-space offset on the hit surface for a ray-direction change ``step``.

    Differentiating X = o + s d with the hit constrained to the surface
    (normal n) gives dX = s (step - (step . n) / (d . n) d).
    """
    n = np.broadcast_to(normal, d.shape)
    dn = np.einsum("ij,ij->i", d, n)
    sn = n @ step if n.ndim == 1 else np.einsum("ij,j->i", n, step)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.abs(dn) > 1e-9, sn / dn, 0.0)
    return s[:, None] * (step[None, :] - ratio[:, None] * d)


def _shade(base: np.ndarray, tex: SolidTexture, pts: np.ndarray, footprint=None) -> np.ndarray:
    v = tex(pts, footprint)[:, None]
    return np.clip(base[None, :] * (0.65 + 0.35 * v) + 0.08 * v, 0.0, 1.0)


def random_scene(rng: np.random.Generator, d_max: float = 10.0, cam_height: float = 1.2, texture_scale: float = 1.0) -> Scene:
    colors = lambda: rng.uniform(0.25, 0.85, size=3)  # noqa: E731
    ground = Plane(np.array([0.0, -1.0, 0.0]), -cam_height, colors(), SolidTexture.random(rng, scale=texture_scale))
    slant = rng.uniform(-0.12, 0.12)
    n = np.array([np.sin(slant), 0.0, -np.cos(slant)])
    wall_z = rng.uniform(0.72, 0.8) * d_max
    # plane through (0, 0, wall_z) with normal n
    wall = Plane(-n, float(-n @ np.array([0.0, 0.0, wall_z])), colors(), SolidTexture.random(rng, scale=texture_scale))
    boxes = []
    for _ in range(rng.integers(1, 4)):
        cz = rng.uniform(0.3, 0.6) * d_max
        cx = rng.uniform(-0.35, 0.35) * cz
        w = rng.uniform(0.6, 1.6)
        h = rng.uniform(0.8, 2.2)
        dz = rng.uniform(0.5, 1.5)
        lo = np.array([cx - w / 2, cam_height - h, cz - dz / 2])
        hi = np.array([cx + w / 2, cam_height, cz + dz / 2])
        boxes.append(Box(lo, hi, colors(), SolidTexture.random(rng, scale=texture_scale)))
    return Scene([ground, wall], boxes, d_min=0.5, d_max=d_max)


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    f = 0.75 * width
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def render(scene: Scene, pose: Pose, K: CameraIntrinsics, supersample: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Image (3,H,W) and depth (1,H,W) seen by a camera at ``pose``.

    ``pose`` maps reference (target-camera) coordinates into this camera.
    Colour is box-filtered over ``supersample``^2 sub-pixel rays so that
    surface boundaries are antialiased; depth comes from the pixel centre.
    """
    h, w = K.height, K.width
    rt = pose.rotation.T
    origin = -rt @ pose.translation

    pixel_step = (rt @ np.array([1.0 / K.fx, 0.0, 0.0]), rt @ np.array([0.0, 1.0 / K.fy, 0.0]))

    def cast(du: float, dv: float):
        v, u = np.meshgrid(np.arange(h, dtype=np.float64) + dv, np.arange(w, dtype=np.float64) + du, indexing="ij")
        rays_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
        return scene.cast(origin, rays_cam @ rt.T, pixel_step)

    depth, color = cast(0.0, 0.0)
    if supersample > 1:
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        color = np.mean([cast(du, dv)[1] for dv in offs for du in offs], axis=0)
    return color.transpose(2, 0, 1), depth[None]


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Corruption:
    kind: str
    level: int
    strength: float | None = None  # overrides the level's parameter when set

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise DatasetError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTION_KINDS}")
        if not 0 <= self.level <= 5:
            raise DatasetError(f"corruption level must be 0..5, got {self.level}")

    def param(self, table: Sequence[float]) -> float:
        return float(self.strength) if self.strength is not None else table[self.level - 1]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "level": self.level}
        if self.strength is not None:
            d["strength"] = self.strength
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Corruption":
        return cls(d["kind"], int(d["level"]), d.get("strength"))


def apply_corruption(image: np.ndarray, c: Corruption, seed: int, depth: np.ndarray | None = None) -> np.ndarray:
    """Corrupt an RGB image (3,H,W) in [0,1].  Level 0 is the identity.

    Fog needs the scene depth (1,H,W): I * t + A * (1 - t), t = exp(-k depth).
    """
    if c.level == 0 and c.strength is None:
        return image.copy()
    rng = np.random.default_rng(seed)
    img = image.astype(np.float64)
    if c.kind == "gaussian_noise":
        out = img + rng.standard_normal(img.shape) * c.param(NOISE_SIGMA)
    elif c.kind == "blur":
        s = c.param(BLUR_SIGMA)
        out = np.stack([ndimage.gaussian_filter(ch, s, mode="reflect") for ch in img])
    elif c.kind == "brightness_contrast":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        k = c.param(CONTRAST)
        b = sign * BRIGHTNESS[max(c.level, 1) - 1]
        out = (img - 0.5) * k + 0.5 + b
    elif c.kind == "rain_streaks":
        out = _rain(img, c.param(RAIN_DENSITY), rng)
    elif c.kind == "fog":
        if depth is None:
            raise DatasetError("fog corruption needs a depth map")
        k = c.param(FOG_K)
        with np.errstate(over="ignore"):
            t = np.exp(-k * np.asarray(depth, dtype=np.float64))
        out = img * t + FOG_AIRLIGHT * (1.0 - t)
    else:  # pragma: no cover - guarded by Corruption
        raise DatasetError(c.kind)
    return np.clip(out, 0.0, 1.0)


def _rain(img: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    layer = np.zeros((h, w))
    count = max(1, int(round(density * h * w)))
    slope = rng.uniform(-0.3, 0.3)
    for _ in range(count):
        y0 = rng.uniform(0, h)
        x0 = rng.uniform(0, w)
        length = rng.uniform(0.08, 0.16) * h
        for s in np.linspace(0.0, length, int(length * 2) + 2):
            y = int(y0 + s)
            x = int(round(x0 + slope * s))
            if 0 <= y < h and 0 <= x < w:
                layer[y, x] = 1.0
    layer = ndimage.gaussian_filter(layer, 0.5)
    layer = np.clip(layer * 1.5, 0.0, 1.0)
    dimmed = img * 0.85
    return dimmed * (1.0 - 0.7 * layer) + 0.9 * 0.7 * layer


# ---------------------------------------------------------------------------
# samples and datasets
# ---------------------------------------------------------------------------
@dataclass
class SamplePair:
    name: str
    split: str
    image: np.ndarray  # (3,H,W) clear target
    image_aug: np.ndarray  # (3,H,W) corrupted target
    aux_images: list[np.ndarray]  # clear auxiliary frames
    poses: list[Pose]  # target -> aux
    gt_depth: np.ndarray  # (1,H,W) scene units
    aux_depths: list[np.ndarray]
    corruption: Corruption
    seed: int


@dataclass
class SynthDataset:
    K: CameraIntrinsics
    d_max: float
    samples: list[SamplePair]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[SamplePair]:
        return [s for s in self.samples if s.split == name]

    @property
    def size(self) -> tuple[int, int]:
        return self.K.height, self.K.width

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class CorruptionMix:
    kinds: tuple[str, ...] = CORRUPTION_KINDS
    levels: tuple[int, ...] = (1, 2, 3, 4, 5)

    @classmethod
    def from_dict(cls, d: dict | None) -> "CorruptionMix":
        d = d or {}
        mix = cls(tuple(d.get("kinds", CORRUPTION_KINDS)), tuple(int(x) for x in d.get("levels", (1, 2, 3, 4, 5))))
        for k in mix.kinds:
            Corruption(k, 1)
        for lv in mix.levels:
            if not 0 <= lv <= 5:
                raise DatasetError(f"corruption level must be 0..5, got {lv}")
        return mix

    def to_dict(self) -> dict:
        return {"kinds": list(self.kinds), "levels": list(self.levels)}


def _sample_seed(seed: int, index: int, split: str) -> int:
    salt = {"train": 0, "val": 1, "test": 2}.get(split, 3)
    return int(np.random.SeedSequence([seed, salt, index]).generate_state(1)[0])


def _aux_poses(rng: np.random.Generator, n_aux: int) -> list[Pose]:
    """Mostly lateral camera offsets, alternating left and right.

    A lateral baseline gives parallax everywhere in the frame; forward motion
    leaves the region around the focus of expansion unobservable.
    """
    poses = []
    for i in range(n_aux):
        side = 1.0 if i % 2 == 0 else -1.0
        center = np.array([side * rng.uniform(0.4, 0.8), rng.uniform(-0.05, 0.05), rng.uniform(-0.2, 0.2)])
        r = rotation_matrix(*rng.uniform(-0.02, 0.02, size=3))
        # X_a = R (X_t - C)
        poses.append(Pose(r, -r @ center))
    return poses


def make_sample(
    name: str,
    split: str,
    seed: int,
    K: CameraIntrinsics,
    d_max: float,
    corruption: Corruption,
    n_aux: int = 2,
) -> SamplePair:
    rng = np.random.default_rng(seed)
    for _ in range(100):
        scene = random_scene(rng, d_max)
        image, depth = render(scene, Pose.identity(), K)
        if np.all(np.isfinite(depth)) and depth.max() <= d_max and depth.min() > 0:
            break
    else:  # pragma: no cover - geometry ranges make this unreachable
        raise DatasetError(f"{name}: could not build a scene within depth range")
    poses = _aux_poses(rng, n_aux)
    aux_imgs, aux_depths = [], []
    for p in poses:
        im, dp = render(scene, p, K)
        aux_imgs.append(quantize(im))
        aux_depths.append(np.where(np.isfinite(dp), dp, 0.0))
    image = quantize(image)
    corrupt_seed = int(rng.integers(0, 2**31 - 1))
    image_aug = quantize(apply_corruption(image, corruption, corrupt_seed, depth))
    return SamplePair(name, split, image, image_aug, aux_imgs, poses, depth, aux_depths, corruption, seed)


def generate(
    count: int,
    size: tuple[int, int] = (64, 64),
    seed: int = 0,
    corruption_mix: CorruptionMix | dict | None = None,
    split: str = "train",
    d_max: float = 10.0,
    n_aux: int = 2,
) -> SynthDataset:
    """Deterministically generate ``count`` samples of one split."""
    h, w = size
    if h < 8 or w < 8 or h % 4 or w % 4:
        raise DatasetError(f"image size must be >= 8 and divisible by 4, got {h}x{w}")
    if count < 0:
        raise DatasetError("count must be nonnegative")
    mix = corruption_mix if isinstance(corruption_mix, CorruptionMix) else CorruptionMix.from_dict(corruption_mix)
    K = default_intrinsics(h, w)
    samples = []
    for i in range(count):
        s = _sample_seed(seed, i, split)
        crng = np.random.default_rng(s ^ 0x5EED)
        corr = Corruption(mix.kinds[crng.integers(len(mix.kinds))], int(mix.levels[crng.integers(len(mix.levels))]))
        samples.append(make_sample(f"{split}_{i:04d}", split, s, K, d_max, corr, n_aux))
    return SynthDataset(K, d_max, samples, seed, {"corruption_mix": mix.to_dict()})


def generate_splits(
    seed: int = 0,
    size: tuple[int, int] = (64, 64),
    counts: dict | None = None,
    corruption_mix: CorruptionMix | dict | None = None,
    d_max: float = 10.0,
) -> SynthDataset:
    counts = counts or {"train": 64, "val": 16, "test": 16}
    parts = [generate(n, size, seed, corruption_mix, split, d_max) for split, n in counts.items()]
    ds = parts[0]
    for p in parts[1:]:
        ds.samples.extend(p.samples)
    ds.meta["counts"] = dict(counts)
    return ds


def warp_consistency(sample: SamplePair, K: CameraIntrinsics, occlusion_tol: float = 0.01) -> list[float]:
    """Mean photometric error of each auxiliary frame warped with the true depth.

    Pixels count only where the warp lands inside the auxiliary image and
    the auxiliary depth agrees with the transformed target depth within
    ``occlusion_tol`` (relative), i.e. the surface is visible in both views.
    That mask is eroded by one pixel because antialiased colour at a depth
    edge mixes both surfaces.
    """
    from .losses import photometric_map

    depth = Tensor(sample.gt_depth)
    points = G.backproject(depth, K)
    target = Tensor(sample.image[None])
    errors = []
    for aux, pose, aux_depth in zip(sample.aux_images, sample.poses, sample.aux_depths):
        warped, inside = G.synthesize_view(Tensor(aux), depth, pose, K)
        coords, _ = G.project(points, pose, K)
        seen_depth, _ = G.bilinear_warp(Tensor(aux_depth), coords)
        z = G.transform_points(points, pose).data[2:3]
        visible = np.abs(seen_depth.data - z) < occlusion_tol * z
        mask = ndimage.binary_erosion((inside * visible)[0] > 0, np.ones((3, 3)))
        err = photometric_map(target, Tensor(warped.data[None])).data[0, 0]
        errors.append(float((err * mask).sum() / max(mask.sum(), 1)))
    return errors


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
def write_ppm(path: Path, img: np.ndarray) -> None:
    """Binary P6 (3 channels) or P5 (1 channel), 8-bit."""
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    c, h, w = arr.shape
    if c == 3:
        header = f"P6\n{w} {h}\n255\n".encode()
        body = arr.transpose(1, 2, 0).tobytes()
    elif c == 1:
        header = f"P5\n{w} {h}\n255\n".encode()
        body = arr[0].tobytes()
    else:
        raise DatasetError(f"cannot write {c}-channel image as PPM/PGM")
    Path(path).write_bytes(header + body)


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary P5/P6 file into a float (C,H,W) array in [0,1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise DatasetError(f"{path}: unsupported image format {magic}/{maxval}")
    c = 3 if magic == "P6" else 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos).reshape(h, w, c)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def save(ds: SynthDataset, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        e = {
            "name": s.name,
            "split": s.split,
            "seed": s.seed,
            "target": f"{s.name}_target.ppm",
            "aug": f"{s.name}_aug.ppm",
            "aux": [f"{s.name}_aux{i}.ppm" for i in range(len(s.aux_images))],
            "depth": f"{s.name}_depth.bin",
            "aux_depth": [f"{s.name}_aux{i}_depth.bin" for i in range(len(s.aux_images))],
            "poses": [p.to_dict() for p in s.poses],
            "corruption": s.corruption.to_dict(),
        }
        write_ppm(root / e["target"], s.image)
        write_ppm(root / e["aug"], s.image_aug)
        for fn, im in zip(e["aux"], s.aux_images):
            write_ppm(root / fn, im)
        save_tensor(s.gt_depth, root / e["depth"])
        for fn, dp in zip(e["aux_depth"], s.aux_depths):
            save_tensor(dp, root / fn)
        entries.append(e)
    manifest = {
        "format": MANIFEST_FORMAT,
        "K": ds.K.to_dict(),
        "size": [ds.K.height, ds.K.width],
        "d_max": ds.d_max,
        "seed": ds.seed,
        "meta": ds.meta,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def _parse_manifest(text: str, path: Path) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        line = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from None


def _validate_manifest(m: dict, path: Path) -> None:
    for key in ("format", "K", "size", "d_max", "samples"):
        if key not in m:
            raise ManifestError(f"{path}: missing key {key!r}")
    if m["format"] != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: unsupported format {m['format']!r}")
    h, w = m["size"]
    K = m["K"]
    if int(K.get("width", -1)) != w or int(K.get("height", -1)) != h:
        raise ManifestError(f"{path}: intrinsics size {K.get('width')}x{K.get('height')} does not match image size {w}x{h}")
    if not m["d_max"] > 0:
        raise ManifestError(f"{path}: d_max must be positive")


def load(path: str | Path) -> SynthDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ManifestError(f"{mpath}: manifest not found")
    m = _parse_manifest(mpath.read_text(), mpath)
    _validate_manifest(m, mpath)
    try:
        K = CameraIntrinsics.from_dict(m["K"])
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{mpath}: bad intrinsics: {exc}") from None
    samples = []
    for e in m["samples"]:
        name = e.get("name", "?")

        def need(fn, what, name=name):
            p = root / fn
            if not p.exists():
                raise DatasetError(f"sample {name}: missing {what} file {fn}")
            return p

        depth = load_tensor(need(e["depth"], "depth")).data
        aux_depths = [load_tensor(need(fn, "aux depth")).data for fn in e.get("aux_depth", [])]
        img = read_ppm(need(e["target"], "target image"))
        aug = read_ppm(need(e["aug"], "augmented image"))
        aux = [read_ppm(need(fn, "aux image")) for fn in e["aux"]]
        if depth.shape != (1, K.height, K.width) or img.shape != (3, K.height, K.width):
            raise DatasetError(f"sample {name}: array shapes do not match intrinsics")
        poses = [Pose.from_dict(p) for p in e["poses"]]
        samples.append(
            SamplePair(name, e["split"], img, aug, aux, poses, depth, aux_depths, Corruption.from_dict(e["corruption"]), int(e["seed"]))
        )
    return SynthDataset(K, float(m["d_max"]), samples, int(m.get("seed", 0)), m.get("meta", {}))

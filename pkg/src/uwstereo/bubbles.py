"""Procedural bubble degradation for transfer training.

Bubbles are semi-transparent discs with a bright specular highlight and
a darkened rim, alpha-composited over a rectified pair. Eight
conditions (2 sizes x 2 densities x 2 layer positions) plus the clean
scene form the augmentation grid. Near-layer bubbles are drawn in both
views with a parallax exceeding the scene's maximum disparity, so they
cannot be explained away as scene geometry; far bubbles get a small
fixed parallax. Ground-truth disparity is carried over untouched:
bubbles degrade appearance, never geometry.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import StereoFrame, save_frame, write_manifest
from .utils import rng_stream

logger = logging.getLogger(__name__)

SIZES = ("small", "large")
DENSITIES = ("little", "much")
POSITIONS = ("near", "far")
CLEAN = "clean"


def all_conditions() -> list:
    """The clean scene plus the eight bubble conditions, canonical order."""
    return [CLEAN] + [f"{s}-{d}-{p}" for s in SIZES for d in DENSITIES
                      for p in POSITIONS]


def parse_condition(cond: str):
    if cond == CLEAN:
        return None
    parts = cond.split("-")
    if len(parts) != 3 or parts[0] not in SIZES or parts[1] not in DENSITIES \
            or parts[2] not in POSITIONS:
        raise ValueError(f"unknown condition {cond!r}; expected 'clean' or "
                         "'<small|large>-<little|much>-<near|far>'")
    return tuple(parts)


@dataclass
class BubbleSimConfig:
    """Class parameters; the grid labels are qualitative, these pin them down."""

    small_radius: tuple = (3.0, 8.0)
    large_radius: tuple = (12.0, 40.0)
    little_rate: float = 10.0        # bubbles per megapixel
    much_rate: float = 60.0
    opacity: tuple = (0.45, 0.95)
    far_disparity: float = 1.0
    near_margin: float = 8.0         # added to the scene max disparity
    near_feather: float = 0.35       # edge softness as a fraction of radius
    far_feather: float = 0.12
    highlight_sigma: float = 0.18    # fraction of radius
    rim_darkening: float = 0.25
    body_shade: float = 0.55

    def radius_range(self, size_class):
        return self.small_radius if size_class == "small" else self.large_radius

    def rate(self, density_class):
        return self.little_rate if density_class == "little" else self.much_rate


@dataclass
class Bubble:
    center: tuple      # (x, y) px
    radius: float
    opacity: float
    highlight: tuple   # offset (dx, dy) px from center


@dataclass
class BubbleField:
    condition: str
    seed: int
    image_size: tuple  # (w, h)
    bubbles: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.bubbles)


def sample_field(condition: str, image_size, seed: int,
                 cfg: BubbleSimConfig = None) -> BubbleField:
    """Reproducibly draw a bubble population for one condition.

    The count is Poisson with mean rate x image area; geometry comes from
    a stream keyed only by (seed, condition), so equal seeds give equal
    fields.
    """
    cfg = cfg or BubbleSimConfig()
    parsed = parse_condition(condition)
    fld = BubbleField(condition=condition, seed=seed, image_size=tuple(image_size))
    if parsed is None:
        return fld
    size_class, density_class, _ = parsed
    w, h = image_size
    rng = rng_stream(seed, "bubbles", condition)
    mean = cfg.rate(density_class) * (w * h / 1.0e6)
    count = int(rng.poisson(mean))
    r_lo, r_hi = cfg.radius_range(size_class)
    for _ in range(count):
        r = float(rng.uniform(r_lo, r_hi))
        cx = float(rng.uniform(0, w))
        cy = float(rng.uniform(0, h))
        op = float(rng.uniform(*cfg.opacity))
        hr = 0.35 * r
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0, hr)
        fld.bubbles.append(Bubble((cx, cy), r, op,
                                  (float(mag * np.cos(ang)), float(mag * np.sin(ang)))))
    return fld


def _draw_bubble(img: np.ndarray, mask: np.ndarray, bubble: Bubble, shift_x: float,
                 feather: float, cfg: BubbleSimConfig):
    """Composite one bubble (center shifted by -shift_x) into a uint8 view."""
    h, w = img.shape
    cx = bubble.center[0] - shift_x
    cy = bubble.center[1]
    r = bubble.radius
    x0 = max(0, int(np.floor(cx - r - 1)))
    x1 = min(w, int(np.ceil(cx + r + 2)))
    y0 = max(0, int(np.floor(cy - r - 1)))
    y1 = min(h, int(np.ceil(cy + r + 2)))
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    rr = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2) / r
    support = rr <= 1.0
    if not support.any():
        return
    edge = np.clip((1.0 - rr) / max(feather, 1e-6), 0.0, 1.0)
    alpha = bubble.opacity * edge
    alpha[~support] = 0.0

    body = cfg.body_shade - cfg.rim_darkening * np.exp(-((rr - 0.85) / 0.12) ** 2)
    hx = cx + bubble.highlight[0]
    hy = cy + bubble.highlight[1]
    sig = cfg.highlight_sigma * r
    hmask = np.exp(-((xs - hx) ** 2 + (ys - hy) ** 2) / (2.0 * sig * sig))
    color = body * (1.0 - hmask) + 1.0 * hmask

    region = img[y0:y1, x0:x1].astype(np.float32) / 255.0
    blended = alpha * color + (1.0 - alpha) * region
    touched = alpha > 0
    out = np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)
    img[y0:y1, x0:x1][touched] = out[touched]
    mask[y0:y1, x0:x1] |= touched


@dataclass
class AugmentedSample:
    clean: StereoFrame
    degraded: StereoFrame
    condition: str

    @property
    def bubble_masks(self):
        return self.degraded.bubble_left, self.degraded.bubble_right


def render_bubbles(frame: StereoFrame, fld: BubbleField,
                   cfg: BubbleSimConfig = None,
                   near_disparity: float = None) -> AugmentedSample:
    """Composite a bubble field over both views of a rectified frame.

    Pixels outside the bubble masks are bit-identical to the clean frame;
    ground truth and target masks are inherited unchanged.
    """
    cfg = cfg or BubbleSimConfig()
    parsed = parse_condition(fld.condition)
    left = frame.left.copy()
    right = frame.right.copy()
    mask_l = np.zeros(frame.shape, bool)
    mask_r = np.zeros(frame.shape, bool)
    if parsed is not None:
        _, _, position = parsed
        if position == "near":
            if near_disparity is None:
                if frame.gt_disp is not None and np.isfinite(frame.gt_disp).any():
                    scene_max = float(np.nanmax(
                        np.where(np.isfinite(frame.gt_disp), frame.gt_disp, np.nan)))
                else:
                    scene_max = 0.0
                near_disparity = scene_max + cfg.near_margin
            bubble_disp = near_disparity
            feather = cfg.near_feather
        else:
            bubble_disp = cfg.far_disparity
            feather = cfg.far_feather
        for b in fld.bubbles:
            _draw_bubble(left, mask_l, b, 0.0, feather, cfg)
            _draw_bubble(right, mask_r, b, bubble_disp, feather, cfg)

    degraded = StereoFrame(
        left=left, right=right,
        mask_left=frame.mask_left, mask_right=frame.mask_right,
        gt_disp=frame.gt_disp,
        bubble_left=mask_l, bubble_right=mask_r,
        name=f"{frame.name}__{fld.condition}",
        meta={**frame.meta, "condition": fld.condition, "bubble_seed": fld.seed,
              "bubble_count": fld.count})
    return AugmentedSample(clean=frame, degraded=degraded, condition=fld.condition)


# -- water fluctuation ---------------------------------------------------------


def fluctuation_field(shape, amplitude: float, wavelength: float, seed: int):
    """Smooth (dy, dx) displacement field with max magnitude <= amplitude."""
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    h, w = shape
    if amplitude == 0:
        z = np.zeros((h, w), np.float32)
        return z, z.copy()
    rng = rng_stream(seed, "fluctuation")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    comps = []
    for _ in range(2):
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta))
                      / wavelength + phase)
        noise = ndimage.gaussian_filter(
            rng.standard_normal((h, w)).astype(np.float32), sigma=wavelength / 3.0)
        comps.append(wave + 2.0 * noise)
    dy, dx = comps
    mag = np.sqrt(dy * dy + dx * dx)
    peak = float(mag.max())
    if peak > 0:
        dy = dy * (amplitude / peak)
        dx = dx * (amplitude / peak)
    return dy.astype(np.float32), dx.astype(np.float32)


def fluctuation_warp(image: np.ndarray, amplitude: float, wavelength: float,
                     seed: int) -> np.ndarray:
    """Warp by a smooth sinusoid-plus-noise displacement field."""
    if amplitude == 0:
        return image.copy()
    dy, dx = fluctuation_field(image.shape, amplitude, wavelength, seed)
    ys, xs = np.mgrid[0:image.shape[0], 0:image.shape[1]].astype(np.float32)
    warped = ndimage.map_coordinates(image.astype(np.float32), [ys + dy, xs + dx],
                                     order=1, mode="nearest")
    if image.dtype == np.uint8:
        return np.clip(np.rint(warped), 0, 255).astype(np.uint8)
    return warped.astype(image.dtype)


# -- dataset construction --------------------------------------------------------


def build_transfer_dataset(frames, out_root, conditions=None, seed: int = 0,
                           cfg: BubbleSimConfig = None,
                           fluctuation: dict = None) -> Path:
    """Write one augmented sample per (frame x condition) and a manifest.

    Frames without ground truth are skipped with a warning. Optional
    ``fluctuation`` ({"amplitude": px, "wavelength": px}) warps both
    degraded views after compositing; it is off by default so stored
    ground truth stays exact.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    conditions = list(conditions) if conditions else all_conditions()
    cfg = cfg or BubbleSimConfig()
    dirs, extras = [], []
    for frame in frames:
        if frame.gt_disp is None:
            logger.warning("frame %s has no ground-truth disparity; skipped",
                           frame.name)
            continue
        for cond in conditions:
            stream_seed = int(rng_stream(seed, frame.name, cond).integers(2 ** 31))
            fld = sample_field(cond, (frame.shape[1], frame.shape[0]),
                               stream_seed, cfg)
            sample = render_bubbles(frame, fld, cfg)
            degraded = sample.degraded
            if fluctuation and fluctuation.get("amplitude", 0) > 0 and cond != CLEAN:
                amp = fluctuation["amplitude"]
                wl = fluctuation.get("wavelength", 40.0)
                degraded = replace(
                    degraded,
                    left=fluctuation_warp(degraded.left, amp, wl, stream_seed),
                    right=fluctuation_warp(degraded.right, amp, wl, stream_seed + 1))
            d = out_root / frame.name / cond
            save_frame(d, degraded)
            dirs.append(d)
            extras.append({"frame": frame.name, "condition": cond})
    manifest = write_manifest(out_root / "manifest.json", out_root, dirs, extras)
    logger.info("wrote %d augmented samples under %s", len(dirs), out_root)
    return manifest

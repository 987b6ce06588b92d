"""Synthetic stereo scenes with exact ground truth.

Surface textures (smooth base + pseudo-random projected dot pattern) are
generated in surface coordinates and resampled into both views at integer
disparities, so every stated correspondence is exact by construction:
with surface array S indexed by left-image column, left[x] = S[x] and
right[x] = S[x + d], hence left[x] == right[x - d]. The same dot-pattern
generator doubles as the projected pattern used by the texture-recovery
tasks.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import StereoFrame
from .utils import to_uint8


def dot_pattern(shape, rng: np.random.Generator, density: float = 0.08,
                radius: float = 1.2, amplitude: float = 1.0) -> np.ndarray:
    """Pseudo-random projected dot pattern in [0, amplitude], float32.

    density is the fraction of seed pixels; dots are widened by a small
    Gaussian so they survive resampling.
    """
    seeds = (rng.random(shape) < density).astype(np.float32)
    blur = ndimage.gaussian_filter(seeds, sigma=radius)
    peak = blur.max()
    if peak > 0:
        blur = blur / peak
    return (amplitude * blur).astype(np.float32)


def smooth_texture(shape, rng: np.random.Generator, sigma: float = 4.0,
                   low: float = 0.25, high: float = 0.75) -> np.ndarray:
    """Band-limited random albedo in [low, high], float32."""
    noise = rng.random(shape).astype(np.float32)
    tex = ndimage.gaussian_filter(noise, sigma=sigma)
    tmin, tmax = tex.min(), tex.max()
    if tmax > tmin:
        tex = (tex - tmin) / (tmax - tmin)
    return (low + (high - low) * tex).astype(np.float32)


def _surface_texture(height, width, rng, spec: "SceneSpec"):
    base = smooth_texture((height, width), rng)
    pattern = dot_pattern((height, width), rng)
    gain = np.full((height, width), spec.pattern_strength, np.float32)
    for _ in range(spec.pattern_dropout):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        r = rng.uniform(*spec.dropout_radius)
        ys, xs = np.mgrid[0:height, 0:width]
        fade = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * (r / 2) ** 2))
        gain *= (1.0 - 0.95 * fade).astype(np.float32)
    return np.clip(base + gain * pattern, 0.0, 1.0)


@dataclass
class SceneSpec:
    width: int = 160
    height: int = 120
    noise: float = 0.01
    pattern_strength: float = 0.5
    # number of blob regions where the projected pattern fades out
    # (projector shadowing / range falloff), and their radius range in px
    pattern_dropout: int = 0
    dropout_radius: tuple = (10.0, 22.0)


def plane_frame(disparity: int, spec: SceneSpec = None, seed: int = 0,
                name: str = "") -> StereoFrame:
    """Fronto-parallel textured plane at a constant integer disparity."""
    spec = spec or SceneSpec()
    if disparity < 0:
        raise ValueError("disparity must be >= 0")
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    surf = _surface_texture(h, w + disparity, rng, spec)
    left = surf[:, :w]
    right = surf[:, disparity:disparity + w]
    left, right = _finish_views(left, right, spec, rng)
    gt = np.full((h, w), float(disparity), dtype=np.float32)
    gt[:, :disparity] = np.inf  # no right-image counterpart
    return StereoFrame(left=left, right=right, gt_disp=gt,
                       name=name or f"plane_d{disparity}_s{seed}",
                       meta={"kind": "plane", "disparity": disparity, "seed": seed})


def two_plane_frame(bg_disparity: int, fg_disparity: int, spec: SceneSpec = None,
                    seed: int = 0, strip: tuple = None, name: str = "") -> StereoFrame:
    """Background plane with a fronto-parallel foreground strip.

    The strip occludes a background band of width
    fg_disparity - bg_disparity on its left flank; those pixels keep
    their background ground truth but have no right-view counterpart
    (meta["occluded_cols"] records the half-open column range).
    """
    spec = spec or SceneSpec()
    if fg_disparity <= bg_disparity:
        raise ValueError("foreground must have larger disparity than background")
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    x0, x1 = strip if strip else (w // 2 - w // 8, w // 2 + w // 8)
    if not (0 <= x0 < x1 <= w):
        raise ValueError(f"strip ({x0}, {x1}) outside image of width {w}")
    if x0 - fg_disparity < 0:
        raise ValueError("strip too close to left edge for the foreground disparity")

    bg = _surface_texture(h, w + bg_disparity, rng, spec)
    fg = _surface_texture(h, w + fg_disparity, rng, spec)

    left = bg[:, :w].copy()
    left[:, x0:x1] = fg[:, x0:x1]

    right = bg[:, bg_disparity:bg_disparity + w].copy()
    right[:, x0 - fg_disparity:x1 - fg_disparity] = fg[:, x0:x1]

    left, right = _finish_views(left, right, spec, rng)

    gt = np.full((h, w), float(bg_disparity), dtype=np.float32)
    gt[:, x0:x1] = float(fg_disparity)
    gt[:, :bg_disparity] = np.inf
    occ0 = x0 - (fg_disparity - bg_disparity)
    return StereoFrame(
        left=left, right=right, gt_disp=gt,
        name=name or f"twoplane_{bg_disparity}_{fg_disparity}_s{seed}",
        meta={"kind": "two_plane", "bg_disparity": bg_disparity,
              "fg_disparity": fg_disparity, "strip": [int(x0), int(x1)],
              "occluded_cols": [int(occ0), int(x0)], "seed": seed})


def _finish_views(left_f, right_f, spec, rng):
    if spec.noise > 0:
        left_f = left_f + rng.normal(0, spec.noise, left_f.shape).astype(np.float32)
        right_f = right_f + rng.normal(0, spec.noise, right_f.shape).astype(np.float32)
    return to_uint8(left_f), to_uint8(right_f)


def plane_dataset(disparities, spec: SceneSpec = None, seed: int = 0) -> list:
    """One plane frame per requested disparity, with decorrelated textures."""
    return [plane_frame(d, spec=spec, seed=seed + 101 * i, name=f"plane{i:03d}_d{d}")
            for i, d in enumerate(disparities)]


def set_target_masks(frame: StereoFrame, inset: int) -> StereoFrame:
    """Give a frame an inset rectangular target mask in the left view and
    the geometrically consistent mask in the right view (left target
    warped by the ground-truth disparity)."""
    h, w = frame.shape
    if frame.gt_disp is None:
        raise ValueError("target masks need ground-truth disparity")
    ml = np.zeros((h, w), bool)
    ml[inset:h - inset, inset:w - inset] = True
    mr = np.zeros((h, w), bool)
    ys, xs = np.nonzero(ml & np.isfinite(frame.gt_disp))
    xr = xs - np.rint(frame.gt_disp[ys, xs]).astype(np.int64)
    keep = (xr >= 0) & (xr < w)
    mr[ys[keep], xr[keep]] = True
    frame.mask_left = ml
    frame.mask_right = mr
    return frame


# -- segmentation / restoration tasks -----------------------------------------


def disc_sample(size: int, rng: np.random.Generator, distractors: bool = False):
    """(image uint8, target mask) with one large bright disc as the target.

    With distractors, small bright discs of the same intensity are
    scattered around; they are not part of the target, so telling them
    apart requires enough spatial context to judge size, not brightness.
    """
    img = rng.normal(0.15, 0.03, (size, size)).astype(np.float32)
    ys, xs = np.mgrid[0:size, 0:size]

    def draw(cx, cy, r, value):
        hit = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        img[hit] = value + rng.normal(0, 0.02)
        return hit

    r = rng.uniform(size * 0.16, size * 0.28)
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    mask = draw(cx, cy, r, 0.8)
    if distractors:
        for _ in range(int(rng.integers(6, 12))):
            rr = rng.uniform(1.5, 3.5)
            draw(rng.uniform(0, size), rng.uniform(0, size), rr, 0.8)
    return to_uint8(np.clip(img, 0, 1)), mask


def disc_dataset(count: int, size: int = 48, seed: int = 0,
                 distractors: bool = False) -> list:
    rng = np.random.default_rng(seed)
    return [disc_sample(size, rng, distractors) for _ in range(count)]


def stripe_pattern(shape, wavelength: float, angle_deg: float = 0.0,
                   amplitude: float = 0.2, phase: float = 0.0) -> np.ndarray:
    """Sinusoidal stripes in [-amplitude, amplitude], float32."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    th = np.deg2rad(angle_deg)
    carrier = (xs * np.cos(th) + ys * np.sin(th)) * (2 * np.pi / wavelength)
    return (amplitude * np.sin(carrier + phase)).astype(np.float32)


def striped_textures(count: int, size: int = 48, wavelength: float = 8.0,
                     amplitude: float = 0.2, seed: int = 0, angle_deg: float = 0.0):
    """(striped, clean) float image pairs for pattern-removal training."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        clean = smooth_texture((size, size), rng, sigma=3.0, low=0.3, high=0.7)
        phase = rng.uniform(0, 2 * np.pi)
        striped = np.clip(clean + stripe_pattern((size, size), wavelength,
                                                 angle_deg, amplitude, phase), 0, 1)
        pairs.append((striped.astype(np.float32), clean))
    return pairs

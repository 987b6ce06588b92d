"""Cost-volume construction and semi-global disparity estimation.

Costs are 1 - cosine similarity of per-pixel descriptors, so they live
on a [0, 2] scale. Cells excluded by the target masks or falling outside
the image carry a large finite sentinel and a False validity flag; they
are never selected and never serve as path predecessors. The directional
recurrence is the unnormalized form

    L(p, d) = C(p, d) + min(L(q, d), L(q, d+-1) + p1, min_d' L(q, d') + p2)

(no running-minimum subtraction), which keeps aggregated costs exactly
equal to the per-direction dynamic program over disparity sequences.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .pfm import INVALID

INVALID_COST = 1.0e4
_BIG = 1.0e9  # predecessor sentinel inside a sweep
_CHUNK_BYTES = 64 * 1024 * 1024


@dataclass
class CostVolume:
    """Per-pixel, per-disparity matching cost with validity flags."""

    cost: np.ndarray   # (H, W, D) float32
    valid: np.ndarray  # (H, W, D) bool

    @property
    def shape(self):
        return self.cost.shape

    @property
    def d_count(self):
        return self.cost.shape[2]


@dataclass
class StereoParams:
    d_max: int = 256
    p1: float = 0.03
    p2: float = 0.5
    paths: int = 8
    lr_tol: float = 1.0
    subpixel: bool = True
    mask_dilation: int = 4

    def validate(self):
        if not 1 <= self.d_max <= 1024:
            raise ValueError(f"d_max must be in [1, 1024], got {self.d_max}")
        if self.p1 < 0 or self.p2 < self.p1:
            raise ValueError(f"penalties must satisfy 0 <= p1 <= p2, "
                             f"got p1={self.p1}, p2={self.p2}")
        if self.paths not in (4, 8):
            raise ValueError(f"paths must be 4 or 8, got {self.paths}")
        if self.lr_tol < 0:
            raise ValueError("lr_tol must be >= 0")
        return self


def normalize_descriptors(desc: np.ndarray) -> np.ndarray:
    """L2-normalize (C, H, W) descriptors per pixel; zero-norm pixels
    stay zero so their similarity against anything is 0."""
    norms = np.sqrt(np.sum(desc.astype(np.float32) ** 2, axis=0, keepdims=True))
    out = np.divide(desc, norms, out=np.zeros_like(desc, dtype=np.float32),
                    where=norms > 0)
    return out


def cost_volume_from_descriptors(left_desc: np.ndarray, right_desc: np.ndarray,
                                 mask_left: np.ndarray, mask_right: np.ndarray,
                                 d_max: int) -> CostVolume:
    """cost(y, x, d) = 1 - <left(y, x), right(y, x - d)> on unit descriptors.

    Cells are invalid where the left pixel is unmasked, the right pixel
    x - d is unmasked, or x - d falls off the image.
    """
    if left_desc.shape != right_desc.shape:
        raise ValueError(f"descriptor maps disagree: {left_desc.shape} vs "
                         f"{right_desc.shape}")
    c, h, w = left_desc.shape
    if mask_left.shape != (h, w) or mask_right.shape != (h, w):
        raise ValueError("mask shape does not match descriptor maps")
    d_count = min(d_max + 1, w)
    ln = normalize_descriptors(left_desc).transpose(1, 2, 0)   # (H, W, C)
    rn = normalize_descriptors(right_desc).transpose(1, 2, 0)

    cost = np.full((h, w, d_count), INVALID_COST, dtype=np.float32)
    xs = np.arange(w)[:, None]
    ds = np.arange(d_count)[None, :]
    xr = xs - ds                      # (W, D) right-image column per cell
    in_range = xr >= 0
    xr_safe = np.where(in_range, xr, 0)

    rows = max(1, _CHUNK_BYTES // (w * w * 4))
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        if not mask_left[y0:y1].any():
            continue
        scores = np.matmul(ln[y0:y1], rn[y0:y1].transpose(0, 2, 1))  # (r, W, W)
        band = scores[:, xs, xr_safe]                                # (r, W, D)
        np.subtract(1.0, band, out=band)
        cost[y0:y1] = np.where(in_range[None], band, INVALID_COST)

    valid = in_range[None] & mask_left[:, :, None] & mask_right[:, xr_safe]
    cost[~valid] = INVALID_COST
    return CostVolume(cost=cost, valid=valid)


def right_volume_from_left(vol: CostVolume) -> CostVolume:
    """Re-index the left volume as seen from the right image:
    cost_R(y, x, d) = cost_L(y, x + d, d)."""
    h, w, dc = vol.shape
    cost = np.full_like(vol.cost, INVALID_COST)
    valid = np.zeros_like(vol.valid)
    for d in range(dc):
        if d == 0:
            cost[:, :, 0] = vol.cost[:, :, 0]
            valid[:, :, 0] = vol.valid[:, :, 0]
        else:
            cost[:, :-d, d] = vol.cost[:, d:, d]
            valid[:, :-d, d] = vol.valid[:, d:, d]
    return CostVolume(cost=cost, valid=valid)


# -- semi-global aggregation --------------------------------------------------


def sgm_aggregate(vol: CostVolume, p1: float, p2: float, paths: int = 8) -> CostVolume:
    """Sum the directional dynamic programs over 4 or 8 path directions."""
    if not 0 <= p1 <= p2:
        raise ValueError(f"penalties must satisfy 0 <= p1 <= p2, got {p1}, {p2}")
    if paths not in (1, 4, 8):
        raise ValueError(f"paths must be 1, 4 or 8, got {paths}")
    cost, valid = vol.cost, vol.valid
    out = np.zeros_like(cost)
    hflip = (np.s_[:, ::-1], np.s_[:, ::-1])

    def horizontal(view):
        _sweep_axis1(cost[view], valid[view], p1, p2, out[view])

    def vertical(view):
        _sweep_axis1(cost[view].transpose(1, 0, 2), valid[view].transpose(1, 0, 2),
                     p1, p2, out[view].transpose(1, 0, 2))

    horizontal(np.s_[:, :])                      # left -> right
    if paths >= 4:
        horizontal(np.s_[:, ::-1])               # right -> left
        vertical(np.s_[:, :])                    # top -> bottom
        vertical(np.s_[::-1, :])                 # bottom -> top
    if paths == 8:
        _sweep_diag(cost, valid, p1, p2, out, dy=1)                    # down-right
        _sweep_diag(cost[::-1], valid[::-1], p1, p2, out[::-1], dy=1)  # up-right
        _sweep_diag(cost[:, ::-1], valid[:, ::-1], p1, p2, out[:, ::-1], dy=1)
        _sweep_diag(cost[::-1, ::-1], valid[::-1, ::-1], p1, p2,
                    out[::-1, ::-1], dy=1)
    return CostVolume(cost=out, valid=valid.copy())


def _dp_step(prev, cost_cur, p1, p2):
    """One recurrence step; prev already has invalid predecessors at _BIG."""
    m = prev.min(axis=1)
    cand = np.empty_like(prev)
    cand[:, 1:] = prev[:, :-1] + p1
    cand[:, 0] = _BIG
    np.minimum(cand, prev, out=cand)
    cand[:, :-1] = np.minimum(cand[:, :-1], prev[:, 1:] + p1)
    np.minimum(cand, (m + p2)[:, None], out=cand)
    cand[m >= _BIG / 2] = 0.0  # no reachable predecessor: path starts here
    return cost_cur + cand


def _masked(state, valid_cur):
    return np.where(valid_cur, state, _BIG)


def _sweep_axis1(cost, valid, p1, p2, out):
    """Accumulate the DP along axis 1 (increasing index) into out."""
    steps = cost.shape[1]
    state = cost[:, 0].copy()
    out[:, 0] += state
    prev = _masked(state, valid[:, 0])
    for x in range(1, steps):
        state = _dp_step(prev, cost[:, x], p1, p2)
        out[:, x] += state
        prev = _masked(state, valid[:, x])


def _sweep_diag(cost, valid, p1, p2, out, dy):
    """Diagonal DP: predecessor of (y, x) is (y - dy, x - 1)."""
    h, w, dc = cost.shape
    state = cost[:, 0].copy()
    out[:, 0] += state
    prev = _masked(state, valid[:, 0])
    for x in range(1, w):
        shifted = np.empty_like(prev)
        if dy == 1:
            shifted[1:] = prev[:-1]
            shifted[0] = _BIG
        else:
            shifted[:-1] = prev[1:]
            shifted[-1] = _BIG
        state = _dp_step(shifted, cost[:, x], p1, p2)
        out[:, x] += state
        prev = _masked(state, valid[:, x])


# -- disparity selection ------------------------------------------------------


def winner_take_all(vol: CostVolume):
    """Per-pixel argmin over valid cells; ties break to the smallest
    disparity. Returns (int disparity map, pixel validity)."""
    masked = np.where(vol.valid, vol.cost, np.float32(np.inf))
    disp = masked.argmin(axis=2).astype(np.int32)
    ok = vol.valid.any(axis=2)
    return disp, ok


def lr_check(disp_left: np.ndarray, disp_right: np.ndarray, tol: float = 1.0
             ) -> np.ndarray:
    """Keep left pixels whose right-view disparity agrees within tol.

    Both maps are float with INVALID (inf) marking missing pixels; the
    result is the left map with failing pixels set to INVALID.
    """
    if disp_left.shape != disp_right.shape:
        raise ValueError(f"disparity maps disagree: {disp_left.shape} vs "
                         f"{disp_right.shape}")
    h, w = disp_left.shape
    out = disp_left.astype(np.float32).copy()
    valid = np.isfinite(disp_left)
    rounded = np.zeros((h, w), dtype=np.int64)
    rounded[valid] = np.rint(disp_left[valid]).astype(np.int64)
    xs = np.arange(w)[None, :].repeat(h, axis=0)
    xr = xs - rounded
    reachable = valid & (xr >= 0) & (xr < w)
    ys = np.arange(h)[:, None].repeat(w, axis=1)
    partner = np.full((h, w), np.inf, dtype=np.float32)
    partner[reachable] = disp_right[ys[reachable], xr[reachable]]
    diff = np.full((h, w), np.inf, dtype=np.float32)
    both = reachable & np.isfinite(partner)
    diff[both] = np.abs(disp_left[both] - partner[both])
    out[~(diff <= tol)] = INVALID
    return out


def parabola_offset(c_minus, c0, c_plus):
    """Sub-cell minimum of a parabola through three equispaced costs.

    Returns the offset in (-0.5, 0.5]; a flat or non-convex triple gives 0.
    """
    denom = 2.0 * (c_minus + c_plus - 2.0 * c0)
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom > 0, (c_minus - c_plus) / denom, 0.0)
    return np.clip(off, -0.5, 0.5)


def subpixel_refine(vol: CostVolume, disp_int: np.ndarray, pixel_valid: np.ndarray
                    ) -> np.ndarray:
    """Parabolic refinement of integer disparities on aggregated costs.

    Border disparities (no d-1 or d+1 neighbor) are left unrefined.
    """
    h, w, dc = vol.shape
    out = np.where(pixel_valid, disp_int.astype(np.float32), np.float32(INVALID))
    interior = pixel_valid & (disp_int > 0) & (disp_int < dc - 1)
    if not interior.any():
        return out
    ys, xs = np.nonzero(interior)
    d = disp_int[ys, xs]
    c0 = vol.cost[ys, xs, d]
    cm = vol.cost[ys, xs, d - 1]
    cp = vol.cost[ys, xs, d + 1]
    usable = (cm < INVALID_COST / 2) & (cp < INVALID_COST / 2)
    off = np.where(usable, parabola_offset(cm, c0, cp), 0.0)
    out[ys, xs] = d + off.astype(np.float32)
    return out


# -- full pipeline -------------------------------------------------------------


@dataclass
class MatchResult:
    disp: np.ndarray                 # float32, INVALID (inf) where rejected
    disp_right: np.ndarray
    timings: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


def dilate_mask(mask: np.ndarray, margin: int) -> np.ndarray:
    if margin <= 0:
        return mask
    return ndimage.binary_dilation(mask, iterations=margin)


def match_descriptors(left_desc, right_desc, mask_left, mask_right,
                      params: StereoParams) -> MatchResult:
    """Descriptor maps -> final left disparity (SGM, LR check, subpixel)."""
    params.validate()
    t = {}
    tic = time.perf_counter()
    search_ml = dilate_mask(mask_left, params.mask_dilation)
    search_mr = dilate_mask(mask_right, params.mask_dilation)
    vol = cost_volume_from_descriptors(left_desc, right_desc, search_ml,
                                       search_mr, params.d_max)
    t["cost_volume"] = time.perf_counter() - tic

    tic = time.perf_counter()
    agg_left = sgm_aggregate(vol, params.p1, params.p2, params.paths)
    disp_l_int, ok_l = winner_take_all(agg_left)
    sub_l = subpixel_refine(agg_left, disp_l_int, ok_l) if params.subpixel \
        else np.where(ok_l, disp_l_int.astype(np.float32), np.float32(INVALID))
    del agg_left

    vol_r = right_volume_from_left(vol)
    del vol
    agg_right = sgm_aggregate(vol_r, params.p1, params.p2, params.paths)
    del vol_r
    disp_r_int, ok_r = winner_take_all(agg_right)
    del agg_right
    t["sgm"] = time.perf_counter() - tic

    tic = time.perf_counter()
    left_int = np.where(ok_l, disp_l_int.astype(np.float32), np.float32(INVALID))
    right_f = np.where(ok_r, disp_r_int.astype(np.float32), np.float32(INVALID))
    checked = lr_check(left_int, right_f, params.lr_tol)
    final = np.where(np.isfinite(checked), sub_l, np.float32(INVALID))
    final[~mask_left] = INVALID  # search may be dilated; output never is
    t["postprocess"] = time.perf_counter() - tic

    stats = {
        "valid_pixels": int(np.isfinite(final).sum()),
        "lr_rejected": int((np.isfinite(left_int) & ~np.isfinite(checked)).sum()),
    }
    return MatchResult(disp=final, disp_right=right_f, timings=t, stats=stats)

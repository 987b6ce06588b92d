"""Multi-scale patch descriptor network for stereo similarity.

A patch pyramid (dyadic, built by max pooling) feeds one small FCN per
scale; branch outputs are upsampled back to full resolution, concatenated
and fused by an integration FCN into a per-pixel descriptor. One network
serves both views, so left/right weights are shared by construction and
similarity is exactly symmetric. Applied to a whole image the same
network yields a dense descriptor map whose pixel (y, x) describes the
patch centered there; cost volumes reuse those maps instead of
re-running the net per patch.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .nn import (GraphBuilder, Network, SGD, cosine_grad, cosine_similarity,
                 ShapeError, checkpoint)
from .utils import to_float

logger = logging.getLogger(__name__)


@dataclass
class MatcherConfig:
    scale_count: int = 3
    patch_size: int = None          # default 11 << (scale_count - 1)
    branch_channels: tuple = (16, 16)
    integration_channels: tuple = (64,)
    feature_len: int = 112
    seed: int = 0

    def __post_init__(self):
        if self.scale_count < 1:
            raise ValueError("scale_count must be >= 1")
        if self.patch_size is None:
            self.patch_size = 11 * (1 << (self.scale_count - 1))
        if self.patch_size % (1 << (self.scale_count - 1)) != 0:
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by "
                f"2^{self.scale_count - 1}")

    @property
    def stride(self):
        return 1 << (self.scale_count - 1)


def _build_graph(cfg: MatcherConfig) -> Network:
    g = GraphBuilder(rng=np.random.default_rng(cfg.seed))
    x = g.input("image")
    branch_outs = []
    scaled = x
    for s in range(cfg.scale_count):
        if s > 0:
            scaled = g.maxpool(scaled, name=f"pyr{s}")
        h = scaled
        in_ch = 1
        for i, ch in enumerate(cfg.branch_channels):
            h = g.conv(h, in_ch, ch, name=f"s{s}_conv{i}")
            h = g.relu(h, name=f"s{s}_relu{i}")
            in_ch = ch
        for u in range(s):
            h = g.upsample(h, name=f"s{s}_up{u}")
        branch_outs.append(h)
    fused = branch_outs[0] if len(branch_outs) == 1 else g.concat(branch_outs, name="fuse")
    in_ch = cfg.branch_channels[-1] * cfg.scale_count
    h = fused
    for i, ch in enumerate(cfg.integration_channels):
        h = g.conv(h, in_ch, ch, name=f"int_conv{i}")
        h = g.relu(h, name=f"int_relu{i}")
        in_ch = ch
    out = g.conv(h, in_ch, cfg.feature_len, name="features")
    return g.build(out)


class MatcherNet:
    """Shared-weight descriptor network plus its sizing contract."""

    def __init__(self, cfg: MatcherConfig, net: Network = None):
        self.cfg = cfg
        self.net = net if net is not None else _build_graph(cfg)

    @property
    def parameter_count(self):
        return self.net.parameter_count

    def copy(self) -> "MatcherNet":
        return MatcherNet(replace(self.cfg), self.net.copy())

    # -- descriptors -----------------------------------------------------

    def describe(self, patch: np.ndarray) -> np.ndarray:
        """Feature vector of one patch (its own mean/variance normalized)."""
        p = self.cfg.patch_size
        if patch.shape != (p, p):
            raise ShapeError(f"expected {p}x{p} patch, got {patch.shape}")
        x = to_float(patch)
        std = x.std()
        x = (x - x.mean()) / (std if std > 0 else 1.0)
        out = self.net.forward(x[None, None])
        return out[0, :, p // 2, p // 2].copy()

    def describe_map(self, image: np.ndarray) -> np.ndarray:
        """Dense (feature_len, H, W) descriptor map of a whole image.

        Intensities are normalized by patch-sized local mean/variance,
        the dense stand-in for per-patch normalization.
        """
        x = self._normalize_image(image)
        s = self.cfg.stride
        h, w = x.shape
        ph = (-h) % s
        pw = (-w) % s
        if ph or pw:
            x = np.pad(x, ((0, ph), (0, pw)), mode="reflect")
        out = self.net.forward(x[None, None])[0]
        return out[:, :h, :w]

    def _normalize_image(self, image: np.ndarray) -> np.ndarray:
        x = to_float(image)
        win = self.cfg.patch_size
        mu = ndimage.uniform_filter(x, size=win, mode="reflect")
        var = ndimage.uniform_filter(x * x, size=win, mode="reflect") - mu * mu
        return ((x - mu) / np.sqrt(np.maximum(var, 1e-6))).astype(np.float32)

    def similarity(self, left_patch: np.ndarray, right_patch: np.ndarray) -> float:
        """Cosine similarity of the two patch descriptors, in [-1, 1]."""
        return cosine_similarity(self.describe(left_patch), self.describe(right_patch))

    # -- persistence ------------------------------------------------------

    def save(self, path):
        return checkpoint.save(self.net, path, meta={
            "model": "matcher",
            "scale_count": self.cfg.scale_count,
            "patch_size": self.cfg.patch_size,
            "branch_channels": list(self.cfg.branch_channels),
            "integration_channels": list(self.cfg.integration_channels),
            "feature_len": self.cfg.feature_len,
        })

    @classmethod
    def load(cls, path) -> "MatcherNet":
        meta = checkpoint.load_meta(path)
        if meta.get("model") != "matcher":
            raise checkpoint.CheckpointError(f"{path} is not a matcher checkpoint")
        cfg = MatcherConfig(
            scale_count=meta["scale_count"],
            patch_size=meta["patch_size"],
            branch_channels=tuple(meta["branch_channels"]),
            integration_channels=tuple(meta["integration_channels"]),
            feature_len=meta["feature_len"],
        )
        return cls(cfg, checkpoint.load(path))


# -- training -------------------------------------------------------------


@dataclass
class MatcherTrainConfig:
    steps: int = 300
    pairs_per_step: int = 256
    margin: float = 0.2
    neg_offset: tuple = (4, 16)
    lr: float = 0.02
    lr_decay: float = 0.1     # final lr as a fraction of lr, linear schedule
    momentum: float = 0.9
    seed: int = 0


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)


def _frame_tensors(matcher, frames):
    """Pre-normalized image pairs plus sampling bounds per frame."""
    prepared = []
    for f in frames:
        if f.gt_disp is None:
            logger.warning("frame %s has no ground truth; skipped", f.name)
            continue
        ml, _ = f.full_masks()
        prepared.append((matcher._normalize_image(f.left),
                         matcher._normalize_image(f.right),
                         f.gt_disp, ml))
    return prepared


def hinge_pair_loss(left_map, right_map, samples, margin):
    """Hinge loss over (positive, negative) similarity pairs sampled from
    dense maps. Returns (loss, d left_map, d right_map)."""
    ys, xs, xpos, xneg = samples
    u = left_map[:, ys, xs]          # (C, B)
    vp = right_map[:, ys, xpos]
    vn = right_map[:, ys, xneg]

    def cols_cos(a, b):
        na = np.linalg.norm(a, axis=0)
        nb = np.linalg.norm(b, axis=0)
        denom = na * nb
        dot = np.sum(a * b, axis=0)
        sim = np.divide(dot, denom, out=np.zeros_like(dot), where=denom > 0)
        return sim, na, nb

    sp, nu, nvp = cols_cos(u, vp)
    sn, _, nvn = cols_cos(u, vn)
    active = (margin - sp + sn) > 0
    b = ys.size
    loss = float(np.sum(np.maximum(0.0, margin - sp + sn)) / b)

    dl = np.zeros_like(left_map)
    dr = np.zeros_like(right_map)
    ok = active & (nu > 0) & (nvp > 0) & (nvn > 0)
    if ok.any():
        w = 1.0 / b
        uo, vpo, vno = u[:, ok], vp[:, ok], vn[:, ok]
        nuo, nvpo, nvno = nu[ok], nvp[ok], nvn[ok]
        spo, sno = sp[ok], sn[ok]
        # d(-s+)/du and d(+s-)/du
        du = -(vpo / (nuo * nvpo) - spo * uo / (nuo * nuo)) \
            + (vno / (nuo * nvno) - sno * uo / (nuo * nuo))
        dvp = -(uo / (nuo * nvpo) - spo * vpo / (nvpo * nvpo))
        dvn = (uo / (nuo * nvno) - sno * vno / (nvno * nvno))
        yso, xso, xpo, xno = ys[ok], xs[ok], xpos[ok], xneg[ok]
        np.add.at(dl.transpose(1, 2, 0), (yso, xso), (w * du).T)
        np.add.at(dr.transpose(1, 2, 0), (yso, xpo), (w * dvp).T)
        np.add.at(dr.transpose(1, 2, 0), (yso, xno), (w * dvn).T)
    return loss, dl, dr


def _sample_pairs(rng, gt, mask, width, count, neg_lo, neg_hi):
    d = np.where(np.isfinite(gt), np.rint(gt), -1).astype(np.int64)
    ys, xs = np.nonzero((d >= 0) & mask & (np.arange(width)[None, :] - d - neg_hi >= 0))
    if ys.size == 0:
        return None
    pick = rng.integers(0, ys.size, size=count)
    ys, xs = ys[pick], xs[pick]
    dpos = d[ys, xs]
    off = rng.integers(neg_lo, neg_hi + 1, size=count)
    sign = np.where(rng.random(count) < 0.5, -1, 1)
    xneg = xs - dpos + sign * off
    # offsets past either edge flip back inside
    flip = (xneg < 0) | (xneg >= width)
    xneg[flip] = xs[flip] - dpos[flip] - sign[flip] * off[flip]
    xneg = np.clip(xneg, 0, width - 1)
    return ys, xs, xs - dpos, xneg


def train_matcher(matcher: MatcherNet, frames, tcfg: MatcherTrainConfig
                  ) -> TrainHistory:
    """Hinge training on dense maps; updates the matcher in place.

    Pass a freshly built MatcherNet for base training or an existing one
    to resume (transfer stage on augmented data).
    """
    prepared = _frame_tensors(matcher, frames)
    history = TrainHistory()
    if tcfg.steps == 0:
        return history
    if not prepared:
        raise ValueError("no trainable frames (ground-truth disparity required)")
    rng = np.random.default_rng(tcfg.seed)
    opt = SGD(tcfg.lr, tcfg.momentum)
    neg_lo, neg_hi = tcfg.neg_offset
    for step in range(tcfg.steps):
        frac = step / max(1, tcfg.steps - 1)
        opt.lr = tcfg.lr * (1.0 - (1.0 - tcfg.lr_decay) * frac)
        li, ri, gt, ml = prepared[rng.integers(0, len(prepared))]
        samples = _sample_pairs(rng, gt, ml, li.shape[1], tcfg.pairs_per_step,
                                neg_lo, neg_hi)
        if samples is None:
            continue
        lmap, ltape = matcher.net.forward(li[None, None], record=True)
        rmap, rtape = matcher.net.forward(ri[None, None], record=True)
        loss, dl, dr = hinge_pair_loss(lmap[0], rmap[0], samples, tcfg.margin)
        history.loss.append(loss)
        grads = matcher.net.backward(ltape, dl[None])
        grads.add(matcher.net.backward(rtape, dr[None]))
        opt.step(matcher.net, grads)
    return history


def score_separation(matcher: MatcherNet, frames, pairs: int = 512, seed: int = 9,
                     neg_offset=(4, 16)):
    """Mean positive / negative similarity on held-out frames."""
    rng = np.random.default_rng(seed)
    sp_all, sn_all = [], []
    for li, ri, gt, ml in _frame_tensors(matcher, frames):
        samples = _sample_pairs(rng, gt, ml, li.shape[1], pairs, *neg_offset)
        if samples is None:
            continue
        lmap = matcher.net.forward(li[None, None])[0]
        rmap = matcher.net.forward(ri[None, None])[0]
        ys, xs, xpos, xneg = samples
        u = lmap[:, ys, xs]
        for xr, acc in ((xpos, sp_all), (xneg, sn_all)):
            v = rmap[:, ys, xr]
            denom = np.linalg.norm(u, axis=0) * np.linalg.norm(v, axis=0)
            dot = np.sum(u * v, axis=0)
            acc.extend(np.divide(dot, denom, out=np.zeros_like(dot),
                                 where=denom > 0))
    return float(np.mean(sp_all)), float(np.mean(sn_all))

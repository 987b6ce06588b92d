"""U-Net target-region segmentation.

The encoder/decoder runs at a configurable number of dyadic resolution
levels (five by default) with skip concatenations; the head emits
single-channel logits, so probabilities are sigmoid(logits) and an
untrained zero-weight head predicts 0.5 everywhere. Masks produced here
bound the disparity search in the stereo stage.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .nn import GraphBuilder, Network, SGD, checkpoint, cross_entropy, \
    cross_entropy_grad, sigmoid
from .utils import to_float

logger = logging.getLogger(__name__)


@dataclass
class UNetConfig:
    levels: int = 5
    base_channels: int = 16
    channel_cap: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    @property
    def stride(self):
        return 1 << (self.levels - 1)

    def width(self, level):
        return min(self.base_channels << level, self.channel_cap)


def _double_conv(g, src, in_ch, out_ch, tag):
    h = g.conv(src, in_ch, out_ch, name=f"{tag}_a")
    h = g.relu(h)
    h = g.conv(h, out_ch, out_ch, name=f"{tag}_b")
    return g.relu(h)


def _build_unet(cfg: UNetConfig) -> Network:
    g = GraphBuilder(rng=np.random.default_rng(cfg.seed))
    x = g.input("image")
    skips = []
    h = x
    in_ch = 1
    for lvl in range(cfg.levels):
        ch = cfg.width(lvl)
        h = _double_conv(g, h, in_ch, ch, f"enc{lvl}")
        in_ch = ch
        if lvl < cfg.levels - 1:
            skips.append((h, ch))
            h = g.maxpool(h)
    for lvl in range(cfg.levels - 2, -1, -1):
        skip, skip_ch = skips[lvl]
        h = g.upsample(h)
        h = g.concat([h, skip])
        h = _double_conv(g, h, in_ch + skip_ch, cfg.width(lvl), f"dec{lvl}")
        in_ch = cfg.width(lvl)
    out = g.conv(h, in_ch, 1, kernel=1, name="logits")
    return g.build(out)


class SegNet:
    """Wrapper pairing the U-Net graph with its sizing and threshold."""

    def __init__(self, cfg: UNetConfig, net: Network = None, threshold: float = 0.5):
        self.cfg = cfg
        self.net = net if net is not None else _build_unet(cfg)
        self.threshold = threshold

    @property
    def parameter_count(self):
        return self.net.parameter_count

    def logits(self, image: np.ndarray) -> np.ndarray:
        x = to_float(image)
        h, w = x.shape
        s = self.cfg.stride
        ph, pw = (-h) % s, (-w) % s
        if ph or pw:
            x = np.pad(x, ((0, ph), (0, pw)), mode="reflect")
        out = self.net.forward(x[None, None])
        return out[0, 0, :h, :w]

    def segment(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel target probability, same size as the input."""
        return sigmoid(self.logits(image)).astype(np.float32)

    def mask(self, image: np.ndarray, dilation: int = 0) -> np.ndarray:
        m = self.segment(image) >= self.threshold
        if dilation > 0:
            m = ndimage.binary_dilation(m, iterations=dilation)
        return m

    def save(self, path):
        return checkpoint.save(self.net, path, meta={
            "model": "segmenter", "levels": self.cfg.levels,
            "base_channels": self.cfg.base_channels,
            "channel_cap": self.cfg.channel_cap, "threshold": self.threshold,
        })

    @classmethod
    def load(cls, path) -> "SegNet":
        meta = checkpoint.load_meta(path)
        if meta.get("model") != "segmenter":
            raise checkpoint.CheckpointError(f"{path} is not a segmenter checkpoint")
        cfg = UNetConfig(levels=meta["levels"], base_channels=meta["base_channels"],
                         channel_cap=meta["channel_cap"])
        return cls(cfg, checkpoint.load(path), threshold=meta.get("threshold", 0.5))


# -- training -------------------------------------------------------------------


@dataclass
class SegTrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0


@dataclass
class AugmentConfig:
    """Random scalings, rotations and translations applied per copy."""

    factor: int = 10
    scale: tuple = (0.8, 1.25)
    rotate_deg: float = 25.0
    translate_frac: float = 0.1

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


def augment_samples(samples, aug: AugmentConfig, seed: int = 0) -> list:
    """Expand (image, mask) pairs to factor x len(samples) training pairs.

    The original pair is kept; factor - 1 warped copies are added. With
    factor 1 the source set is returned unchanged.
    """
    if aug.factor == 1:
        return list(samples)
    rng = np.random.default_rng(seed)
    out = []
    for img, mask in samples:
        out.append((img, mask))
        h, w = img.shape
        center = np.array([h / 2.0, w / 2.0])
        for _ in range(aug.factor - 1):
            s = rng.uniform(*aug.scale)
            th = np.deg2rad(rng.uniform(-aug.rotate_deg, aug.rotate_deg))
            t = rng.uniform(-aug.translate_frac, aug.translate_frac, 2) * (h, w)
            rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) / s
            offset = center - rot @ center + t
            wimg = ndimage.affine_transform(to_float(img), rot, offset=offset,
                                            order=1, mode="reflect")
            wmask = ndimage.affine_transform(mask.astype(np.float32), rot,
                                             offset=offset, order=0,
                                             mode="constant") > 0.5
            out.append((wimg.astype(np.float32), wmask))
    return out


def train_segmenter(segnet: SegNet, samples, tcfg: SegTrainConfig = None,
                    aug: AugmentConfig = None):
    """Binary cross-entropy training on (image, mask) pairs, in place.

    Returns the per-step loss history.
    """
    tcfg = tcfg or SegTrainConfig()
    if not samples:
        raise ValueError("need at least one (image, mask) sample")
    for img, mask in samples:
        if img.shape != mask.shape:
            raise ValueError(f"image {img.shape} and mask {mask.shape} disagree")
    if aug is not None:
        samples = augment_samples(samples, aug, seed=tcfg.seed)
        logger.info("augmented to %d training pairs", len(samples))
    rng = np.random.default_rng(tcfg.seed)
    opt = SGD(tcfg.lr, tcfg.momentum)
    s = segnet.cfg.stride
    history = []
    for _ in range(tcfg.steps):
        idx = rng.integers(0, len(samples), size=min(tcfg.batch_size, len(samples)))
        imgs = np.stack([to_float(samples[i][0]) for i in idx])[:, None]
        masks = np.stack([samples[i][1] for i in idx])[:, None].astype(np.float32)
        ph, pw = (-imgs.shape[2]) % s, (-imgs.shape[3]) % s
        if ph or pw:
            imgs = np.pad(imgs, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
            masks = np.pad(masks, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
        logits, tape = segnet.net.forward(imgs, record=True)
        history.append(cross_entropy(logits, masks))
        grads = segnet.net.backward(tape, cross_entropy_grad(logits, masks))
        opt.step(segnet.net, grads)
    return history


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    union = (pred | truth).sum()
    if union == 0:
        return 1.0
    return float((pred & truth).sum() / union)

"""Texture recovery: projected-pattern and bubble removal.

A three-resolution pyramid feeds an independent CNN per level; each
level's output is upsampled and concatenated into the next-higher level.
The full-resolution head is zero-initialized and predicts a residual
added to the input, so an untrained restorer is exactly the identity.

The detector shares the same architecture but emits the estimated
degradation (difference image) directly. Unsupervised refinement
minimizes

    mse(in, restored) + lambda * mse(detector(restored), 0)

with gradients routed to the restorer only; the detector stays frozen.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .nn import GraphBuilder, Network, SGD, checkpoint, mse, mse_grad
from .utils import to_float

logger = logging.getLogger(__name__)


@dataclass
class RestoreConfig:
    levels: int = 3
    channels: tuple = (12, 12)
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    @property
    def stride(self):
        return 1 << (self.levels - 1)


def _level_cnn(g, src, in_ch, widths, tag):
    h = src
    for i, ch in enumerate(widths):
        h = g.conv(h, in_ch, ch, name=f"{tag}_conv{i}")
        h = g.relu(h)
        in_ch = ch
    return h, in_ch


def _build_pyramid_net(cfg: RestoreConfig, zero_head: bool) -> Network:
    g = GraphBuilder(rng=np.random.default_rng(cfg.seed))
    x = g.input("image")
    pyramid = [x]
    for lvl in range(1, cfg.levels):
        pyramid.append(g.maxpool(pyramid[-1], name=f"pyr{lvl}"))
    carry, carry_ch = None, 0
    for lvl in range(cfg.levels - 1, -1, -1):
        src = pyramid[lvl]
        in_ch = 1
        if carry is not None:
            carry = g.upsample(carry, name=f"up{lvl}")
            src = g.concat([src, carry], name=f"mix{lvl}")
            in_ch = 1 + carry_ch
        carry, carry_ch = _level_cnn(g, src, in_ch, cfg.channels, f"lvl{lvl}")
    out = g.conv(carry, carry_ch, 1, kernel=1, name="head", zero_init=zero_head)
    return g.build(out)


class _PyramidModel:
    def __init__(self, cfg: RestoreConfig, net: Network, kind: str):
        self.cfg = cfg
        self.net = net
        self.kind = kind

    @property
    def parameter_count(self):
        return self.net.parameter_count

    def _padded_forward(self, batch, record=False):
        s = self.cfg.stride
        h, w = batch.shape[2], batch.shape[3]
        ph, pw = (-h) % s, (-w) % s
        if ph or pw:
            batch = np.pad(batch, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
        if record:
            out, tape = self.net.forward(batch, record=True)
            return out[:, :, :h, :w], tape, (ph, pw)
        return self.net.forward(batch)[:, :, :h, :w]

    def save(self, path):
        return checkpoint.save(self.net, path, meta={
            "model": self.kind, "levels": self.cfg.levels,
            "channels": list(self.cfg.channels)})

    @classmethod
    def _load(cls, path, kind):
        meta = checkpoint.load_meta(path)
        if meta.get("model") != kind:
            raise checkpoint.CheckpointError(f"{path} is not a {kind} checkpoint")
        cfg = RestoreConfig(levels=meta["levels"], channels=tuple(meta["channels"]))
        return cls(cfg, checkpoint.load(path))


class RestoreNet(_PyramidModel):
    """Residual restorer: output = clip(input + predicted residual)."""

    def __init__(self, cfg: RestoreConfig = None, net: Network = None,
                 zero_head: bool = True):
        cfg = cfg or RestoreConfig()
        super().__init__(cfg, net if net is not None
                         else _build_pyramid_net(cfg, zero_head), "restorer")

    def restore(self, image: np.ndarray, tile: int = 512, overlap: int = 16
                ) -> np.ndarray:
        """Recover a single image (any size >= 16 px); output in [0, 1].

        Large inputs are processed in overlapping tiles blended with a
        linear feather so memory stays bounded.
        """
        x = to_float(image)
        h, w = x.shape
        if max(h, w) <= tile:
            resid = self._padded_forward(x[None, None])[0, 0]
            return np.clip(x + resid, 0.0, 1.0)
        resid = np.zeros((h, w), np.float32)
        weight = np.zeros((h, w), np.float32)
        step = tile - overlap
        for y0 in range(0, h, step):
            for x0 in range(0, w, step):
                y1, x1 = min(h, y0 + tile), min(w, x0 + tile)
                ty0, tx0 = max(0, y1 - tile), max(0, x1 - tile)
                part = self._padded_forward(x[ty0:y1, tx0:x1][None, None])[0, 0]
                wgt = _feather(y1 - ty0, x1 - tx0, overlap)
                resid[ty0:y1, tx0:x1] += part * wgt
                weight[ty0:y1, tx0:x1] += wgt
                if x1 == w:
                    break
            if y1 == h:
                break
        resid /= np.maximum(weight, 1e-8)
        return np.clip(x + resid, 0.0, 1.0)

    @classmethod
    def load(cls, path):
        return cls._load(path, "restorer")


class DetectNet(_PyramidModel):
    """Degradation detector: emits the estimated difference image."""

    def __init__(self, cfg: RestoreConfig = None, net: Network = None):
        cfg = cfg or RestoreConfig()
        super().__init__(cfg, net if net is not None
                         else _build_pyramid_net(cfg, zero_head=False), "detector")

    def detect(self, image: np.ndarray) -> np.ndarray:
        return self._padded_forward(to_float(image)[None, None])[0, 0]

    @classmethod
    def load(cls, path):
        return cls._load(path, "detector")


def _feather(h, w, overlap):
    ramp_y = np.minimum(np.arange(h) + 1, overlap) / overlap
    ramp_y = np.minimum(ramp_y, ramp_y[::-1])
    ramp_x = np.minimum(np.arange(w) + 1, overlap) / overlap
    ramp_x = np.minimum(ramp_x, ramp_x[::-1])
    return (ramp_y[:, None] * ramp_x[None, :]).astype(np.float32)


# -- training ----------------------------------------------------------------


@dataclass
class RestoreTrainConfig:
    steps: int = 200
    batch_size: int = 4
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0


def _batches(pairs, batch_size, rng):
    idx = rng.integers(0, len(pairs), size=batch_size)
    a = np.stack([to_float(pairs[i][0]) for i in idx])[:, None]
    b = np.stack([to_float(pairs[i][1]) for i in idx])[:, None]
    return a, b


def _check_pairs(pairs):
    if not pairs:
        raise ValueError("need at least one training pair")
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValueError(f"pair shapes disagree: {a.shape} vs {b.shape}")


def train_restore_supervised(net: RestoreNet, pairs,
                             tcfg: RestoreTrainConfig = None) -> list:
    """Fit degraded -> clean on pixel-aligned pairs; returns loss history.

    Clean targets should be brightness/contrast matched to the inputs
    beforehand (see match_gain_bias).
    """
    tcfg = tcfg or RestoreTrainConfig()
    _check_pairs(pairs)
    rng = np.random.default_rng(tcfg.seed)
    opt = SGD(tcfg.lr, tcfg.momentum)
    history = []
    for _ in range(tcfg.steps):
        degraded, clean = _batches(pairs, tcfg.batch_size, rng)
        resid, tape, _ = net._padded_forward(degraded, record=True)
        restored = degraded + resid
        history.append(mse(restored, clean))
        g = mse_grad(restored, clean)
        opt.step(net.net, net.net.backward(tape, _pad_like(g, tape, net, degraded)))
    return history


def train_detector(net: DetectNet, pairs, tcfg: RestoreTrainConfig = None) -> list:
    """Fit degraded -> (degraded - clean) difference images."""
    tcfg = tcfg or RestoreTrainConfig()
    _check_pairs(pairs)
    rng = np.random.default_rng(tcfg.seed)
    opt = SGD(tcfg.lr, tcfg.momentum)
    history = []
    for _ in range(tcfg.steps):
        degraded, diff = _batches(pairs, tcfg.batch_size, rng)
        est, tape, _ = net._padded_forward(degraded, record=True)
        history.append(mse(est, diff))
        g = mse_grad(est, diff)
        opt.step(net.net, net.net.backward(tape, _pad_like(g, tape, net, degraded)))
    return history


def _pad_like(grad, tape, model, ref_batch):
    """Zero-pad an output-crop gradient back to the padded forward shape."""
    s = model.cfg.stride
    h, w = ref_batch.shape[2], ref_batch.shape[3]
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        grad = np.pad(grad, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return grad


def unsupervised_loss(batch: np.ndarray, restorer: RestoreNet, detector: DetectNet,
                      lam: float):
    """Detector-regularized reconstruction loss and its restorer gradients.

    Returns (loss, fidelity_term, detector_term, Grads for the restorer).
    The detector is frozen: its parameters receive no gradient.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if restorer.cfg.stride != detector.cfg.stride:
        raise ValueError("restorer and detector strides disagree")
    x = np.asarray(batch, dtype=np.float32)
    resid, tape_r, (ph, pw) = restorer._padded_forward(x, record=True)
    restored = x + resid
    fidelity = mse(restored, x)
    d_restored = mse_grad(restored, x)
    if lam > 0:
        det_in = restored
        if ph or pw:
            det_in = np.pad(det_in, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
        response, tape_d = detector.net.forward(det_in, record=True)
        det_term = mse(response, np.zeros_like(response))
        back = detector.net.backward(tape_d, lam * mse_grad(
            response, np.zeros_like(response)))
        g_in = back.inputs["image"][:, :, :x.shape[2], :x.shape[3]]
        d_restored = d_restored + g_in
    else:
        response = _detect_batch(detector, restored)
        det_term = mse(response, np.zeros_like(response))
    grads = restorer.net.backward(tape_r, _pad_like(d_restored, tape_r, restorer, x))
    loss = fidelity + lam * det_term
    return loss, fidelity, det_term, grads


def _detect_batch(detector: DetectNet, batch: np.ndarray) -> np.ndarray:
    return detector._padded_forward(np.asarray(batch, dtype=np.float32))


def train_unsupervised(restorer: RestoreNet, detector: DetectNet, images,
                       lam: float = 1.0, tcfg: RestoreTrainConfig = None) -> list:
    """Refine the restorer against a frozen detector on unlabeled images."""
    tcfg = tcfg or RestoreTrainConfig()
    if not len(images):
        raise ValueError("need at least one image")
    rng = np.random.default_rng(tcfg.seed)
    opt = SGD(tcfg.lr, tcfg.momentum)
    history = []
    for _ in range(tcfg.steps):
        idx = rng.integers(0, len(images), size=tcfg.batch_size)
        batch = np.stack([to_float(images[i]) for i in idx])[:, None]
        loss, fid, det, grads = unsupervised_loss(batch, restorer, detector, lam)
        history.append((loss, fid, det))
        opt.step(restorer.net, grads)
    return history


def match_gain_bias(reference: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Least-squares gain+bias fit of target onto reference.

    Used to brightness/contrast match clean ground-truth images to their
    degraded counterparts before supervised training.
    """
    t = to_float(target).ravel()
    r = to_float(reference).ravel()
    a = np.vstack([t, np.ones_like(t)]).T
    (gain, bias), *_ = np.linalg.lstsq(a, r, rcond=None)
    return np.clip(gain * to_float(target) + bias, 0.0, 1.0).astype(np.float32)

"""Stereo frames and the on-disk dataset layout.

One frame per directory, Middlebury style:

    <frame>/im0.png      left image, 8-bit grayscale
    <frame>/im1.png      right image
    <frame>/disp0.pfm    left ground-truth disparity (optional)
    <frame>/mask0.png    left target-region mask, 0/255 (optional)
    <frame>/mask1.png    right target-region mask (optional)
    <frame>/bubble0.png  left bubble mask, augmented samples only
    <frame>/bubble1.png  right bubble mask
    <frame>/meta.json    free-form provenance (condition, seeds, ...)

A dataset is either a directory of such frame directories or a JSON
manifest listing them.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import pfm

logger = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class StereoFrame:
    """A rectified pair with optional masks and ground truth."""

    left: np.ndarray
    right: np.ndarray
    mask_left: np.ndarray = None
    mask_right: np.ndarray = None
    gt_disp: np.ndarray = None
    bubble_left: np.ndarray = None
    bubble_right: np.ndarray = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DataError(f"{self.name}: left {self.left.shape} != right {self.right.shape}")
        if self.gt_disp is not None and self.gt_disp.shape != self.left.shape:
            raise DataError(f"{self.name}: disparity shape {self.gt_disp.shape} "
                            f"!= image shape {self.left.shape}")

    @property
    def shape(self):
        return self.left.shape

    def full_masks(self):
        """Target masks, defaulting to all-true when the frame has none."""
        ml = self.mask_left if self.mask_left is not None else np.ones(self.shape, bool)
        mr = self.mask_right if self.mask_right is not None else np.ones(self.shape, bool)
        return ml, mr


def save_image(path, img: np.ndarray) -> None:
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    Image.fromarray(img, mode="L").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_frame(directory, frame: StereoFrame) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image(directory / "im0.png", frame.left)
    save_image(directory / "im1.png", frame.right)
    if frame.gt_disp is not None:
        pfm.write_pfm(directory / "disp0.pfm", frame.gt_disp)
    if frame.mask_left is not None:
        save_image(directory / "mask0.png", frame.mask_left)
    if frame.mask_right is not None:
        save_image(directory / "mask1.png", frame.mask_right)
    if frame.bubble_left is not None:
        save_image(directory / "bubble0.png", frame.bubble_left)
    if frame.bubble_right is not None:
        save_image(directory / "bubble1.png", frame.bubble_right)
    meta = dict(frame.meta)
    meta.setdefault("name", frame.name or directory.name)
    (directory / "meta.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_frame(directory, default_full_mask: bool = True) -> StereoFrame:
    directory = Path(directory)
    left_path = directory / "im0.png"
    if not left_path.exists():
        raise DataError(f"{directory}: no im0.png")
    left = load_image(left_path)
    right = load_image(directory / "im1.png")

    def opt_mask(name):
        p = directory / name
        return load_image(p) > 127 if p.exists() else None

    gt = None
    disp_path = directory / "disp0.pfm"
    if disp_path.exists():
        gt = pfm.read_pfm(disp_path)

    meta = {}
    meta_path = directory / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())

    mask_left = opt_mask("mask0.png")
    mask_right = opt_mask("mask1.png")
    if mask_left is None and default_full_mask:
        logger.warning("%s: no mask0.png, using full target mask", directory)
        meta["default_mask"] = True

    return StereoFrame(
        left=left, right=right,
        mask_left=mask_left, mask_right=mask_right,
        gt_disp=gt,
        bubble_left=opt_mask("bubble0.png"),
        bubble_right=opt_mask("bubble1.png"),
        name=meta.get("name", directory.name),
        meta=meta,
    )


def frame_dirs(dataset_path) -> list:
    """Resolve a manifest file or a dataset directory into frame dirs."""
    p = Path(dataset_path)
    if p.is_file():
        manifest = json.loads(p.read_text())
        root = Path(manifest.get("root", p.parent))
        if not root.is_absolute():
            root = p.parent / root
        return [root / entry["dir"] for entry in manifest["samples"]]
    if p.is_dir():
        dirs = sorted(d for d in p.iterdir() if (d / "im0.png").exists())
        # frames may be nested one level deeper (frame/condition layout)
        if not dirs:
            dirs = sorted(d for sub in sorted(p.iterdir()) if sub.is_dir()
                          for d in sorted(sub.iterdir()) if (d / "im0.png").exists())
        return dirs
    raise DataError(f"{dataset_path}: not a dataset directory or manifest")


def load_dataset(dataset_path) -> list:
    """Load every readable frame; corrupt frames are skipped with a warning."""
    dirs = frame_dirs(dataset_path)
    if not dirs:
        logger.warning("%s: empty dataset", dataset_path)
    frames = []
    for d in dirs:
        try:
            frames.append(load_frame(d))
        except (DataError, pfm.PfmError, OSError) as e:
            logger.warning("skipping frame %s: %s", d, e)
    return frames


def write_manifest(path, root, sample_dirs, extras=None) -> Path:
    path = Path(path)
    root = Path(root)
    samples = []
    for i, d in enumerate(sample_dirs):
        entry = {"dir": str(Path(d).relative_to(root))}
        if extras:
            entry.update(extras[i])
        samples.append(entry)
    path.write_text(json.dumps({"root": str(root), "samples": samples}, indent=1))
    return path

"""Metric 3D reconstruction from disparity maps and evaluation metrics.

Depth follows z = focal * baseline / disparity under rectified pinhole
geometry. Clouds are exported as binary little-endian PLY with normals
estimated by local plane fits, ready for external Poisson meshing.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .calibration import CameraModel
from .pfm import valid_mask

logger = logging.getLogger(__name__)


@dataclass
class PointCloud:
    points: np.ndarray                    # (N, 3) float64, meters, z > 0
    colors: np.ndarray = None             # (N, 3) uint8
    pixels: np.ndarray = None             # (N, 2) int32 source (x, y)
    normals: np.ndarray = None            # (N, 3) float32
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return self.points.shape[0]

    def take(self, idx) -> "PointCloud":
        return PointCloud(
            points=self.points[idx],
            colors=None if self.colors is None else self.colors[idx],
            pixels=None if self.pixels is None else self.pixels[idx],
            normals=None if self.normals is None else self.normals[idx],
            stats=dict(self.stats))


def triangulate(disp: np.ndarray, model: CameraModel, image: np.ndarray = None,
                depth_hint: float = None) -> PointCloud:
    """Back-project a disparity map into metric camera-frame points.

    Pixels with non-positive disparity are dropped and counted in
    stats["dropped_nonpositive"].
    """
    focal = model.focal_at(depth_hint) if depth_hint is not None \
        else model.anchors[0].focal
    cx, cy = model.principal
    ys, xs = np.nonzero(valid_mask(disp))
    d = disp[ys, xs].astype(np.float64)
    positive = d > 0
    dropped = int((~positive).sum())
    if dropped:
        logger.warning("dropped %d valid pixels with disparity <= 0", dropped)
    ys, xs, d = ys[positive], xs[positive], d[positive]
    z = focal * model.baseline / d
    x = (xs - cx) * z / focal
    y = (ys - cy) * z / focal
    colors = None
    if image is not None:
        g = image[ys, xs]
        colors = np.stack([g, g, g], axis=1).astype(np.uint8)
    return PointCloud(
        points=np.stack([x, y, z], axis=1),
        colors=colors,
        pixels=np.stack([xs, ys], axis=1).astype(np.int32),
        stats={"dropped_nonpositive": dropped, "focal": focal,
               "baseline": model.baseline})


def project(points: np.ndarray, model: CameraModel, depth_hint: float = None
            ) -> np.ndarray:
    """Pinhole projection of camera-frame points back to pixels."""
    focal = model.focal_at(depth_hint) if depth_hint is not None \
        else model.anchors[0].focal
    cx, cy = model.principal
    p = np.asarray(points, dtype=np.float64)
    return np.stack([cx + focal * p[:, 0] / p[:, 2],
                     cy + focal * p[:, 1] / p[:, 2]], axis=1)


def remove_outliers(cloud: PointCloud, k: int = 16, sigma: float = 2.0
                    ) -> PointCloud:
    """Statistical filter: drop points whose mean k-NN distance exceeds
    mu + sigma * std of the cloud-wide distribution."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(cloud)
    if n <= k:
        logger.warning("cloud of %d points too small for k=%d; returned unchanged",
                       n, k)
        return cloud
    tree = cKDTree(cloud.points)
    dists, _ = tree.query(cloud.points, k=k + 1)
    mean_d = dists[:, 1:].mean(axis=1)
    cut = mean_d.mean() + sigma * mean_d.std()
    keep = mean_d <= cut
    out = cloud.take(keep)
    out.stats["outliers_removed"] = int((~keep).sum())
    return out


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Per-point normals from k-NN plane fits, oriented toward the camera."""
    n = len(cloud)
    if n <= k:
        logger.warning("cloud of %d points too small for normal estimation", n)
        cloud.normals = np.tile(np.array([0, 0, -1.0], np.float32), (n, 1))
        return cloud
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k + 1)
    neigh = cloud.points[idx]                      # (N, k+1, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                        # smallest-eigenvalue direction
    flip = np.einsum("ni,ni->n", normals, cloud.points) > 0
    normals[flip] *= -1.0
    cloud.normals = normals.astype(np.float32)
    return cloud


# -- PLY ------------------------------------------------------------------------


def save_ply(path, cloud: PointCloud) -> Path:
    """Binary little-endian PLY with positions, optional normals and colors."""
    path = Path(path)
    n = len(cloud)
    props = ["property float x", "property float y", "property float z"]
    if cloud.normals is not None:
        props += ["property float nx", "property float ny", "property float nz"]
    if cloud.colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    header = "\n".join([
        "ply", "format binary_little_endian 1.0",
        f"element vertex {n}", *props, "end_header", ""])
    fields = [cloud.points.astype("<f4")]
    if cloud.normals is not None:
        fields.append(cloud.normals.astype("<f4"))
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        float_block = np.concatenate(fields, axis=1)
        if cloud.colors is None:
            f.write(float_block.tobytes())
        else:
            row_fmt = "<" + "f" * float_block.shape[1] + "BBB"
            for i in range(n):
                f.write(struct.pack(row_fmt, *float_block[i], *cloud.colors[i]))
    return path


def load_ply(path) -> PointCloud:
    """Reader for the subset written by save_ply (round-trip checks)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        if b"binary_little_endian" not in f.readline():
            raise ValueError(f"{path}: expected binary little-endian PLY")
        n = 0
        props = []
        while True:
            line = f.readline().strip()
            if line == b"end_header":
                break
            if line.startswith(b"element vertex"):
                n = int(line.split()[-1])
            elif line.startswith(b"property"):
                props.append(line.split()[1:])
        float_names = [p[1].decode() for p in props if p[0] == b"float"]
        has_colors = any(p[0] == b"uchar" for p in props)
        nf = len(float_names)
        points = np.empty((n, 3))
        normals = np.empty((n, 3), np.float32) if "nx" in float_names else None
        colors = np.empty((n, 3), np.uint8) if has_colors else None
        row_size = nf * 4 + (3 if has_colors else 0)
        raw = f.read(n * row_size)
        for i in range(n):
            off = i * row_size
            vals = struct.unpack_from("<" + "f" * nf, raw, off)
            points[i] = vals[:3]
            if normals is not None:
                normals[i] = vals[3:6]
            if has_colors:
                colors[i] = struct.unpack_from("BBB", raw, off + nf * 4)
    return PointCloud(points=points, normals=normals, colors=colors)


# -- evaluation -------------------------------------------------------------------


def disparity_metrics(disp: np.ndarray, gt: np.ndarray, mask: np.ndarray = None,
                      bad_threshold: float = 1.0) -> dict:
    """RMSE over mutually valid pixels plus the bad-pixel rate.

    The bad rate is computed over ground-truth-valid pixels (inside the
    mask when given); estimates that are missing there count as bad.
    """
    if disp.shape != gt.shape:
        raise ValueError(f"shape mismatch: {disp.shape} vs {gt.shape}")
    gt_ok = valid_mask(gt)
    if mask is not None:
        gt_ok &= mask
    if not gt_ok.any():
        raise ValueError("no overlapping valid pixels; nothing to evaluate")
    est_ok = valid_mask(disp)
    both = gt_ok & est_ok
    err = np.abs(disp[both] - gt[both])
    rmse = float(np.sqrt(np.mean(err ** 2))) if both.any() else float("inf")
    bad = (err > bad_threshold).sum() + (gt_ok & ~est_ok).sum()
    return {
        "rmse": rmse,
        "bad_ratio": float(bad / gt_ok.sum()),
        "coverage": float(both.sum() / gt_ok.sum()),
        "evaluated": int(gt_ok.sum()),
    }


def cloud_rmse(cloud: PointCloud, reference: PointCloud) -> float:
    """RMS nearest-neighbor distance from cloud points to a reference cloud."""
    if len(cloud) == 0 or len(reference) == 0:
        raise ValueError("empty cloud; nothing to evaluate")
    tree = cKDTree(reference.points)
    d, _ = tree.query(cloud.points)
    return float(np.sqrt(np.mean(d ** 2)))


def fit_plane(points: np.ndarray):
    """Total least-squares plane; returns (unit normal, offset, rms residual)
    with the plane satisfying normal . p = offset."""
    p = np.asarray(points, dtype=np.float64)
    centroid = p.mean(axis=0)
    centered = p - centroid
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    offset = float(normal @ centroid)
    rms = float(np.sqrt(np.mean((centered @ normal) ** 2)))
    return normal, offset, rms

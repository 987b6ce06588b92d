"""Middlebury-convention PFM disparity maps.

Grayscale ``Pf`` maps, rows stored bottom-to-top, scale sign encoding
endianness. Invalid pixels are +inf.
"""

from pathlib import Path

import numpy as np

INVALID = np.inf


class PfmError(ValueError):
    pass


def write_pfm(path, data: np.ndarray, scale: float = 1.0) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise PfmError(f"only grayscale maps supported, got shape {data.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(f"{-abs(scale):.6f}\n".encode())  # negative scale = little endian
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise PfmError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise PfmError(f"{path}: malformed dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise PfmError(f"{path}: truncated payload")
        data = np.frombuffer(raw, dtype=dtype, count=count)
    if channels == 3:
        data = data.reshape(h, w, 3)
    else:
        data = data.reshape(h, w)
    return data[::-1].astype(np.float32)


def valid_mask(disp: np.ndarray) -> np.ndarray:
    """Pixels carrying a usable disparity (finite values)."""
    return np.isfinite(disp)


def disparity_path(directory, view: int = 0) -> Path:
    return Path(directory) / f"disp{view}.pfm"

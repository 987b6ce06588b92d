"""Shared helpers: thread budget, RNG streams, image conversions."""

import os

import numpy as np

THREADS_ENV = "UWSTEREO_THREADS"


def thread_count() -> int:
    """Worker threads for internally parallel stages.

    Overridable with the UWSTEREO_THREADS environment variable.
    """
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def rng_stream(*keys) -> np.random.Generator:
    """Derive an independent RNG from a root seed plus stream keys.

    Non-integer keys (frame names, condition labels) are hashed into the
    seed sequence so every (seed, frame, condition) triple gets its own
    reproducible stream.
    """
    ints = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            ints.append(int(k) & 0xFFFFFFFF)
        else:
            h = 2166136261
            for ch in str(k).encode():
                h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
            ints.append(h)
    return np.random.default_rng(np.random.SeedSequence(ints))


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [0, 1]; float input is passed through as float32."""
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return np.asarray(img, dtype=np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """float [0, 1] -> uint8 [0, 255] with rounding and clamping."""
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float32) * 255.0), 0, 255).astype(np.uint8)

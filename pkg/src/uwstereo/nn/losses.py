"""Scalar losses and similarity functions, each with an explicit gradient."""

import warnings

import numpy as np


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error over all elements."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def mse_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d mse / d a."""
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return (2.0 / a.size) * (a - b)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with logits; labels in {0, 1}.

    Uses the log1p(exp(-|z|)) form so large logits stay finite.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"cross_entropy shape mismatch: {z.shape} vs {y.shape}")
    # CE = max(z,0) - z*y + log(1 + exp(-|z|))
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(loss))


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d CE / d logits = (sigmoid(z) - y) / N."""
    z = np.asarray(logits)
    y = np.asarray(labels, dtype=z.dtype)
    return (sigmoid(z) - y) / z.size


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two flattened vectors, in [-1, 1].

    A zero-norm input is degenerate; the similarity is defined as 0 and a
    warning is emitted instead of aborting the caller.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"cosine shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("zero-norm vector in cosine_similarity; returning 0.0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_grad(u: np.ndarray, v: np.ndarray):
    """Gradients of cosine_similarity w.r.t. both arguments.

    Zero-norm inputs get zero gradients (the similarity is pinned to 0 there).
    """
    u64 = np.asarray(u, dtype=np.float64).ravel()
    v64 = np.asarray(v, dtype=np.float64).ravel()
    nu = np.linalg.norm(u64)
    nv = np.linalg.norm(v64)
    if nu == 0.0 or nv == 0.0:
        return np.zeros_like(u64).reshape(np.shape(u)), np.zeros_like(v64).reshape(np.shape(v))
    c = np.dot(u64, v64) / (nu * nv)
    du = v64 / (nu * nv) - c * u64 / (nu * nu)
    dv = u64 / (nu * nv) - c * v64 / (nv * nv)
    return du.reshape(np.shape(u)), dv.reshape(np.shape(v))

"""PCA projection of high-dimensional features to compact vectors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_store import read_tensor, write_tensor


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (d, D), orthonormal rows
    explained_variance: np.ndarray  # (d,), nonincreasing

    @property
    def in_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]


def pca_fit(X, d: int) -> PcaModel:
    """Top-d principal axes of X (N, D) via SVD of the centered matrix.

    Sign convention: the largest-magnitude entry of each axis is positive,
    which makes the fit a pure function of (X, d). Requesting more axes than
    the numerical rank of the centered data supports is an error.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D (N, D), got shape {X.shape}")
    n, dim = X.shape
    if n < 2:
        raise ValueError("need at least 2 samples to fit PCA")
    if not 1 <= d <= min(dim, n):
        raise ValueError(f"d must lie in [1, {min(dim, n)}], got {d}")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, dim) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.count_nonzero(s > tol))
    if d > rank:
        raise ValueError(f"data supports only {rank} principal axes, requested {d}")
    components = vt[:d].copy()
    flip = components[np.arange(d), np.argmax(np.abs(components), axis=1)] < 0
    components[flip] *= -1.0
    explained = s[:d] ** 2 / (n - 1)
    for arr in (mean, components, explained):
        arr.flags.writeable = False
    return PcaModel(mean, components, explained)


def pca_apply(model: PcaModel, v) -> np.ndarray:
    """Project vector(s) onto the principal axes: components @ (v - mean).

    Accepts a single (D,) vector or a (N, D) matrix. Callers re-L2-normalize
    afterwards before any similarity measure.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        if v.shape[0] != model.in_dim:
            raise ValueError(f"expected dim {model.in_dim}, got {v.shape[0]}")
        return model.components @ (v - model.mean)
    if v.ndim == 2:
        if v.shape[1] != model.in_dim:
            raise ValueError(f"expected dim {model.in_dim}, got {v.shape[1]}")
        return (v - model.mean) @ model.components.T
    raise ValueError(f"expected 1-D or 2-D input, got rank {v.ndim}")


def save_pca(out_dir: str | Path, model: PcaModel) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(out_dir / "mean.ftns", model.mean)
    write_tensor(out_dir / "components.ftns", model.components)
    write_tensor(out_dir / "explained_variance.ftns", model.explained_variance)
    sidecar = {"D": model.in_dim, "d": model.out_dim}
    (out_dir / "model.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_pca(model_dir: str | Path) -> PcaModel:
    model_dir = Path(model_dir)
    mean = read_tensor(model_dir / "mean.ftns").astype(np.float64)
    components = read_tensor(model_dir / "components.ftns").astype(np.float64)
    explained = read_tensor(model_dir / "explained_variance.ftns").astype(np.float64)
    for arr in (mean, components, explained):
        arr.flags.writeable = False
    return PcaModel(mean, components, explained)

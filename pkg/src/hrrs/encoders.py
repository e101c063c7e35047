"""Local-descriptor extraction and the aggregation encoders (BOVW, VLAD, IFK).

A rank-3 feature map [h, w, c] flattens into m = h*w local descriptors of
dimension c (one per spatial site, row-major order). Encoders turn a
descriptor set into a single compact vector:

  bovw  histogram of hard nearest-centroid assignments       -> k values
  vlad  per-centroid sums of descriptor residuals            -> k*d values
  ifk   Fisher vector w.r.t. GMM means and diagonal variances -> 2*k*d values
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebooks import Codebook, GmmModel, _assign, gmm_responsibilities
from .tensor_store import read_tensor, write_tensor

ZERO_NORM_EPS = 1e-12

ENCODER_TAGS = ("bovw", "vlad", "ifk", "fc_raw", "ldcnn")


@dataclass(frozen=True)
class EncodedFeature:
    vector: np.ndarray
    encoder_tag: str
    normalized: bool

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def extract_descriptors(feature_map: np.ndarray, apply_relu: bool = False) -> np.ndarray:
    """Flatten a [h, w, c] feature map into (h*w, c) local descriptors."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be rank 3 [h, w, c], got rank {fmap.ndim}")
    h, w, c = fmap.shape
    descriptors = fmap.reshape(h * w, c)
    if apply_relu:
        descriptors = np.maximum(descriptors, 0.0)
    return descriptors


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def power_normalize(v: np.ndarray, alpha: float) -> np.ndarray:
    """Signed power normalization sign(z) * |z|**alpha."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.abs(v) ** alpha


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return (v / ||v||, True), or (v, False) when the norm is ~zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= ZERO_NORM_EPS:
        return v, False
    return v / norm, True


def _check_descriptors(descriptors: np.ndarray, dim: int) -> np.ndarray:
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"descriptors must be 2-D (m, n), got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty descriptor set (no spatial sites)")
    if X.shape[1] != dim:
        raise ValueError(f"descriptor dim {X.shape[1]} does not match model dim {dim}")
    return X


def encode_bovw(cb: Codebook, descriptors: np.ndarray) -> EncodedFeature:
    """L2-normalized histogram of hard assignments over the codebook."""
    X = _check_descriptors(descriptors, cb.dim)
    labels, _ = _assign(X, cb.centroids)
    counts = np.bincount(labels, minlength=cb.k).astype(np.float64)
    vec, normalized = l2_normalize(counts)
    return EncodedFeature(vec, "bovw", normalized)


def vlad_residuals(cb: Codebook, descriptors: np.ndarray) -> np.ndarray:
    """Raw VLAD matrix (k, d): per-cluster sums of (x - centroid) residuals."""
    X = _check_descriptors(descriptors, cb.dim)
    labels, _ = _assign(X, cb.centroids)
    residuals = np.zeros_like(cb.centroids)
    np.add.at(residuals, labels, X - cb.centroids[labels])
    return residuals


def encode_vlad(cb: Codebook, descriptors: np.ndarray) -> EncodedFeature:
    """Concatenated residual sums, globally L2-normalized (k*d values)."""
    raw = vlad_residuals(cb, descriptors).ravel()
    vec, normalized = l2_normalize(raw)
    return EncodedFeature(vec, "vlad", normalized)


def fisher_vector_raw(g: GmmModel, descriptors: np.ndarray) -> np.ndarray:
    """Unnormalized Fisher vector w.r.t. means and diagonal variances (2*k*d).

    For component j and dimension r, with responsibilities gamma_i(j) and
    sigma = sqrt(variance):

      mean part     (1 / (m*sqrt(w_j)))   * sum_i gamma_i(j) * (x_ir - mu_jr) / sigma_jr
      variance part (1 / (m*sqrt(2 w_j))) * sum_i gamma_i(j) * ((x_ir - mu_jr)^2 / sigma_jr^2 - 1)
    """
    X = _check_descriptors(descriptors, g.dim)
    m = X.shape[0]
    resp = gmm_responsibilities(g, X)
    s0 = resp.sum(axis=0)  # (k,)
    s1 = resp.T @ X  # (k, d)
    s2 = resp.T @ (X * X)  # (k, d)
    mu, var = g.means, g.variances
    sigma = np.sqrt(var)
    w = g.weights
    active = w > 0
    wsafe = np.where(active, w, 1.0)
    g_mu = (s1 - s0[:, None] * mu) / sigma / (m * np.sqrt(wsafe))[:, None]
    g_var = (s2 - 2.0 * mu * s1 + s0[:, None] * (mu * mu - var)) / var
    g_var /= (m * np.sqrt(2.0 * wsafe))[:, None]
    g_mu[~active] = 0.0
    g_var[~active] = 0.0
    return np.concatenate([g_mu.ravel(), g_var.ravel()])


def encode_ifk(g: GmmModel, descriptors: np.ndarray, alpha: float = 0.5) -> EncodedFeature:
    """Improved Fisher kernel: signed power normalization then global L2."""
    raw = fisher_vector_raw(g, descriptors)
    vec, normalized = l2_normalize(power_normalize(raw, alpha))
    return EncodedFeature(vec, "ifk", normalized)


def encode_fc(fc_vector: np.ndarray, apply_relu: bool = False) -> EncodedFeature:
    """L2-normalized fully-connected activation vector (optional ReLU first)."""
    v = np.asarray(fc_vector, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty Fc vector")
    if apply_relu:
        v = np.maximum(v, 0.0)
    vec, normalized = l2_normalize(v)
    return EncodedFeature(vec, "fc_raw", normalized)


# ---------------------------------------------------------------------------
# Feature set serialization: one FTNS vector per image plus a JSON index.


def save_features(out_dir: str | Path, features: dict[str, EncodedFeature]) -> Path:
    """Write one tensor per image and an index {id -> path, encoder_tag, dim}."""
    if not features:
        raise ValueError("no features to save")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tags = {f.encoder_tag for f in features.values()}
    dims = {f.dim for f in features.values()}
    if len(tags) != 1 or len(dims) != 1:
        raise ValueError(f"mixed encoder tags {tags} or dims {dims}")
    vectors = {}
    for image_id in sorted(features):
        feat = features[image_id]
        rel = f"{image_id}.ftns"
        write_tensor(out_dir / rel, feat.vector)
        vectors[image_id] = {"path": rel, "normalized": feat.normalized}
    index = {"encoder_tag": tags.pop(), "dim": dims.pop(), "vectors": vectors}
    index_path = out_dir / "features.json"
    index_path.write_text(json.dumps(index, indent=2) + "\n")
    return index_path


def load_features(feature_dir: str | Path) -> dict[str, EncodedFeature]:
    feature_dir = Path(feature_dir)
    index = json.loads((feature_dir / "features.json").read_text())
    tag = index["encoder_tag"]
    features = {}
    for image_id, meta in index["vectors"].items():
        vec = read_tensor(feature_dir / meta["path"]).astype(np.float64)
        features[image_id] = EncodedFeature(vec, tag, bool(meta["normalized"]))
    return features

"""Visual dictionaries: k-means codebooks and diagonal-covariance GMMs.

Both fits are deterministic given (data, k, seed) and record their objective
at every iteration so convergence behaviour can be audited after the fact:
k-means keeps the per-iteration inertia, EM the per-iteration mean
log-likelihood.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_store import read_tensor, write_tensor

# Codebook training on very large descriptor pools works on a seeded uniform
# subsample to bound memory.
SUBSAMPLE_LIMIT = 500_000
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class Codebook:
    """k-means centroids plus the inertia recorded at each Lloyd iteration."""

    centroids: np.ndarray  # (k, d) float64
    inertia_history: tuple[float, ...]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance Gaussian mixture with its EM log-likelihood trace."""

    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d)
    loglik_history: tuple[float, ...]

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"descriptor set must be 2-D (N, d), got shape {X.shape}")
    return X


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances (N, k), chunked to bound peak memory."""
    n, k = X.shape[0], C.shape[0]
    x2 = np.einsum("nd,nd->n", X, X)
    c2 = np.einsum("kd,kd->k", C, C)
    out = np.empty((n, k))
    step = max(1, (1 << 24) // max(k, 1))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        block = x2[lo:hi, None] - 2.0 * (X[lo:hi] @ C.T) + c2[None, :]
        np.maximum(block, 0.0, out=out[lo:hi])
    return out


def _assign(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = _sq_dists(X, C)
    labels = np.argmin(d2, axis=1)  # ties resolve to the lowest index
    # Exact per-point distances (the expansion above leaves float crumbs).
    diffs = X - C[labels]
    return labels, np.einsum("nd,nd->n", diffs, diffs)


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[j] = X[idx]
        np.minimum(d2, _sq_dists(X, centers[j : j + 1])[:, 0], out=d2)
    return centers


def _update_centroids(
    X: np.ndarray, labels: np.ndarray, point_d2: np.ndarray, k: int, old: np.ndarray
) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(old)
    np.add.at(sums, labels, X)
    new = old.copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    # Empty clusters are re-seeded to the point currently farthest from its
    # assigned centroid; repeated empties take distinct points.
    if not nonempty.all():
        d2 = point_d2.copy()
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(d2))
            new[j] = X[far]
            d2[far] = 0.0
    return new


def _maybe_subsample(X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if X.shape[0] > SUBSAMPLE_LIMIT:
        return X[rng.choice(X.shape[0], SUBSAMPLE_LIMIT, replace=False)]
    return X


def kmeans_fit(X, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> Codebook:
    """Lloyd's algorithm from k-means++ seeding.

    Stops when the relative inertia decrease falls below `tol` or after
    `max_iter` update steps. Deterministic given (X, k, seed, max_iter, tol).
    """
    X = _as_points(X)
    if k < 1:
        raise ValueError("k must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    rng = np.random.default_rng(seed)
    X = _maybe_subsample(X, rng)
    if X.shape[0] < k:
        raise ValueError(f"insufficient data: {X.shape[0]} points for k={k}")
    centers = _kmeans_pp_init(X, k, rng)
    labels, d2 = _assign(X, centers)
    history = [float(d2.sum())]
    for _ in range(max_iter):
        centers = _update_centroids(X, labels, d2, k, centers)
        labels, d2 = _assign(X, centers)
        inertia = float(d2.sum())
        history.append(inertia)
        prev = history[-2]
        if prev == 0.0 or (prev - inertia) < tol * prev:
            break
    centers = centers.copy()
    centers.flags.writeable = False
    return Codebook(centers, tuple(history))


def kmeans_assign(cb: Codebook, x) -> int:
    """Index of the nearest centroid; ties break to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cb.dim,):
        raise ValueError(f"expected vector of dim {cb.dim}, got shape {x.shape}")
    d2 = ((cb.centroids - x) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def _log_joint(X: np.ndarray, weights, means, variances) -> np.ndarray:
    """log(w_j) + log N(x | mu_j, diag var_j) for every point/component pair."""
    inv = 1.0 / variances
    const = -0.5 * (means.shape[1] * math.log(2.0 * math.pi) + np.log(variances).sum(axis=1))
    quad = (X * X) @ inv.T - 2.0 * (X @ (means * inv).T) + (means * means * inv).sum(axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw + const - 0.5 * quad


def _e_step(X, weights, means, variances) -> tuple[np.ndarray, float]:
    logj = _log_joint(X, weights, means, variances)
    m = logj.max(axis=1, keepdims=True)
    ll = m[:, 0] + np.log(np.exp(logj - m).sum(axis=1))
    resp = np.exp(logj - ll[:, None])
    return resp, float(ll.mean())


def gmm_fit(X, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> GmmModel:
    """Diagonal-covariance EM initialized from a k-means fit.

    Initial means are the centroids, variances the within-cluster variances
    (floored at VARIANCE_FLOOR), weights the cluster fractions. Stops when
    the mean log-likelihood improves by less than `tol`.
    """
    X = _as_points(X)
    rng = np.random.default_rng(seed)
    X = _maybe_subsample(X, rng)
    if X.shape[0] < k:
        raise ValueError(f"insufficient data: {X.shape[0]} points for k={k}")
    n, d = X.shape
    cb = kmeans_fit(X, k, seed=seed, max_iter=max_iter, tol=tol)
    labels, _ = _assign(X, cb.centroids)
    counts = np.bincount(labels, minlength=k)
    weights = counts / n
    means = cb.centroids.copy()
    variances = np.full((k, d), VARIANCE_FLOOR)
    for j in range(k):
        members = X[labels == j]
        if len(members):
            variances[j] = np.maximum(
                ((members - means[j]) ** 2).mean(axis=0), VARIANCE_FLOOR
            )
    history: list[float] = []
    for it in range(max_iter):
        resp, mean_ll = _e_step(X, weights, means, variances)
        history.append(mean_ll)
        if it >= 1 and history[-1] - history[-2] < tol:
            break
        nk = resp.sum(axis=0)
        weights = nk / n
        active = nk > 0
        if active.any():
            mu_new = (resp.T @ X)[active] / nk[active, None]
            ex2 = (resp.T @ (X * X))[active] / nk[active, None]
            means[active] = mu_new
            variances[active] = np.maximum(ex2 - mu_new**2, VARIANCE_FLOOR)
    for arr in (weights, means, variances):
        arr.flags.writeable = False
    return GmmModel(weights, means, variances, tuple(history))


def gmm_responsibilities(g: GmmModel, X) -> np.ndarray:
    """Posterior component probabilities (N, k), rows summing to 1."""
    X = _as_points(X)
    if X.shape[1] != g.dim:
        raise ValueError(f"expected descriptors of dim {g.dim}, got {X.shape[1]}")
    resp, _ = _e_step(X, g.weights, g.means, g.variances)
    return resp


def gmm_posteriors(g: GmmModel, x) -> np.ndarray:
    """Posterior component probabilities for a single vector (log-space softmax)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.dim,):
        raise ValueError(f"expected vector of dim {g.dim}, got shape {x.shape}")
    return gmm_responsibilities(g, x[None, :])[0]


# ---------------------------------------------------------------------------
# Serialization: FTNS tensors plus a JSON sidecar {kind, k, d, history}.


def save_codebook(out_dir: str | Path, cb: Codebook) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(out_dir / "centroids.ftns", cb.centroids)
    sidecar = {"kind": "kmeans", "k": cb.k, "d": cb.dim, "history": list(cb.inertia_history)}
    (out_dir / "model.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def save_gmm(out_dir: str | Path, g: GmmModel) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(out_dir / "weights.ftns", g.weights)
    write_tensor(out_dir / "means.ftns", g.means)
    write_tensor(out_dir / "variances.ftns", g.variances)
    sidecar = {"kind": "gmm", "k": g.k, "d": g.dim, "history": list(g.loglik_history)}
    (out_dir / "model.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_model_bundle(model_dir: str | Path) -> Codebook | GmmModel:
    """Load a serialized codebook or GMM, dispatching on the sidecar's kind."""
    model_dir = Path(model_dir)
    sidecar = json.loads((model_dir / "model.json").read_text())
    kind = sidecar.get("kind")
    history = tuple(float(v) for v in sidecar.get("history", []))
    if kind == "kmeans":
        centroids = read_tensor(model_dir / "centroids.ftns").astype(np.float64)
        centroids.flags.writeable = False
        return Codebook(centroids, history)
    if kind == "gmm":
        weights = read_tensor(model_dir / "weights.ftns").astype(np.float64)
        means = read_tensor(model_dir / "means.ftns").astype(np.float64)
        variances = read_tensor(model_dir / "variances.ftns").astype(np.float64)
        for arr in (weights, means, variances):
            arr.flags.writeable = False
        return GmmModel(weights, means, variances, history)
    raise ValueError(f"{model_dir}: unknown model kind {kind!r}")

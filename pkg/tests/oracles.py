"""Independent reference implementations used as test oracles.

Nothing here shares code with the package: metrics are literal loop
transcriptions of their defining formulas, the convolution is nested loops,
distances are computed point by point. Slow on purpose.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# Retrieval metrics, transcribed directly from their definitions.


def nmrr_transcription(ng: int, found_ranks: list[int]) -> float:
    """Normalized modified retrieval rank from ground-truth size and hit ranks."""
    big_k = 2 * ng
    penalized = []
    for k in range(1, ng + 1):
        if k <= len(found_ranks):
            r = found_ranks[k - 1]
            penalized.append(r if r <= big_k else 1.25 * big_k)
        else:
            penalized.append(1.25 * big_k)  # ground truth never retrieved
    avg_rank = sum(penalized) / ng
    return (avg_rank - 0.5 * (1 + ng)) / (1.25 * big_k - 0.5 * (1 + ng))


def avep_transcription(ng: int, found_ranks: list[int], list_length: int) -> float:
    """Average precision: running precision at each relevant hit, over ng."""
    relevant = set(found_ranks)
    hits = 0
    total = 0.0
    for k in range(1, list_length + 1):
        if k in relevant:
            hits += 1
            total += hits / k
    return total / ng


def p_at_k_transcription(found_ranks: list[int], k: int) -> float:
    return sum(1 for r in found_ranks if r <= k) / k


def random_judgment(rng: np.random.Generator, max_ng: int = 20, max_len: int = 200):
    """Random (ng, found_ranks, list_length) triple with every hit present."""
    list_length = int(rng.integers(2, max_len + 1))
    ng = int(rng.integers(1, min(max_ng, list_length) + 1))
    ranks = sorted(rng.choice(list_length, size=ng, replace=False) + 1)
    return ng, [int(r) for r in ranks], list_length


def chance_anmrr(
    class_sizes: list[int], n_total: int, self_included: bool, trials: int, seed: int
) -> float:
    """Monte-Carlo expected ANMRR under random ranking.

    Per query the self item (when included) sits at rank 1 — its distance is
    exactly zero — and the remaining items are a uniform random permutation.
    """
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for _ in range(trials):
        for size in class_sizes:
            ng = size if self_included else size - 1
            if ng < 1:
                continue
            if self_included:
                others = rng.choice(n_total - 1, size=ng - 1, replace=False) + 2
                ranks = sorted([1] + [int(r) for r in others])
            else:
                ranks = sorted(int(r) + 1 for r in rng.choice(n_total - 1, size=ng, replace=False))
            total += nmrr_transcription(ng, ranks)
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# Nearest-neighbor scans.


def nearest_centroid_scan(centroids: np.ndarray, x: np.ndarray) -> int:
    best = None
    best_d = math.inf
    for j, c in enumerate(centroids):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(x, c))
        if d < best_d:
            best, best_d = j, d
    return best


def ranked_scan(ids, matrix, query_id, include_self):
    """Brute-force ranking with the documented tie rule (dist, self-first, id)."""
    pos = list(ids).index(query_id)
    q = matrix[pos]
    rows = []
    for image_id, row in zip(ids, matrix):
        if not include_self and image_id == query_id:
            continue
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(row, q)))
        rows.append((d, 0 if image_id == query_id else 1, image_id))
    rows.sort()
    return [(image_id, d) for d, _, image_id in rows]


def best_two_partition(points: list[float]):
    """Exhaustive optimal 2-clustering of 1-D points: (centroids, sse)."""
    n = len(points)
    best = None
    for mask in range(1, 2 ** n - 1):
        a = [points[i] for i in range(n) if mask & (1 << i)]
        b = [points[i] for i in range(n) if not mask & (1 << i)]
        ma, mb = sum(a) / len(a), sum(b) / len(b)
        sse = sum((x - ma) ** 2 for x in a) + sum((x - mb) ** 2 for x in b)
        if best is None or sse < best[1]:
            best = (sorted([ma, mb]), sse)
    return best


# ---------------------------------------------------------------------------
# GMM density and finite differences (for the Fisher-vector gradient check).


def gmm_mean_loglik(X, weights, means, sigmas) -> float:
    """Mean log-likelihood under a diagonal GMM, densities computed directly."""
    total = 0.0
    for x in X:
        p = 0.0
        for w, mu, sig in zip(weights, means, sigmas):
            dens = float(w)
            for r in range(len(x)):
                var = float(sig[r]) ** 2
                dens *= math.exp(-((float(x[r]) - float(mu[r])) ** 2) / (2 * var))
                dens /= math.sqrt(2 * math.pi * var)
            p += dens
        total += math.log(p)
    return total / len(X)


def central_difference(f, x0: float, step: float) -> float:
    return (f(x0 + step) - f(x0 - step)) / (2 * step)


def central_difference_5pt(f, x0: float, step: float) -> float:
    """Five-point stencil; truncation error O(step^4)."""
    return (
        f(x0 - 2 * step) - 8 * f(x0 - step) + 8 * f(x0 + step) - f(x0 + 2 * step)
    ) / (12 * step)


# ---------------------------------------------------------------------------
# Naive mlpconv forward: per-site loops, no im2col.


def naive_head_gap(params: dict, fmap: np.ndarray) -> np.ndarray:
    """Eval-mode GAP output computed with straightforward nested loops."""
    w1, b1 = params["W1"], params["b1"]
    w2, b2 = params["W2"], params["b2"]
    w3, b3 = params["W3"], params["b3"]
    h, w, _ = fmap.shape
    n = b3.shape[0]
    padded = np.pad(fmap, ((1, 1), (1, 1), (0, 0)))
    gap = np.zeros(n)
    for i in range(h):
        for j in range(w):
            patch = padded[i : i + 3, j : j + 3, :]
            a1 = np.array(
                [np.sum(patch * w1[:, :, :, f]) + b1[f] for f in range(w1.shape[3])]
            )
            z1 = np.maximum(a1, 0.0)
            a2 = z1 @ w2[0, 0] + b2
            z2 = np.maximum(a2, 0.0)
            a3 = z2 @ w3[0, 0] + b3
            gap += a3
    return gap / (h * w)

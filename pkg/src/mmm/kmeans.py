"""Euclidean K-means: k-means++ seeding, Lloyd iterations, nearest-centroid search.

Nearest-centroid search is exact. A float32 GEMM using the
``|x|^2 - 2 x.c + |c|^2`` expansion shortlists candidates, then every
centroid within the expansion's rounding bound of the best is rescored
with a direct float64 ``sum((x - c)^2)``. The smallest index wins ties.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, RepairError, ValidationError

log = logging.getLogger(__name__)

CHUNK_ROWS = 4096
_EPS32 = float(np.finfo(np.float32).eps)
_POLISH_ITERS = 20
_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class TrainConfig:
    K: int = 500
    max_iters: int = 100
    rel_tol: float = 1e-6
    seed: int = 0
    n_init: int = 1

    def __post_init__(self):
        if int(self.K) < 1:
            raise ArgumentError(f"K must be >= 1, got {self.K}")
        if int(self.max_iters) < 1:
            raise ArgumentError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.rel_tol >= 0:
            raise ArgumentError(f"rel_tol must be >= 0, got {self.rel_tol}")
        if int(self.n_init) < 1:
            raise ArgumentError(f"n_init must be >= 1, got {self.n_init}")


@dataclass(frozen=True)
class TrainMeta:
    seed: int
    iterations_run: int
    converged: bool
    # inertia after the initial assignment, then after every Lloyd iteration
    inertia_history: tuple[float, ...] = field(default=())


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray
    train_inertia: float = 0.0
    train_meta: TrainMeta = field(default_factory=lambda: TrainMeta(0, 0, False))

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float32, order="C", copy=True)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ValidationError(f"centroids must be a non-empty K x D matrix, got {c.shape}")
        if not np.isfinite(c).all():
            raise ValidationError("centroids contain NaN or Inf")
        if not self.train_inertia >= 0:
            raise ValidationError(f"train_inertia must be >= 0, got {self.train_inertia}")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "train_inertia", float(self.train_inertia))

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.centroids.shape == other.centroids.shape
            and self.centroids.tobytes() == other.centroids.tobytes()
            and np.float64(self.train_inertia).tobytes()
            == np.float64(other.train_inertia).tobytes()
            and self.train_meta == other.train_meta
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# nearest-centroid search


class _Searcher:
    """Precomputed centroid data for repeated exact nearest-centroid queries."""

    def __init__(self, centroids):
        self.c64 = np.ascontiguousarray(centroids, dtype=np.float64)
        norms = np.einsum("kd,kd->k", self.c64, self.c64)
        # rows of -2c (exact in binary floating point) plus a final row of |c|^2,
        # so one matmul against [x, 1] yields the shortlist scores
        self.aug = np.empty((self.c64.shape[1] + 1, self.c64.shape[0]), dtype=np.float32)
        self.aug[:-1] = (-2.0 * self.c64).T
        self.aug[-1] = norms
        self.cmax = float(norms.max())
        # bound on |expansion - exact| in float32, doubled for the candidate margin
        self.slack = 2.0 * (self.c64.shape[1] + 12) * _EPS32

    def chunk(self, x64: np.ndarray, with_dists: bool = True):
        # |x|^2 is constant per row, so it is left out of the shortlist scores;
        # negative scores need no clamping because near-minimal ones are rescored
        xn = np.einsum("nd,nd->n", x64, x64)
        xa = np.empty((len(x64), x64.shape[1] + 1), dtype=np.float32)
        xa[:, :-1] = x64
        xa[:, -1] = 1.0
        d = xa @ self.aug
        rows = np.arange(len(d))
        labels = np.argmin(d, axis=1)
        dmin = d[rows, labels].astype(np.float64)
        tol = self.slack * (xn + self.cmax)
        if d.shape[1] > 1:
            d[rows, labels] = np.inf
            runner_up = d.min(axis=1).astype(np.float64)
            multi = np.flatnonzero(runner_up <= dmin + tol)
        else:
            multi = rows[:0]
        if multi.size:
            sub = d[multi]
            sub[np.arange(len(multi)), labels[multi]] = dmin[multi]
            rows_m, ks = np.nonzero(sub <= (dmin[multi] + tol[multi])[:, None])
            diff = x64[multi[rows_m]] - self.c64[ks]
            exact = np.einsum("nd,nd->n", diff, diff)
            order = np.lexsort((ks, exact, rows_m))
            rows_m, ks = rows_m[order], ks[order]
            first = np.ones(len(rows_m), dtype=bool)
            first[1:] = rows_m[1:] != rows_m[:-1]
            labels[multi[rows_m[first]]] = ks[first]
        labels = labels.astype(np.int64)
        if not with_dists:
            return labels, None
        diff = x64 - self.c64[labels]
        return labels, np.einsum("nd,nd->n", diff, diff)

    def search(self, frames, jobs: int = 1, with_dists: bool = True):
        x = np.ascontiguousarray(frames, dtype=np.float64)
        starts = range(0, len(x), CHUNK_ROWS)

        def work(s):
            return self.chunk(x[s:s + CHUNK_ROWS], with_dists)

        if jobs > 1 and len(x) > CHUNK_ROWS:
            with ThreadPoolExecutor(jobs) as pool:
                parts = list(pool.map(work, starts))
        else:
            parts = [work(s) for s in starts]
        labels = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, np.int64)
        if not with_dists:
            return labels, None
        dists = np.concatenate([p[1] for p in parts]) if parts else np.empty(0)
        return labels, dists


def nearest(centroids, frames, jobs: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Return (indices, squared distances) of the nearest centroid for each row."""
    return _Searcher(centroids).search(frames, jobs)


def _check_frames(cb: Codebook, frames) -> np.ndarray:
    x = np.asarray(frames)
    if x.ndim != 2 or x.shape[1] != cb.D:
        raise ArgumentError(f"expected frames of shape (T, {cb.D}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ArgumentError("frames contain NaN or Inf")
    return x


def assign(cb: Codebook, v) -> int:
    """Index of the centroid nearest to ``v``; lowest index on ties."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ArgumentError(f"expected a 1-D vector, got shape {v.shape}")
    return int(assign_batch(cb, v[None, :])[0])


def assign_batch(cb: Codebook, frames, jobs: int = 1) -> np.ndarray:
    x = _check_frames(cb, frames)
    return _Searcher(cb.centroids).search(x, jobs, with_dists=False)[0]


# ---------------------------------------------------------------------------
# training


def _sqdist_to(x: np.ndarray, xn: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = xn - 2.0 * (x @ c) + c @ c
    return np.maximum(d, 0.0, out=d)


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    xn = np.einsum("nd,nd->n", x, x)
    idx = int(rng.integers(n))
    chosen = [idx]
    closest = _sqdist_to(x, xn, x[idx])
    closest[idx] = 0.0
    for _ in range(1, K):
        cum = np.cumsum(closest)
        total = cum[-1]
        if total > 0:
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            # every point already coincides with a centroid; repair decides later
            idx = int(rng.integers(n))
        chosen.append(idx)
        np.minimum(closest, _sqdist_to(x, xn, x[idx]), out=closest)
        closest[idx] = 0.0
    return x[chosen].copy()


def repair_empty_clusters(frames, labels, dists, centroids):
    """Re-seed every empty cluster with the point farthest from its centroid.

    ``dists`` holds each point's squared distance to its assigned centroid.
    The chosen point moves into the empty cluster. Ties go to the lowest
    frame index. Returns updated ``(centroids, labels, dists)``; inputs are
    not modified. Raises :class:`RepairError` when no remaining point is
    distinct from every current centroid.
    """
    x = np.asarray(frames, dtype=np.float64)
    labels = np.array(labels, dtype=np.int64, copy=True)
    dists = np.array(dists, dtype=np.float64, copy=True)
    c = np.array(centroids, dtype=np.float64, copy=True)
    K = len(c)
    counts = np.bincount(labels, minlength=K)
    pending = list(np.flatnonzero(counts == 0))
    if not pending:
        return c, labels, dists
    xn = np.einsum("nd,nd->n", x, x)
    while pending:
        j = int(pending.pop(0))
        p = int(np.argmax(dists))
        if not dists[p] > 0:
            raise RepairError(
                f"cluster {j} is empty and every point coincides with an existing "
                f"centroid (fewer than K={K} distinct points)",
                cluster=j,
            )
        donor = int(labels[p])
        labels[p] = j
        counts[donor] -= 1
        counts[j] += 1
        c[j] = x[p]
        np.minimum(dists, _sqdist_to(x, xn, x[p]), out=dists)
        dists[p] = 0.0
        if counts[donor] == 0:
            pending.append(donor)
    return c, labels, dists


def _cluster_means(xt: np.ndarray, labels: np.ndarray, K: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    sums = np.stack([np.bincount(labels, weights=col, minlength=K) for col in xt], axis=1)
    return sums / counts[:, None]


def _lloyd(x, xt, cfg: TrainConfig, rng, jobs):
    K = cfg.K
    c = _kmeans_pp(x, K, rng).astype(np.float32).astype(np.float64)
    labels, dists = nearest(c, x, jobs)
    history = [float(dists.sum())]
    converged = False
    polish = 0
    iters = 0
    while True:
        if iters >= cfg.max_iters and not converged:
            break
        c, labels_r, dists_r = repair_empty_clusters(x, labels, dists, c)
        c = _cluster_means(xt, labels_r, K).astype(np.float32).astype(np.float64)
        new_labels, dists = nearest(c, x, jobs)
        iters += 1
        inertia = float(dists.sum())
        prev = history[-1]
        history.append(inertia)
        stable = np.array_equal(new_labels, labels_r)
        full = np.bincount(new_labels, minlength=K).min() > 0
        labels = new_labels
        if converged:
            polish += 1
            if (stable and full) or polish >= _POLISH_ITERS:
                break
            continue
        if stable and full:
            converged = True
            break
        if prev - inertia <= cfg.rel_tol * prev:
            # the inertia criterion fired: iterate on to a label fixed point so
            # centroids end up equal to the means of their final clusters
            converged = True
    return c, labels, dists, history, iters, converged


def kmeans_train(frames, cfg: TrainConfig, jobs: int = 1) -> Codebook:
    """Train a K-means codebook with k-means++ seeding and Lloyd iterations.

    With ``cfg.n_init > 1`` the run with the lowest final inertia is kept
    (earliest run on ties). Results are bit-identical for a given seed and
    do not depend on ``jobs``.
    """
    x = np.ascontiguousarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ArgumentError(f"frames must be a non-empty N x D matrix, got {x.shape}")
    if len(x) < cfg.K:
        raise ArgumentError(f"need at least K={cfg.K} frames, got N={len(x)}")
    if not np.isfinite(x).all():
        raise ArgumentError("frames contain NaN or Inf")
    xt = np.ascontiguousarray(x.T)
    seed = int(cfg.seed) & _SEED_MASK
    best = None
    for run in range(cfg.n_init):
        rng = np.random.default_rng(seed if run == 0 else [seed, run])
        result = _lloyd(x, xt, cfg, rng, jobs)
        if best is None or result[3][-1] < best[3][-1]:
            best = result
    c, labels, dists, history, iters, converged = best
    log.debug("kmeans K=%d N=%d: %d iterations, inertia %.6g", cfg.K, len(x), iters, history[-1])
    return Codebook(
        c.astype(np.float32),
        train_inertia=history[-1],
        train_meta=TrainMeta(int(cfg.seed), iters, bool(converged), tuple(history)),
    )


def inertia(cb: Codebook, frames) -> float:
    """Within-cluster SSE of ``frames`` under nearest-centroid assignment."""
    x = _check_frames(cb, frames)
    return float(nearest(cb.centroids, x)[1].sum())

"""Deliberately naive reference implementations used as test oracles.

Nothing here imports the package's numeric code; loops are plain Python so
the oracles share no arithmetic path with the vectorized implementation.
"""

import math


def sqdist(a, b):
    return math.fsum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def linear_scan(centroids, v):
    """argmin_k |v - c_k|^2, first index on ties."""
    best, best_d = None, math.inf
    for k, c in enumerate(centroids):
        d = sqdist(v, c)
        if d < best_d:
            best, best_d = k, d
    return best


def chained_argmin(codebooks, frame):
    """Residual chain: stage m picks the centroid nearest to frame - sum of earlier picks."""
    picked_sum = [0.0] * len(frame)
    ids = []
    for cents in codebooks:
        residual = [float(x) - s for x, s in zip(frame, picked_sum)]
        k = linear_scan(cents, residual)
        ids.append(k)
        picked_sum = [s + float(c) for s, c in zip(picked_sum, cents[k])]
    return ids


def best_two_partition_sse(points):
    """Global optimum of 2-means SSE by enumerating every 2-partition."""
    n = len(points)
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        groups = ([], [])
        for i in range(n):
            groups[(mask >> i) & 1].append(points[i])
        sse = 0.0
        for g in groups:
            dim = len(g[0])
            mean = [math.fsum(p[j] for p in g) / len(g) for j in range(dim)]
            sse += math.fsum(sqdist(p, mean) for p in g)
        best = min(best, sse)
    return best


def naive_fusion(streams, ids, tables, weights):
    """Per frame: sum stage embeddings within a layer, then weight-sum over layers.

    ``streams`` lists (layer, stage); ``ids[t][s]`` is the id of stream s at
    frame t; ``weights`` maps layer -> weight.
    """
    T = len(ids)
    width = len(next(iter(tables.values()))[0])
    out = []
    for t in range(T):
        per_layer = {}
        for s, (layer, stage) in enumerate(streams):
            row = tables[(layer, stage)][ids[t][s]]
            acc = per_layer.setdefault(layer, [0.0] * width)
            for e in range(width):
                acc[e] += float(row[e])
        frame = [0.0] * width
        for layer, acc in per_layer.items():
            for e in range(width):
                frame[e] += weights[layer] * acc[e]
        out.append(frame)
    return out


def naive_mse(a, b):
    total, n = 0.0, 0
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            total += (float(x) - float(y)) ** 2
            n += 1
    return total / n


def tally(ids, K):
    counts = [0] * K
    for i in ids:
        counts[int(i)] += 1
    return counts


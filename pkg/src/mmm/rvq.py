"""Residual quantization with a chain of K-means codebooks.

Stage ``m`` quantizes ``x - (c^1 + ... + c^{m-1})``, where each ``c^u`` is
the centroid selected at stage ``u``. The running sum is accumulated in
float64 in stage order, and the residual is always formed as
``x - running_sum``. Training, encoding, decoding and the energy profile all
share that arithmetic, so ``x - decode(encode(x))`` is exactly the residual
seen after the last stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, RepairError, ValidationError
from .kmeans import Codebook, TrainConfig, _Searcher, kmeans_train
from .tensor_io import Dataset, FeatureSequence


@dataclass(frozen=True, eq=False)
class ResidualStack:
    layer_index: int
    codebooks: tuple[Codebook, ...]

    def __post_init__(self):
        cbs = tuple(self.codebooks)
        if not cbs:
            raise ValidationError("a residual stack needs at least one codebook")
        dims = {cb.D for cb in cbs}
        if len(dims) != 1:
            raise ValidationError(f"codebooks in a stack must share D, got {sorted(dims)}")
        if not 0 <= int(self.layer_index) <= 0xFFFF:
            raise ValidationError(f"layer index {self.layer_index} outside [0, 65535]")
        object.__setattr__(self, "codebooks", cbs)
        object.__setattr__(self, "layer_index", int(self.layer_index))

    @property
    def M(self) -> int:
        return len(self.codebooks)

    @property
    def D(self) -> int:
        return self.codebooks[0].D

    @property
    def Ks(self) -> list[int]:
        return [cb.K for cb in self.codebooks]

    def truncated(self, m: int) -> "ResidualStack":
        """The first ``m`` stages as a stack of their own."""
        if not 1 <= m <= self.M:
            raise ArgumentError(f"m must lie in [1, {self.M}], got {m}")
        return ResidualStack(self.layer_index, self.codebooks[:m])

    def __eq__(self, other):
        if not isinstance(other, ResidualStack):
            return NotImplemented
        return self.layer_index == other.layer_index and self.codebooks == other.codebooks

    __hash__ = None


@dataclass(frozen=True, eq=False)
class StreamTokens:
    """Unit ids of one (layer, stage) stream; ``stage`` counts from 1."""

    layer_index: int
    stage: int
    ids: np.ndarray

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64, copy=True)
        if ids.ndim != 1:
            raise ValidationError(f"stream ids must be 1-D, got shape {ids.shape}")
        if ids.size and ids.min() < 0:
            raise ValidationError(f"negative unit id in stream ({self.layer_index}, {self.stage})")
        if self.stage < 1:
            raise ValidationError(f"stage must be >= 1, got {self.stage}")
        ids.flags.writeable = False
        object.__setattr__(self, "ids", ids)

    @property
    def T(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, StreamTokens):
            return NotImplemented
        return (
            (self.layer_index, self.stage) == (other.layer_index, other.stage)
            and np.array_equal(self.ids, other.ids)
        )

    __hash__ = None


def _as_frames(frames, D: int | None = None) -> np.ndarray:
    x = np.ascontiguousarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise ArgumentError(f"frames must be 2-D, got shape {x.shape}")
    if D is not None and x.shape[1] != D:
        raise ArgumentError(f"frame dimension {x.shape[1]} does not match codebook D={D}")
    return x


def encode_array(stack: ResidualStack, frames, jobs: int = 1):
    """Chained argmin over all stages.

    Returns ``(ids, recon)``: ``ids`` is M x T int64 and ``recon`` is the
    float64 running sum of selected centroids.
    """
    x = _as_frames(frames, stack.D)
    if not np.isfinite(x).all():
        raise ArgumentError("frames contain NaN or Inf")
    recon = np.zeros_like(x)
    residual = np.empty_like(x)
    ids = np.empty((stack.M, len(x)), dtype=np.int64)
    for m, cb in enumerate(stack.codebooks):
        searcher = _Searcher(cb.centroids)
        np.subtract(x, recon, out=residual)
        ids[m] = searcher.search(residual, jobs, with_dists=False)[0]
        recon += searcher.c64[ids[m]]
    return ids, recon


def decode_array(stack: ResidualStack, ids) -> np.ndarray:
    """Sum the selected centroids of every stage, float64, in stage order."""
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[0] != stack.M:
        raise ValidationError(f"expected ids of shape ({stack.M}, T), got {ids.shape}")
    recon = np.zeros((ids.shape[1], stack.D))
    for m, cb in enumerate(stack.codebooks):
        row = ids[m]
        bad = np.flatnonzero((row < 0) | (row >= cb.K))
        if bad.size:
            f = int(bad[0])
            raise ValidationError(
                f"layer {stack.layer_index} stage {m + 1} frame {f}: "
                f"unit id {int(row[f])} outside [0, {cb.K})"
            )
        recon += cb.centroids[row].astype(np.float64)
    return recon


def rvq_train(frames, M: int, cfgs, jobs: int = 1, layer_index: int = 0) -> ResidualStack:
    """Train M codebooks, each on the residual left by the stages before it.

    ``cfgs`` is one TrainConfig per stage, or a single config for all stages.
    Residuals for the next stage are computed with the finished codebook of
    the current stage.
    """
    if M < 1:
        raise ArgumentError(f"M must be >= 1, got {M}")
    if isinstance(cfgs, TrainConfig):
        cfgs = [cfgs] * M
    cfgs = list(cfgs)
    if len(cfgs) != M:
        raise ArgumentError(f"expected {M} stage configs, got {len(cfgs)}")
    x = _as_frames(frames)
    recon = np.zeros_like(x)
    books = []
    for m, cfg in enumerate(cfgs, 1):
        try:
            cb = kmeans_train(x - recon, cfg, jobs)
        except RepairError as e:
            raise RepairError(f"layer {layer_index} stage {m}: {e}", cluster=e.cluster, stage=m) from e
        except ArgumentError as e:
            raise ArgumentError(f"layer {layer_index} stage {m}: {e}") from e
        books.append(cb)
        if m < M:
            ids = _Searcher(cb.centroids).search(x - recon, jobs, with_dists=False)[0]
            recon += cb.centroids[ids].astype(np.float64)
    return ResidualStack(layer_index, tuple(books))


def rvq_encode(stack: ResidualStack, seq: FeatureSequence, jobs: int = 1) -> list[StreamTokens]:
    data = seq.data if isinstance(seq, FeatureSequence) else seq
    ids, _ = encode_array(stack, data, jobs)
    return [StreamTokens(stack.layer_index, m + 1, ids[m]) for m in range(stack.M)]


def rvq_decode(stack: ResidualStack, tokens: Sequence[StreamTokens], frame_rate_hz=50) -> FeatureSequence:
    """Reconstruct frames as the sum of the selected centroids of every stage."""
    if len(tokens) != stack.M:
        raise ValidationError(f"expected {stack.M} streams, got {len(tokens)}")
    lengths = {t.T for t in tokens}
    if len(lengths) != 1:
        raise ValidationError(f"streams have different lengths {sorted(lengths)}")
    ordered = sorted(tokens, key=lambda t: t.stage)
    if [t.stage for t in ordered] != list(range(1, stack.M + 1)):
        raise ValidationError(f"stream stages {[t.stage for t in tokens]} do not cover 1..{stack.M}")
    recon = decode_array(stack, np.stack([t.ids for t in ordered]))
    return FeatureSequence(recon.astype(np.float32), frame_rate_hz)


def residual_energy_profile(stack: ResidualStack, data) -> list[float]:
    """Mean squared residual norm after 0, 1, ..., M stages.

    ``data`` is a Dataset (the stack's layer is used) or an N x D array.
    """
    if isinstance(data, Dataset):
        if not len(data):
            raise ArgumentError("dataset is empty")
        x = _as_frames(data.layer_frames(stack.layer_index), stack.D)
    else:
        x = _as_frames(data, stack.D)
    if not len(x):
        raise ArgumentError("no frames to profile")
    recon = np.zeros_like(x)
    profile = [float(np.einsum("nd,nd->n", x, x).mean())]
    for cb in stack.codebooks:
        res = x - recon
        ids = _Searcher(cb.centroids).search(res, with_dists=False)[0]
        recon += cb.centroids[ids].astype(np.float64)
        res = x - recon
        profile.append(float(np.einsum("nd,nd->n", res, res).mean()))
    return profile

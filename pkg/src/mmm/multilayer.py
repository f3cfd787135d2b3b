"""Multi-layer codecs, token grids, embedding fusion and layer selection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgumentError, DivergenceError, ValidationError
from .kmeans import TrainConfig
from .rvq import ResidualStack, StreamTokens, encode_array, rvq_train
from .tensor_io import Dataset, LayeredFeatures, as_frame_rate, subsample_utterances

log = logging.getLogger(__name__)

DEFAULT_FRACTION = 0.3


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """Softmax-parameterized weights over layers, one logit per layer."""

    layers: tuple[int, ...]
    logits: np.ndarray

    def __post_init__(self):
        layers = tuple(int(l) for l in self.layers)
        logits = np.array(self.logits, dtype=np.float64, copy=True).reshape(-1)
        if len(layers) != len(logits) or not layers:
            raise ValidationError(
                f"need one logit per layer, got {len(layers)} layers and {len(logits)} logits"
            )
        if len(set(layers)) != len(layers):
            raise ValidationError(f"duplicate layers in {layers}")
        if not np.isfinite(logits).all():
            raise ValidationError("logits must be finite")
        logits.flags.writeable = False
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "logits", logits)

    @classmethod
    def uniform(cls, layers: Sequence[int]) -> "LayerWeights":
        return cls(tuple(layers), np.zeros(len(layers)))

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.layers, self.weights.tolist()))

    def __eq__(self, other):
        if not isinstance(other, LayerWeights):
            return NotImplemented
        return self.layers == other.layers and self.logits.tobytes() == other.logits.tobytes()

    __hash__ = None


@dataclass(frozen=True, eq=False)
class MultiLayerCodec:
    """One residual stack per layer plus the ordered selection L'."""

    stacks: Mapping[int, ResidualStack]
    selected_layers: tuple[int, ...]
    frame_rate_hz: Fraction = Fraction(50)
    fusion_weights: LayerWeights | None = None
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        stacks = {int(k): v for k, v in dict(self.stacks).items()}
        selected = tuple(int(l) for l in self.selected_layers)
        if not selected:
            raise ValidationError("a codec needs at least one selected layer")
        if len(set(selected)) != len(selected):
            raise ValidationError(f"duplicate selected layers {selected}")
        for l in selected:
            if l not in stacks:
                raise ValidationError(f"selected layer {l} has no residual stack")
        for k, st in stacks.items():
            if st.layer_index != k:
                raise ValidationError(f"stack keyed {k} reports layer {st.layer_index}")
        if self.fusion_weights is not None and set(self.fusion_weights.layers) != set(selected):
            raise ValidationError("fusion weights must cover exactly the selected layers")
        object.__setattr__(self, "stacks", stacks)
        object.__setattr__(self, "selected_layers", selected)
        object.__setattr__(self, "frame_rate_hz", as_frame_rate(self.frame_rate_hz))
        # stored as JSON in archives; normalize now so save/load is an identity
        object.__setattr__(self, "provenance", json.loads(json.dumps(dict(self.provenance))))

    @property
    def streams(self) -> list[tuple[int, int, int]]:
        """(layer, stage, K) for every stream, in grid column order."""
        return [
            (l, m + 1, cb.K)
            for l in self.selected_layers
            for m, cb in enumerate(self.stacks[l].codebooks)
        ]

    def __eq__(self, other):
        if not isinstance(other, MultiLayerCodec):
            return NotImplemented
        return (
            self.stacks == other.stacks
            and list(self.stacks) == list(other.stacks)
            and self.selected_layers == other.selected_layers
            and self.frame_rate_hz == other.frame_rate_hz
            and self.fusion_weights == other.fusion_weights
            and self.provenance == other.provenance
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """T x (number of streams) unit ids for one utterance."""

    utterance_id: str
    streams: tuple[tuple[int, int, int], ...]
    ids: np.ndarray

    def __post_init__(self):
        streams = tuple((int(l), int(m), int(k)) for l, m, k in self.streams)
        ids = np.array(self.ids, dtype=np.int64, copy=True)
        if ids.ndim != 2 or ids.shape[1] != len(streams):
            raise ValidationError(
                f"ids shape {ids.shape} does not match {len(streams)} streams"
            )
        if len({(l, m) for l, m, _ in streams}) != len(streams):
            raise ValidationError("duplicate (layer, stage) stream")
        for s, (l, m, k) in enumerate(streams):
            if k < 1 or m < 1:
                raise ValidationError(f"stream ({l}, {m}) has K={k}, stage={m}")
            col = ids[:, s]
            bad = np.flatnonzero((col < 0) | (col >= k))
            if bad.size:
                f = int(bad[0])
                raise ValidationError(
                    f"stream (layer {l}, stage {m}) frame {f}: id {int(col[f])} outside [0, {k})"
                )
        ids.flags.writeable = False
        object.__setattr__(self, "streams", streams)
        object.__setattr__(self, "ids", ids)

    @property
    def T(self) -> int:
        return self.ids.shape[0]

    @property
    def layers(self) -> list[int]:
        return list(dict.fromkeys(l for l, _, _ in self.streams))

    def stream(self, layer: int, stage: int) -> StreamTokens:
        for s, (l, m, _) in enumerate(self.streams):
            if (l, m) == (layer, stage):
                return StreamTokens(l, m, self.ids[:, s])
        raise ArgumentError(f"grid has no stream (layer {layer}, stage {stage})")

    def layer_ids(self, layer: int) -> np.ndarray:
        """Stage-ordered M x T ids of one layer."""
        cols = sorted((m, s) for s, (l, m, _) in enumerate(self.streams) if l == layer)
        if not cols:
            raise ArgumentError(f"grid has no streams for layer {layer}")
        return np.ascontiguousarray(self.ids[:, [s for _, s in cols]].T)

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            self.utterance_id == other.utterance_id
            and self.streams == other.streams
            and self.ids.shape == other.ids.shape
            and np.array_equal(self.ids, other.ids)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# training and encoding


def mmm_train(
    ds: Dataset,
    layers: Sequence[int],
    M: int,
    cfgs,
    fraction: float = DEFAULT_FRACTION,
    seed: int = 0,
    jobs: int = 1,
) -> MultiLayerCodec:
    """Train an independent residual stack for every requested layer.

    One utterance subsample (``fraction`` of the dataset, drawn with ``seed``)
    is shared by all layers.
    """
    layers = [int(l) for l in layers]
    if not layers:
        raise ArgumentError("no layers requested")
    if len(set(layers)) != len(layers):
        raise ArgumentError(f"duplicate layers in {layers}")
    if isinstance(cfgs, TrainConfig):
        cfgs = [cfgs] * M
    cfgs = list(cfgs)
    sub = subsample_utterances(ds, fraction, seed)
    frames = {l: [] for l in layers}
    rate = None
    for lf in sub:
        for l in layers:
            if l not in lf.layers:
                raise ValidationError(f"utterance {lf.utterance_id!r} is missing layer {l}")
            frames[l].append(lf.layers[l].data)
        if rate is None:
            rate = lf.frame_rate_hz
        elif lf.frame_rate_hz != rate:
            raise ValidationError(f"utterance {lf.utterance_id!r} has a different frame rate")
    stacks = {}
    for l in layers:
        dims = {f.shape[1] for f in frames[l]}
        if len(dims) != 1:
            raise ValidationError(f"layer {l} has inconsistent D across utterances: {sorted(dims)}")
        x = np.concatenate(frames[l], axis=0)
        log.info("layer %d: training %d stages on %d frames", l, M, len(x))
        stacks[l] = rvq_train(x, M, cfgs, jobs, layer_index=l)
    provenance = {
        "subsample_fraction": repr(float(fraction)),
        "subsample_seed": int(seed),
        "n_utterances": len(ds),
        "n_utterances_used": len(sub),
        "stage_configs": [
            {"K": c.K, "max_iters": c.max_iters, "rel_tol": repr(float(c.rel_tol)),
             "seed": c.seed, "n_init": c.n_init}
            for c in cfgs
        ],
    }
    return MultiLayerCodec(stacks, tuple(layers), rate, None, provenance)


def mmm_encode(codec: MultiLayerCodec, lf: LayeredFeatures, jobs: int = 1) -> TokenGrid:
    cols = []
    for l in codec.selected_layers:
        if l not in lf.layers:
            raise ValidationError(f"utterance {lf.utterance_id!r} is missing layer {l}")
        ids, _ = encode_array(codec.stacks[l], lf.layers[l].data, jobs)
        cols.append(ids)
    return TokenGrid(lf.utterance_id, tuple(codec.streams), np.concatenate(cols, axis=0).T)


# ---------------------------------------------------------------------------
# fusion


def centroid_tables(codec: MultiLayerCodec) -> dict[tuple[int, int], np.ndarray]:
    """The codec's own centroids as per-stream embedding tables (E = D)."""
    return {
        (l, m + 1): cb.centroids
        for l in codec.selected_layers
        for m, cb in enumerate(codec.stacks[l].codebooks)
    }


def _check_tables(codec, tables) -> int:
    widths = set()
    for l, m, k in codec.streams:
        if (l, m) not in tables:
            raise ArgumentError(f"no embedding table for stream (layer {l}, stage {m})")
        t = np.asarray(tables[(l, m)])
        if t.ndim != 2 or t.shape[0] < k:
            raise ArgumentError(
                f"table for stream ({l}, {m}) has shape {t.shape}, needs at least {k} rows"
            )
        widths.add(t.shape[1])
    if len(widths) != 1:
        raise ArgumentError(f"embedding tables have different widths {sorted(widths)}")
    return widths.pop()


def layer_embeddings(codec, grid: TokenGrid, tables=None) -> np.ndarray:
    """Within-layer stage sums: array of shape (L', T, E), layers in selection order."""
    tables = centroid_tables(codec) if tables is None else tables
    E = _check_tables(codec, tables)
    out = np.zeros((len(codec.selected_layers), grid.T, E))
    for i, l in enumerate(codec.selected_layers):
        ids = grid.layer_ids(l)
        for m in range(codec.stacks[l].M):
            out[i] += np.asarray(tables[(l, m + 1)], dtype=np.float64)[ids[m]]
    return out


def _resolve_weights(codec, lw) -> np.ndarray:
    if lw is None:
        lw = codec.fusion_weights or LayerWeights.uniform(codec.selected_layers)
    if set(lw.layers) != set(codec.selected_layers) or len(lw.layers) != len(codec.selected_layers):
        raise ArgumentError(f"weights cover layers {lw.layers}, codec selects {codec.selected_layers}")
    by_layer = lw.as_dict()
    return np.array([by_layer[l] for l in codec.selected_layers])


def fuse_embeddings(codec: MultiLayerCodec, grid: TokenGrid, tables=None, lw=None) -> np.ndarray:
    """Sum stage embeddings within each layer, then weight-sum across layers.

    ``tables`` maps (layer, stage) to a table with at least K rows; it
    defaults to the codec centroids. ``lw`` defaults to the codec's fusion
    weights, or uniform weights when the codec has none. Returns T x E.
    """
    per_layer = layer_embeddings(codec, grid, tables)
    w = _resolve_weights(codec, lw)
    out = np.zeros(per_layer.shape[1:])
    for wi, emb in zip(w, per_layer):
        out += wi * emb
    return out


# ---------------------------------------------------------------------------
# layer-weight probe


def probe_loss_and_grad(logits, W, b, feats, targets):
    """Mean squared error of ``softmax(logits)``-fused features through a linear head.

    ``feats`` has shape (L, N, E), ``targets`` (N, E'), ``W`` (E, E'), ``b`` (E',).
    Returns ``(loss, d_logits, d_W, d_b)``.
    """
    w = softmax(logits)
    fused = np.tensordot(w, feats, axes=1)
    resid = fused @ W + b - targets
    scale = 2.0 / resid.size
    loss = float((resid * resid).sum() / resid.size)
    d_pred = scale * resid
    d_W = fused.T @ d_pred
    d_b = d_pred.sum(axis=0)
    d_fused = d_pred @ W.T
    d_w = np.einsum("lne,ne->l", feats, d_fused)
    d_logits = w * (d_w - w @ d_w)
    return loss, d_logits, d_W, d_b


def _probe_data(ds, codec, tables, targets):
    feats, ys = [], []
    for i, lf in enumerate(ds):
        grid = mmm_encode(codec, lf)
        y = targets[lf.utterance_id] if isinstance(targets, Mapping) else targets[i]
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[0] != grid.T:
            raise ArgumentError(
                f"target for {lf.utterance_id!r} has shape {y.shape}, expected ({grid.T}, E')"
            )
        feats.append(layer_embeddings(codec, grid, tables))
        ys.append(y)
    if not feats:
        raise ArgumentError("dataset is empty")
    return np.concatenate(feats, axis=1), np.concatenate(ys, axis=0)


def learn_layer_weights(
    ds: Dataset,
    codec: MultiLayerCodec,
    tables,
    targets,
    steps: int = 500,
    lr: float = 0.1,
    seed: int = 0,
    trace: list | None = None,
) -> LayerWeights:
    """Fit softmax layer weights and a linear head to regression targets.

    Plain gradient descent on the mean squared error between
    ``head(fuse(...))`` and ``targets`` (per-utterance T x E' arrays, keyed by
    utterance id or aligned with ``ds``). Logits start at zero; the head starts
    from a seeded small random matrix. Per-step losses go to ``trace``.
    """
    if steps < 0:
        raise ArgumentError(f"steps must be >= 0, got {steps}")
    tables = centroid_tables(codec) if tables is None else tables
    feats, y = _probe_data(ds, codec, tables, targets)
    L, _, E = feats.shape
    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    W = rng.normal(0.0, 0.01, size=(E, y.shape[1]))
    b = np.zeros(y.shape[1])
    logits = np.zeros(L)
    for step in range(steps):
        loss, g_logits, g_W, g_b = probe_loss_and_grad(logits, W, b, feats, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"probe loss became non-finite at step {step}", step)
        if trace is not None:
            trace.append(loss)
        logits -= lr * g_logits
        W -= lr * g_W
        b -= lr * g_b
    if not np.isfinite(logits).all():
        raise DivergenceError(f"probe logits became non-finite after step {steps}", steps)
    return LayerWeights(codec.selected_layers, logits)


def select_top_layers(lw, k: int) -> list[int]:
    """The ``k`` highest-weighted layers, best first; lower layer index wins ties.

    ``lw`` is a LayerWeights, ranked by logit (softmax is strictly monotone,
    so this is the weight order without rounding noise), or a plain
    ``{layer: weight}`` mapping.
    """
    if isinstance(lw, LayerWeights):
        scores = dict(zip(lw.layers, lw.logits.tolist()))
    else:
        scores = {int(l): float(w) for l, w in dict(lw).items()}
    if not 1 <= k <= len(scores):
        raise ArgumentError(f"k must lie in [1, {len(scores)}], got {k}")
    return sorted(scores, key=lambda l: (-scores[l], l))[:k]

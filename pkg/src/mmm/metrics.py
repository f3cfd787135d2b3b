"""Bitrate, distortion and codebook-usage metrics, and evaluation reports."""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ArgumentError, ValidationError
from .multilayer import mmm_encode
from .rvq import StreamTokens, decode_array, residual_energy_profile
from .tensor_io import Dataset, FeatureSequence, as_frame_rate


@dataclass(frozen=True)
class StreamRateSpec:
    vocab_sizes: tuple[int, ...]
    frame_rate_hz: Fraction = Fraction(50)

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.vocab_sizes)
        if any(k < 1 for k in sizes):
            raise ArgumentError(f"vocabulary sizes must be >= 1, got {sizes}")
        object.__setattr__(self, "vocab_sizes", sizes)
        object.__setattr__(self, "frame_rate_hz", as_frame_rate(self.frame_rate_hz))


def bitrate(spec: StreamRateSpec) -> float:
    """frame_rate * sum(log2 K) over streams, in bits per second.

    Streams are grouped by vocabulary size so that repeating the stream list
    n times (n a power of two) scales the result by exactly n.
    """
    counts = Counter(spec.vocab_sizes)
    bits = math.fsum(n * math.log2(k) for k, n in sorted(counts.items()))
    return float(spec.frame_rate_hz) * bits


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, FeatureSequence) else x, dtype=np.float64)


def distortion(original, reconstructed) -> dict:
    """Mean squared error over all elements, and per feature dimension."""
    a, b = _as_array(original), _as_array(reconstructed)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    return {"mse": float(sq.mean()), "per_dim_mse": sq.reshape(-1, a.shape[-1]).mean(axis=0)}


@dataclass(frozen=True)
class UsageStats:
    counts: np.ndarray
    fraction_used: float
    normalized_entropy: float


def usage_stats(tokens, K: int) -> UsageStats:
    """Histogram of unit ids plus codebook coverage and normalized entropy."""
    ids = np.asarray(tokens.ids if isinstance(tokens, StreamTokens) else tokens, dtype=np.int64)
    if K < 1:
        raise ArgumentError(f"K must be >= 1, got {K}")
    if ids.size and (ids.min() < 0 or ids.max() >= K):
        raise ValidationError(f"unit ids outside [0, {K})")
    counts = np.bincount(ids, minlength=K)
    total = counts.sum()
    if total == 0 or K == 1:
        entropy = 0.0
    else:
        p = counts[counts > 0] / total
        entropy = float(-(p * np.log2(p)).sum() / math.log2(K))
        entropy = min(max(entropy, 0.0), 1.0)
    return UsageStats(counts, float(np.count_nonzero(counts) / K), entropy)


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class EvalReport:
    bitrate_bits_per_sec: float
    mse: float
    residual_profile: dict[int, list[float]]
    streams: list[dict]
    utterance_count: int
    total_duration_s: float
    utterances: list[dict] = field(default_factory=list)

    def aggregate(self) -> dict:
        return {
            "type": "aggregate",
            "bitrate_bits_per_sec": self.bitrate_bits_per_sec,
            "mse": self.mse,
            "utterance_count": self.utterance_count,
            "total_duration_s": self.total_duration_s,
            "residual_profile": {str(l): p for l, p in self.residual_profile.items()},
            "streams": self.streams,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "utterance", **u}, sort_keys=True) for u in self.utterances]
        lines.append(json.dumps(self.aggregate(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """``key = value`` lines; floats use repr so values round-trip."""
        out = [
            f"bitrate_bits_per_sec = {self.bitrate_bits_per_sec!r}",
            f"mse = {self.mse!r}",
            f"utterance_count = {self.utterance_count}",
            f"total_duration_s = {self.total_duration_s!r}",
        ]
        for l, prof in self.residual_profile.items():
            out.append(f"residual_profile.layer{l} = " + " ".join(repr(v) for v in prof))
        for s in self.streams:
            key = f"stream.layer{s['layer']}.stage{s['stage']}"
            out.append(f"{key}.K = {s['K']}")
            out.append(f"{key}.fraction_used = {s['fraction_used']!r}")
            out.append(f"{key}.normalized_entropy = {s['normalized_entropy']!r}")
            out.append(f"{key}.histogram = " + ",".join(str(c) for c in s["histogram"]))
        return "\n".join(out) + "\n"


def parse_text_report(text: str) -> dict[str, str]:
    pairs = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            pairs[key] = value
    return pairs


def evaluate(codec, ds: Dataset, jobs: int = 1) -> EvalReport:
    """Encode and decode every utterance; report rate, distortion and usage.

    ``mse`` averages squared error over every (layer, frame, dim) element.
    The residual profile per layer is frame-weighted over the dataset.
    """
    if not len(ds):
        raise ArgumentError("cannot evaluate an empty dataset")
    streams = codec.streams
    rate = codec.frame_rate_hz

    def one(i):
        lf = ds[i]
        if lf.frame_rate_hz != rate:
            raise ValidationError(
                f"utterance {lf.utterance_id!r} frame rate {lf.frame_rate_hz} != codec {rate}"
            )
        grid = mmm_encode(codec, lf)
        sq_sum, n_el, per_layer, profiles = 0.0, 0, {}, {}
        for l in codec.selected_layers:
            stack = codec.stacks[l]
            recon = decode_array(stack, grid.layer_ids(l)).astype(np.float32)
            d = distortion(lf.layers[l], recon)
            per_layer[str(l)] = d["mse"]
            sq_sum += d["mse"] * recon.size
            n_el += recon.size
            profiles[l] = residual_energy_profile(stack, lf.layers[l].data)
        row = {
            "utterance_id": lf.utterance_id,
            "T": grid.T,
            "duration_s": float(Fraction(grid.T) / rate),
            "mse": sq_sum / n_el,
            "layer_mse": per_layer,
        }
        return row, grid, sq_sum, n_el, profiles

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(len(ds))))
    else:
        results = [one(i) for i in range(len(ds))]

    total_frames = sum(r[1].T for r in results)
    sq_total = math.fsum(r[2] for r in results)
    el_total = sum(r[3] for r in results)
    profile = {}
    for l in codec.selected_layers:
        M = codec.stacks[l].M
        profile[l] = [
            math.fsum(r[4][l][m] * r[1].T for r in results) / total_frames for m in range(M + 1)
        ]
    all_ids = np.concatenate([r[1].ids for r in results], axis=0)
    stream_rows = []
    for s, (l, m, k) in enumerate(streams):
        u = usage_stats(all_ids[:, s], k)
        stream_rows.append({
            "layer": l, "stage": m, "K": k,
            "fraction_used": u.fraction_used,
            "normalized_entropy": u.normalized_entropy,
            "histogram": u.counts.tolist(),
        })
    return EvalReport(
        bitrate_bits_per_sec=bitrate(StreamRateSpec(tuple(k for _, _, k in streams), rate)),
        mse=sq_total / el_total,
        residual_profile=profile,
        streams=stream_rows,
        utterance_count=len(ds),
        total_duration_s=float(Fraction(total_frames) / rate),
        utterances=[r[0] for r in results],
    )

"""Feature tensors, the MMF file format, datasets and synthetic data.

MMF layout (all integers little-endian)::

    "MMMF" | version u16 (=1) | frame-rate numerator u32 | denominator u32
    | n_layers u16 | per layer: layer_index u16, T u32, D u32, T*D f32 row-major
    | CRC32 u32

The CRC covers every byte between the version field and the CRC itself.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ArgumentError, CRCError, FormatError, ValidationError, VersionError

MMF_MAGIC = b"MMMF"
MMF_VERSION = 1
MANIFEST_NAME = "manifest.tsv"

_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF


def as_frame_rate(value) -> Fraction:
    """Coerce ``value`` to a positive Fraction that fits the u32/u32 header."""
    if isinstance(value, float):
        rate = Fraction(repr(value))
    else:
        rate = Fraction(value)
    if rate <= 0:
        raise ArgumentError(f"frame rate must be positive, got {value!r}")
    if rate.numerator > _U32_MAX or rate.denominator > _U32_MAX:
        raise ArgumentError(f"frame rate {rate} does not fit in u32/u32")
    return rate


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """T x D float32 frames of one layer of one utterance."""

    data: np.ndarray
    frame_rate_hz: Fraction = Fraction(50)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2:
            raise ValidationError(f"feature data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"feature data must have T>=1 and D>=1, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("feature data contains NaN or Inf")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_rate_hz", as_frame_rate(self.frame_rate_hz))

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return float(self.T / self.frame_rate_hz)

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.frame_rate_hz == other.frame_rate_hz
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LayeredFeatures:
    """All stored layers of one utterance, keyed by layer index."""

    layers: Mapping[int, FeatureSequence]
    utterance_id: str

    def __post_init__(self):
        layers = dict(self.layers)
        if not layers:
            raise ValidationError(f"utterance {self.utterance_id!r} has no layers")
        for idx, seq in layers.items():
            if not isinstance(idx, (int, np.integer)) or not 0 <= idx <= _U16_MAX:
                raise ValidationError(f"layer index {idx!r} outside [0, 65535]")
            if not isinstance(seq, FeatureSequence):
                raise ValidationError(f"layer {idx} is not a FeatureSequence")
        first = next(iter(layers.values()))
        for idx, seq in layers.items():
            if seq.T != first.T:
                raise ValidationError(
                    f"utterance {self.utterance_id!r}: layer {idx} has T={seq.T}, "
                    f"expected {first.T}"
                )
            if seq.frame_rate_hz != first.frame_rate_hz:
                raise ValidationError(
                    f"utterance {self.utterance_id!r}: layer {idx} frame rate differs"
                )
        object.__setattr__(self, "layers", {int(k): v for k, v in layers.items()})

    @property
    def T(self) -> int:
        return next(iter(self.layers.values())).T

    @property
    def frame_rate_hz(self) -> Fraction:
        return next(iter(self.layers.values())).frame_rate_hz

    @property
    def layer_indices(self) -> list[int]:
        return list(self.layers)

    def __getitem__(self, layer: int) -> FeatureSequence:
        try:
            return self.layers[layer]
        except KeyError:
            raise ValidationError(
                f"utterance {self.utterance_id!r} has no layer {layer}"
            ) from None

    def __eq__(self, other):
        if not isinstance(other, LayeredFeatures):
            return NotImplemented
        return self.utterance_id == other.utterance_id and self.layers == other.layers

    __hash__ = None


# ---------------------------------------------------------------------------
# MMF files


def encode_feature_file(lf: LayeredFeatures) -> bytes:
    rate = lf.frame_rate_hz
    parts = [struct.pack("<IIH", rate.numerator, rate.denominator, len(lf.layers))]
    for idx, seq in lf.layers.items():
        parts.append(struct.pack("<HII", idx, seq.T, seq.D))
        parts.append(seq.data.astype("<f4", copy=False).tobytes())
    payload = b"".join(parts)
    return (
        MMF_MAGIC
        + struct.pack("<H", MMF_VERSION)
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def write_feature_file(lf: LayeredFeatures, path) -> None:
    # re-run the invariant checks in case the mapping was mutated after creation
    LayeredFeatures(lf.layers, lf.utterance_id)
    Path(path).write_bytes(encode_feature_file(lf))


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes, what: str, base: int = 0):
        self.buf = buf
        self.pos = 0
        self.what = what
        # added to positions in error messages so they are file offsets
        self.base = base

    def take(self, n: int, field_name: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.what}: truncated while reading {field_name} "
                f"(need {n} bytes, {len(self.buf) - self.pos} left)",
                self.base + self.pos,
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field_name: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field_name))

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def check_envelope(buf: bytes, magic: bytes, version: int, what: str) -> _Reader:
    """Validate magic, version and trailing CRC; return a reader over the payload."""
    r = _Reader(buf, what)
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"{what}: bad magic {got!r}, expected {magic!r}", 0)
    (ver,) = r.unpack("<H", "version")
    if ver != version:
        raise VersionError(f"{what}: unsupported version {ver} (expected {version})", 4)
    if r.remaining() < 4:
        raise FormatError(f"{what}: truncated before CRC", r.pos)
    payload = buf[6:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise CRCError(f"{what}: CRC mismatch over payload", len(buf) - 4)
    return _Reader(payload, what, base=6)


def decode_feature_file(buf: bytes, utterance_id: str) -> LayeredFeatures:
    r = _Reader(buf, "MMF")
    magic = r.take(4, "magic")
    if magic != MMF_MAGIC:
        raise FormatError(f"MMF: bad magic {magic!r}", 0)
    (ver,) = r.unpack("<H", "version")
    if ver != MMF_VERSION:
        raise VersionError(f"MMF: unsupported version {ver}", 4)
    num, den, n_layers = r.unpack("<IIH", "header")
    if num == 0 or den == 0:
        raise ValidationError(f"MMF: frame rate {num}/{den} is not positive")
    if n_layers == 0:
        raise ValidationError("MMF: file declares zero layers")
    rate = Fraction(num, den)
    layers = {}
    for _ in range(n_layers):
        start = r.pos
        idx, T, D = r.unpack("<HII", "layer header")
        if T == 0 or D == 0:
            raise ValidationError(
                f"MMF: layer {idx} has T={T}, D={D}; empty sequences are rejected "
                f"(layer header at byte offset {start})"
            )
        nbytes = T * D * 4
        if nbytes > r.remaining() - 4:
            raise FormatError(
                f"MMF: layer {idx} dimensions {T}x{D} overflow the file "
                f"({r.remaining()} bytes left)",
                start,
            )
        if idx in layers:
            raise FormatError(f"MMF: duplicate layer index {idx}", start)
        raw = r.take(nbytes, f"layer {idx} data")
        layers[idx] = (np.frombuffer(raw, dtype="<f4").reshape(T, D), start)
    crc_at = r.pos
    if r.remaining() != 4:
        raise FormatError(f"MMF: expected 4 trailing CRC bytes, found {r.remaining()}", crc_at)
    (crc,) = r.unpack("<I", "CRC")
    if zlib.crc32(buf[6:crc_at]) != crc:
        raise CRCError("MMF: CRC mismatch over payload", crc_at)
    seqs = {}
    for idx, (arr, start) in layers.items():
        if not np.isfinite(arr).all():
            raise ValidationError(f"MMF: layer {idx} (byte offset {start}) contains NaN/Inf")
        seqs[idx] = FeatureSequence(arr.astype(np.float32), rate)
    return LayeredFeatures(seqs, utterance_id)


def read_feature_file(path, utterance_id: str | None = None) -> LayeredFeatures:
    """Read an MMF file. The id defaults to the file stem (MMF stores no id)."""
    path = Path(path)
    return decode_feature_file(path.read_bytes(), utterance_id or path.stem)


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class _Entry:
    utterance_id: str
    path: Path | None = None
    features: LayeredFeatures | None = None


def _check_id(utt_id: str) -> str:
    if not utt_id or "\t" in utt_id or "\n" in utt_id:
        raise ValidationError(f"invalid utterance id {utt_id!r}")
    return utt_id


class Dataset:
    """Ordered collection of utterances, loaded lazily from MMF files.

    Entries either point at a file or hold features in memory (synthetic data).
    """

    def __init__(self, entries: Sequence[_Entry], manifest_path=None):
        ids = [e.utterance_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate utterance ids in dataset")
        self._entries = list(entries)
        self.manifest_path = Path(manifest_path) if manifest_path is not None else None

    @classmethod
    def from_features(cls, utterances: Sequence[LayeredFeatures], manifest_path=None):
        return cls(
            [_Entry(_check_id(u.utterance_id), features=u) for u in utterances],
            manifest_path,
        )

    def __len__(self):
        return len(self._entries)

    @property
    def ids(self) -> list[str]:
        return [e.utterance_id for e in self._entries]

    @property
    def paths(self) -> list[Path | None]:
        return [e.path for e in self._entries]

    def __getitem__(self, i: int) -> LayeredFeatures:
        e = self._entries[i]
        if e.features is not None:
            return e.features
        return read_feature_file(e.path, e.utterance_id)

    def __iter__(self) -> Iterator[LayeredFeatures]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self._entries[i] for i in indices], self.manifest_path)

    def layer_frames(self, layer: int) -> np.ndarray:
        """Concatenate one layer's frames over all utterances, in dataset order."""
        if not len(self):
            raise ArgumentError("dataset is empty")
        chunks = []
        dim = None
        for lf in self:
            if layer not in lf.layers:
                raise ValidationError(
                    f"utterance {lf.utterance_id!r} is missing layer {layer}"
                )
            seq = lf.layers[layer]
            if dim is not None and seq.D != dim:
                raise ValidationError(
                    f"utterance {lf.utterance_id!r} layer {layer} has D={seq.D}, expected {dim}"
                )
            dim = seq.D
            chunks.append(seq.data)
        return np.concatenate(chunks, axis=0)


def read_manifest(path) -> Dataset:
    """Parse a ``utterance_id<TAB>path`` manifest. ``#`` lines are comments.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected 'utterance_id<TAB>path'")
        utt_id, file_path = parts
        p = Path(file_path)
        if not p.is_absolute():
            p = path.parent / p
        entries.append(_Entry(_check_id(utt_id), path=p))
    return Dataset(entries, path)


def write_manifest(path, entries: Sequence[tuple[str, str]], comments: Sequence[str] = ()):
    lines = [f"# {c}" for c in comments]
    lines += [f"{_check_id(i)}\t{p}" for i, p in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_dataset(ds: Dataset, out_dir, comments: Sequence[str] = ()) -> Path:
    """Write every utterance as ``<id>.mmf`` plus a manifest; return its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for lf in ds:
        if os.sep in lf.utterance_id or lf.utterance_id.startswith("."):
            raise ValidationError(f"utterance id {lf.utterance_id!r} is not a safe file name")
        name = f"{lf.utterance_id}.mmf"
        write_feature_file(lf, out_dir / name)
        entries.append((lf.utterance_id, name))
    manifest = out_dir / MANIFEST_NAME
    write_manifest(manifest, entries, comments)
    return manifest


# ---------------------------------------------------------------------------
# Subsampling


def _selection_key(seed: int, utt_id: str) -> bytes:
    return hashlib.sha256(f"{seed}\x00{utt_id}".encode("utf-8")).digest()


def subsample_utterances(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Pick ceil(fraction * N) whole utterances without replacement.

    The choice depends only on the seed and the utterance ids: each id gets a
    hash-derived key and the smallest keys win. Selected utterances keep their
    original dataset order.
    """
    if not len(ds):
        raise ArgumentError("cannot subsample an empty dataset")
    frac = Fraction(repr(float(fraction))) if isinstance(fraction, float) else Fraction(fraction)
    if not 0 < frac <= 1:
        raise ArgumentError(f"fraction must lie in (0, 1], got {fraction!r}")
    n = math.ceil(frac * len(ds))
    if n == len(ds):
        return ds.subset(range(len(ds)))
    ranked = sorted(range(len(ds)), key=lambda i: (_selection_key(seed, ds.ids[i]), ds.ids[i]))
    return ds.subset(sorted(ranked[:n]))


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture feature generator parameters."""

    n_components: int = 8
    D: int = 16
    T: int = 100
    n_utterances: int = 10
    n_layers: int = 3
    component_spread: float = 1.0
    noise_sigma: float = 0.1
    frame_rate_hz: Fraction = field(default=Fraction(50))

    def __post_init__(self):
        for name in ("n_components", "D", "T", "n_utterances", "n_layers"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ArgumentError(f"{name} must be an integer >= 1, got {v!r}")
        if self.n_layers > _U16_MAX + 1:
            raise ArgumentError("n_layers exceeds the number of storable layer indices")
        for name in ("component_spread", "noise_sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ArgumentError(f"{name} must be finite and >= 0, got {v!r}")
        object.__setattr__(self, "frame_rate_hz", as_frame_rate(self.frame_rate_hz))


def synthetic_means(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Per-layer component means, shape (n_layers, n_components, D), float32."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(spec.n_layers, spec.n_components, spec.D))
    return (means * spec.component_spread).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Draw a dataset whose layers share a per-frame component id.

    Each layer has its own component means and its own noise draw, so every
    layer sees the same segmentation but different values.
    """
    means = synthetic_means(spec, seed)
    # a child stream keeps the means independent of how many frames are drawn
    rng = np.random.default_rng([seed, 1])
    width = len(str(spec.n_utterances - 1))
    utterances = []
    for u in range(spec.n_utterances):
        comps = rng.integers(0, spec.n_components, size=spec.T)
        layers = {}
        for layer in range(spec.n_layers):
            frames = means[layer][comps].astype(np.float64)
            if spec.noise_sigma > 0:
                frames = frames + spec.noise_sigma * rng.standard_normal((spec.T, spec.D))
            layers[layer] = FeatureSequence(frames.astype(np.float32), spec.frame_rate_hz)
        utterances.append(LayeredFeatures(layers, f"utt{u:0{width}d}"))
    return Dataset.from_features(utterances)

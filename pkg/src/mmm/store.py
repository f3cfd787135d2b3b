"""Binary persistence for codecs (MMMC) and token grids (MMMT).

Both formats share the MMF envelope: 4-byte magic, u16 version, payload,
then a CRC32 of the payload. Byte layouts are documented in docs/formats.md.
"""

from __future__ import annotations

import json
import struct
import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .kmeans import Codebook, TrainMeta
from .multilayer import LayerWeights, MultiLayerCodec, TokenGrid
from .rvq import ResidualStack
from .tensor_io import MMF_MAGIC, _Reader, check_envelope, decode_feature_file

CODEC_MAGIC = b"MMMC"
CODEC_VERSION = 1
TOKEN_MAGIC = b"MMMT"
TOKEN_VERSION = 1


def _envelope(magic: bytes, version: int, payload: bytes) -> bytes:
    return magic + struct.pack("<H", version) + payload + struct.pack("<I", zlib.crc32(payload))


# ---------------------------------------------------------------------------
# codec archives


def encode_codec(codec: MultiLayerCodec) -> bytes:
    meta = json.dumps({"provenance": codec.provenance}, sort_keys=True, separators=(",", ":"))
    meta_b = meta.encode("utf-8")
    rate = codec.frame_rate_hz
    parts = [
        struct.pack("<I", len(meta_b)), meta_b,
        struct.pack("<IIH", rate.numerator, rate.denominator, len(codec.stacks)),
    ]
    for layer, stack in codec.stacks.items():
        parts.append(struct.pack("<HHI", layer, stack.M, stack.D))
        for cb in stack.codebooks:
            m = cb.train_meta
            hist = m.inertia_history
            parts.append(struct.pack(
                "<Idq?I", cb.K, cb.train_inertia, m.seed, m.converged, m.iterations_run
            ))
            parts.append(struct.pack(f"<I{len(hist)}d", len(hist), *hist))
            parts.append(cb.centroids.astype("<f4", copy=False).tobytes())
    parts.append(struct.pack(f"<H{len(codec.selected_layers)}H",
                             len(codec.selected_layers), *codec.selected_layers))
    lw = codec.fusion_weights
    if lw is None:
        parts.append(b"\x00")
    else:
        parts.append(struct.pack("<BH", 1, len(lw.layers)))
        for layer, logit in zip(lw.layers, lw.logits.tolist()):
            parts.append(struct.pack("<Hd", layer, logit))
    return _envelope(CODEC_MAGIC, CODEC_VERSION, b"".join(parts))


def decode_codec(buf: bytes) -> MultiLayerCodec:
    r = check_envelope(buf, CODEC_MAGIC, CODEC_VERSION, "MMMC")
    try:
        (meta_len,) = r.unpack("<I", "metadata length")
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        num, den, n_stacks = r.unpack("<IIH", "codec header")
        stacks = {}
        for _ in range(n_stacks):
            at = r.pos
            layer, M, D = r.unpack("<HHI", "stack header")
            if M == 0 or D == 0:
                raise ValidationError(f"MMMC: stack for layer {layer} has M={M}, D={D} "
                                      f"(byte offset {r.base + at})")
            if layer in stacks:
                raise FormatError(f"MMMC: duplicate stack for layer {layer}", r.base + at)
            books = []
            for _ in range(M):
                K, inertia, seed, converged, iters = r.unpack("<Idq?I", "stage header")
                (n_hist,) = r.unpack("<I", "history length")
                hist = r.unpack(f"<{n_hist}d", "inertia history")
                at = r.pos
                raw = r.take(K * D * 4, "centroids")
                cents = np.frombuffer(raw, dtype="<f4").reshape(K, D)
                if not np.isfinite(cents).all():
                    raise ValidationError(f"MMMC: non-finite centroid (byte offset {r.base + at})")
                books.append(Codebook(cents, inertia, TrainMeta(seed, iters, converged, hist)))
            stacks[layer] = ResidualStack(layer, tuple(books))
        (n_sel,) = r.unpack("<H", "selection length")
        selected = r.unpack(f"<{n_sel}H", "selected layers")
        (has_w,) = r.unpack("<B", "weights flag")
        weights = None
        if has_w == 1:
            (n_w,) = r.unpack("<H", "weights length")
            pairs = [r.unpack("<Hd", "layer weight") for _ in range(n_w)]
            weights = LayerWeights(tuple(p[0] for p in pairs), [p[1] for p in pairs])
        elif has_w != 0:
            raise FormatError(f"MMMC: bad weights flag {has_w}", r.base + r.pos - 1)
        if r.remaining():
            raise FormatError(f"MMMC: {r.remaining()} unexpected trailing bytes", r.base + r.pos)
        if num == 0 or den == 0:
            raise ValidationError(f"MMMC: frame rate {num}/{den} is not positive")
        return MultiLayerCodec(stacks, selected, Fraction(num, den), weights, meta["provenance"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"MMMC: unreadable metadata: {e}", r.base + 4) from e


def save_codec(codec: MultiLayerCodec, path) -> None:
    Path(path).write_bytes(encode_codec(codec))


def load_codec(path) -> MultiLayerCodec:
    return decode_codec(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# token files


def id_width(K: int) -> int:
    """Smallest of 1, 2 or 4 bytes that holds every id below K."""
    if K <= 1 << 8:
        return 1
    if K <= 1 << 16:
        return 2
    return 4


_WIDTH_DTYPE = {1: "<u1", 2: "<u2", 4: "<u4"}


def encode_tokens(grid: TokenGrid) -> bytes:
    if grid.T == 0 or not grid.streams:
        raise ValidationError(
            f"token grid {grid.utterance_id!r} is empty (T={grid.T}, {len(grid.streams)} streams)"
        )
    uid = grid.utterance_id.encode("utf-8")
    parts = [struct.pack("<H", len(uid)), uid, struct.pack("<IH", grid.T, len(grid.streams))]
    widths = []
    for layer, stage, K in grid.streams:
        w = id_width(K)
        widths.append(w)
        parts.append(struct.pack("<HHIB", layer, stage, K, w))
    for s, w in enumerate(widths):
        parts.append(grid.ids[:, s].astype(_WIDTH_DTYPE[w]).tobytes())
    return _envelope(TOKEN_MAGIC, TOKEN_VERSION, b"".join(parts))


def decode_tokens(buf: bytes) -> TokenGrid:
    r = check_envelope(buf, TOKEN_MAGIC, TOKEN_VERSION, "MMMT")
    (n_uid,) = r.unpack("<H", "id length")
    try:
        uid = r.take(n_uid, "utterance id").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("MMMT: utterance id is not UTF-8", 8) from e
    T, n_streams = r.unpack("<IH", "token header")
    streams, widths = [], []
    for _ in range(n_streams):
        at = r.pos
        layer, stage, K, w = r.unpack("<HHIB", "stream descriptor")
        if w not in _WIDTH_DTYPE:
            raise FormatError(f"MMMT: bad id width {w}", r.base + at)
        streams.append((layer, stage, K))
        widths.append(w)
    if T == 0 or n_streams == 0:
        raise ValidationError(f"MMMT: empty token grid (T={T}, {n_streams} streams)")
    ids = np.empty((T, n_streams), dtype=np.int64)
    for s, w in enumerate(widths):
        raw = r.take(T * w, f"stream {s} ids")
        ids[:, s] = np.frombuffer(raw, dtype=_WIDTH_DTYPE[w])
    if r.remaining():
        raise FormatError(f"MMMT: {r.remaining()} unexpected trailing bytes", r.base + r.pos)
    return TokenGrid(uid, tuple(streams), ids)


def save_tokens(grid: TokenGrid, path) -> None:
    Path(path).write_bytes(encode_tokens(grid))


def load_tokens(path) -> TokenGrid:
    return decode_tokens(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# inspection


def describe_file(path) -> str:
    """Human-readable summary of an MMF, MMMC or MMMT file."""
    path = Path(path)
    buf = path.read_bytes()
    magic = buf[:4]
    if magic == MMF_MAGIC:
        lf = decode_feature_file(buf, path.stem)
        lines = [f"MMF feature file {path.name}", f"  frame_rate_hz: {lf.frame_rate_hz}",
                 f"  T: {lf.T}", f"  layers: {len(lf.layers)}"]
        lines += [f"    layer {l}: D={s.D}" for l, s in lf.layers.items()]
        return "\n".join(lines)
    if magic == CODEC_MAGIC:
        codec = decode_codec(buf)
        lines = [f"MMMC codec archive {path.name}",
                 f"  frame_rate_hz: {codec.frame_rate_hz}",
                 f"  selected_layers: {list(codec.selected_layers)}",
                 f"  streams: {len(codec.streams)}"]
        for l, st in codec.stacks.items():
            lines.append(f"    layer {l}: M={st.M} K={st.Ks} D={st.D}")
        if codec.fusion_weights is not None:
            w = ", ".join(f"{l}:{v:.4f}" for l, v in codec.fusion_weights.as_dict().items())
            lines.append(f"  fusion_weights: {w}")
        for key, value in sorted(codec.provenance.items()):
            lines.append(f"  provenance.{key}: {json.dumps(value, sort_keys=True)}")
        return "\n".join(lines)
    if magic == TOKEN_MAGIC:
        grid = decode_tokens(buf)
        lines = [f"MMMT token file {path.name}", f"  utterance_id: {grid.utterance_id}",
                 f"  T: {grid.T}", f"  streams: {len(grid.streams)}"]
        lines += [f"    layer {l} stage {m}: K={k} ({id_width(k)}-byte ids)"
                  for l, m, k in grid.streams]
        return "\n".join(lines)
    raise FormatError(f"{path}: unknown magic {magic!r}", 0)

"""Binary checkpoint for a trained two-stage pipeline.

Layout (little-endian)::

    4s   magic "SRCR"
    u32  version (1)
    u32  M, d0, d_u, d_z, L, hidden, conv_layers, conv_hidden
    u32  length of the config text, then the UTF-8 config text (key=value lines)
    u32  tensor count
    per tensor: u32 rows, u32 cols, rows*cols f32 (row-major)

Tensor order:

1. for each modality r: outer encoder, outer decoder, inner encoder, inner
   decoder (each layer's weight then bias), then the modality encoding e_r
2. feature scaler mean (M x d0) and scale (M x 1)
3. HSL convolution weights, first layer first
4. memory-bank anchors (L x d_z)
"""

import struct

import numpy as np

from . import hsl, rce
from .errors import ParseError
from .pipeline import VARIANTS, FeatureScaler, PipelineConfig, TrainedPipeline

MAGIC = b"SRCR"
VERSION = 1
_HEADER = struct.Struct("<4s9I")
_U32 = struct.Struct("<I")
_SHAPE = struct.Struct("<2I")


def _tensor_list(trained):
    scaler = trained.scaler
    arrays = [t.data for _, t in trained.rce_model.named_tensors()]
    arrays += [scaler.mean, scaler.scale.reshape(-1, 1)]
    arrays += [layer.theta.data for layer in trained.hsl_model.layers]
    arrays.append(trained.hsl_model.bank.anchors.data)
    return arrays


def encode_checkpoint(trained):
    cfg = trained.config
    model = trained.rce_model
    text = cfg.to_text().encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, model.n_modalities, model.feature_dim, model.unified_dim,
                     cfg.anchor_dim, cfg.n_anchors, cfg.hidden, cfg.conv_layers, cfg.conv_hidden),
        _U32.pack(len(text)),
        text,
    ]
    arrays = _tensor_list(trained)
    parts.append(_U32.pack(len(arrays)))
    for a in arrays:
        a = np.asarray(a)
        parts.append(_SHAPE.pack(*a.shape))
        parts.append(a.astype("<f4").tobytes())
    return b"".join(parts)


def write_checkpoint(trained, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(trained))


class _Cursor:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, count, what):
        if self.pos + count > len(self.data):
            raise ParseError(f"checkpoint truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt, what):
        return fmt.unpack(self.take(fmt.size, what))


def decode_checkpoint(data):
    """Rebuild a :class:`TrainedPipeline` (with empty histories) from bytes."""
    cur = _Cursor(data)
    magic, version, m, d0, du, dz, n_anchors, hidden, conv_layers, conv_hidden = cur.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    (text_len,) = cur.unpack(_U32, "config length")
    try:
        config = PipelineConfig.from_text(cur.take(text_len, "config").decode("utf-8"))
    except UnicodeDecodeError:
        raise ParseError("config text is not UTF-8", cur.pos) from None
    expected = (du, dz, n_anchors, hidden, conv_layers, conv_hidden)
    actual = (config.unified_dim, config.anchor_dim, config.n_anchors, config.hidden,
              config.conv_layers, config.conv_hidden)
    if expected != actual:
        raise ParseError("header dimensions disagree with the embedded config", 8)

    rce_model = rce.RceModel(m, d0, du, hidden, config.seed,
                             direct_center=VARIANTS[config.variant].get("direct_center", False))
    hsl_config = config.hsl_config()
    layers = hsl.make_layers(d0, hsl_config, np.random.default_rng(0))
    bank = hsl.MemoryBank(np.zeros((n_anchors, dz)))
    hsl_model = hsl.HslModel(hsl_config, layers, bank)
    scaler = FeatureScaler(np.zeros((m, d0)), np.ones(m))

    targets = [t for _, t in rce_model.named_tensors()]
    n_rce = len(targets)
    targets += [None, None]
    targets += [layer.theta for layer in layers]
    targets.append(bank.anchors)

    (count,) = cur.unpack(_U32, "tensor count")
    if count != len(targets):
        raise ParseError(f"expected {len(targets)} tensors, found {count}", cur.pos - 4)
    arrays = []
    for j, target in enumerate(targets):
        rows, cols = cur.unpack(_SHAPE, f"shape of tensor {j}")
        want = target.shape if target is not None else ((m, d0) if j == n_rce else (m, 1))
        if (rows, cols) != want:
            raise ParseError(f"tensor {j} has shape {(rows, cols)}, expected {want}", cur.pos - 8)
        raw = cur.take(4 * rows * cols, f"tensor {j}")
        arrays.append(np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float64))
    if cur.pos != len(data):
        raise ParseError(f"{len(data) - cur.pos} trailing bytes", cur.pos)

    for target, array in zip(targets, arrays):
        if target is not None:
            target.data = array
    scaler.mean = arrays[n_rce]
    scaler.scale = arrays[n_rce + 1].ravel()
    if not np.all(np.isfinite(bank.anchors.data)):
        raise ParseError("anchors must be finite", cur.pos)
    return TrainedPipeline(config, scaler, rce_model, hsl_model, [], [])


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


"""Deployable bit-packed model container.

Binary layout (all integers little-endian):

    magic "MPQ1" | u32 version | u32 graph layer count | f32 logits_scale
    u32 n_act   | per entry: u32 tensor_id, u8 bits, f32 clip_max
    u32 n_rec   | per record:
        u32 layer_id, u8 kind_code, u8 weight_bits, u8 out_bits
        u8 ndim, u32 dims[ndim]                (weight shape; ndim=0 if none)
        f32 scales[cout], i32 bias[cout]       (weighted kinds only)
        u8 n_rq | per rq: u32 count, i32 mult[count], i32 shift[count]
        u64 payload_len, payload               (packed weight codes)

Every compute layer gets a record; avg_pool and relu_clip carry a single
scalar requant, add_residual carries one per input, weighted layers carry a
per-output-channel requant. Requant params are stored rather than rebuilt at
load time so a shipped file pins its own arithmetic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ModelMismatchError, PackFormatError, PolicyError
from .graph_ir import COMPUTE_KINDS, WEIGHTED_KINDS, ALL_KINDS, NetworkGraph
from .memory_model import QuantPolicy, validate_policy
from .quantizer import (
    ActRange,
    QuantizedTensor,
    RequantParams,
    SUB_BYTE_BITS,
    compute_requant,
    quantize_weights_pc,
    round_half_away,
)

MAGIC = b"MPQ1"
VERSION = 1

_KIND_CODE = {k: i for i, k in enumerate(ALL_KINDS)}
_CODE_KIND = {i: k for k, i in _KIND_CODE.items()}

INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1


@dataclass
class PackedLayer:
    layer_id: int
    kind: str
    weight_bits: int = 0           # 0 for weight-free records
    out_bits: int = 8              # 32 marks the raw-logits record
    weight: QuantizedTensor | None = None
    bias_int: np.ndarray | None = None
    requants: tuple[RequantParams, ...] = ()


@dataclass
class PackedModel:
    graph_layers: int
    act_bits: dict[int, int]
    act_clip: dict[int, float]
    layers: dict[int, PackedLayer] = field(default_factory=dict)
    logits_scale: float = 1.0

    def act_scale(self, tensor_id: int) -> float:
        bits = self.act_bits[tensor_id]
        return self.act_clip[tensor_id] / ((1 << bits) - 1)

    def act_range(self, tensor_id: int) -> ActRange:
        return ActRange(tensor_id=tensor_id, clip_max=self.act_clip[tensor_id])


def _bias_int(bias: np.ndarray, acc_scales: np.ndarray) -> np.ndarray:
    b = round_half_away(np.asarray(bias, dtype=np.float64) / acc_scales)
    if b.size and (b.min() < INT32_MIN or b.max() > INT32_MAX):
        raise PackFormatError("bias does not fit a 32-bit integer at the accumulator scale")
    return b.astype(np.int32)


def build_packed_model(g: NetworkGraph, weights: dict, policy: QuantPolicy,
                       ranges: dict[int, ActRange]) -> PackedModel:
    """Quantize weights/biases and precompute every requant for deployment."""
    validate_policy(g, policy)
    encoded = set(g.encoded_tensors())
    for t in encoded:
        if policy.act_bits[t] not in SUB_BYTE_BITS:
            raise PolicyError(f"tensor {t}: export needs sub-byte activation bits")
        if t not in ranges:
            raise PolicyError(f"tensor {t}: no calibrated activation range")

    act_bits = {t: policy.act_bits[t] for t in sorted(encoded)}
    # clips round to f32 here so in-memory and deserialized models agree exactly
    act_clip = {t: float(np.float32(ranges[t].clip_max)) for t in sorted(encoded)}

    def scale_of(t: int) -> float:
        return act_clip[t] / ((1 << act_bits[t]) - 1)

    model = PackedModel(graph_layers=len(g.layers), act_bits=act_bits, act_clip=act_clip)
    for layer in g.layers:
        if layer.kind not in COMPUTE_KINDS and layer.kind != "relu_clip":
            continue
        rec = PackedLayer(layer_id=layer.id, kind=layer.kind)
        if layer.kind in WEIGHTED_KINDS:
            wbits = policy.weight_bits[layer.id]
            if wbits not in SUB_BYTE_BITS:
                raise PolicyError(f"layer {layer.id}: export needs sub-byte weight bits")
            qw = quantize_weights_pc(weights[layer.id]["w"], wbits)
            # scales ride along as f32 in the container; round here so the
            # requants below derive from exactly what a loaded model holds
            qw = replace(qw, scales=np.float32(qw.scales).astype(np.float64))
            s_in = scale_of(layer.input_ids[0])
            acc_scales = s_in * qw.scales
            rec.weight_bits = wbits
            rec.weight = qw
            rec.bias_int = _bias_int(weights[layer.id]["b"], acc_scales)
            if layer.id in encoded:
                rec.out_bits = act_bits[layer.id]
                s_out = scale_of(layer.id)
            else:
                # classifier logits stay wide; shared scale keeps argmax exact
                rec.out_bits = 32
                s_out = float(acc_scales.max())
                model.logits_scale = s_out
            rec.requants = (compute_requant(s_in, qw.scales, s_out),)
        elif layer.kind == "avg_pool":
            s_in = scale_of(layer.input_ids[0])
            inv_area = 1.0 / (layer.kernel_h * layer.kernel_w)
            if layer.id in encoded:
                rec.out_bits = act_bits[layer.id]
                s_out = scale_of(layer.id)
            else:  # pool feeding the output head: stay wide at the input scale
                rec.out_bits = 32
                s_out = s_in
                model.logits_scale = s_out
            rec.requants = (compute_requant(s_in, np.array([inv_area]), s_out),)
        elif layer.kind == "add_residual":
            s_ins = [scale_of(t) for t in layer.input_ids]
            if layer.id in encoded:
                rec.out_bits = act_bits[layer.id]
                s_out = scale_of(layer.id)
            else:
                rec.out_bits = 32
                s_out = max(s_ins)  # both ratios <= 1, always representable
                model.logits_scale = s_out
            rec.requants = tuple(
                compute_requant(s, np.array([1.0]), s_out) for s in s_ins
            )
        else:  # relu_clip: pure re-encode
            s_in = scale_of(layer.input_ids[0])
            if layer.id in encoded:
                rec.out_bits = act_bits[layer.id]
                s_out = scale_of(layer.id)
            else:  # identity requant, codes pass through wide
                rec.out_bits = 32
                s_out = s_in
                model.logits_scale = s_out
            rec.requants = (compute_requant(s_in, np.array([1.0]), s_out),)
        model.layers[layer.id] = rec
    # f32 like the clips, so a deserialized model is bit-identical
    model.logits_scale = float(np.float32(model.logits_scale))
    return model


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def serialize(model: PackedModel) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, model.graph_layers)
    out += struct.pack("<f", model.logits_scale)
    out += struct.pack("<I", len(model.act_bits))
    for tid in sorted(model.act_bits):
        out += struct.pack("<IBf", tid, model.act_bits[tid], model.act_clip[tid])
    out += struct.pack("<I", len(model.layers))
    for lid in sorted(model.layers):
        rec = model.layers[lid]
        out += struct.pack("<IBBB", rec.layer_id, _KIND_CODE[rec.kind],
                           rec.weight_bits, rec.out_bits)
        if rec.weight is not None:
            shape = rec.weight.shape
            out += struct.pack("<B", len(shape))
            out += struct.pack(f"<{len(shape)}I", *shape)
            out += rec.weight.scales.astype("<f4").tobytes()
            out += rec.bias_int.astype("<i4").tobytes()
        else:
            out += struct.pack("<B", 0)
        out += struct.pack("<B", len(rec.requants))
        for rq in rec.requants:
            mult = np.atleast_1d(rq.multiplier).astype("<i4")
            shift = np.atleast_1d(rq.shift).astype("<i4")
            out += struct.pack("<I", mult.size)
            out += mult.tobytes() + shift.tobytes()
        payload = rec.weight.packed if rec.weight is not None else b""
        out += struct.pack("<Q", len(payload))
        out += payload
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise PackFormatError("truncated packed-model file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data: bytes) -> PackedModel:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise PackFormatError("not a packed model (bad magic)")
    version, graph_layers = r.unpack("<II")
    if version != VERSION:
        raise PackFormatError(f"unsupported packed-model version {version}")
    (logits_scale,) = r.unpack("<f")
    (n_act,) = r.unpack("<I")
    act_bits: dict[int, int] = {}
    act_clip: dict[int, float] = {}
    for _ in range(n_act):
        tid, bits, clip = r.unpack("<IBf")
        act_bits[tid] = bits
        act_clip[tid] = clip
    model = PackedModel(graph_layers=graph_layers, act_bits=act_bits,
                        act_clip=act_clip, logits_scale=logits_scale)
    (n_rec,) = r.unpack("<I")
    for _ in range(n_rec):
        lid, kcode, wbits, obits = r.unpack("<IBBB")
        if kcode not in _CODE_KIND:
            raise PackFormatError(f"unknown layer kind code {kcode}")
        rec = PackedLayer(layer_id=lid, kind=_CODE_KIND[kcode],
                          weight_bits=wbits, out_bits=obits)
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        scales = bias = None
        if ndim:
            cout = shape[0]
            scales = np.frombuffer(r.take(4 * cout), dtype="<f4").astype(np.float64)
            bias = np.frombuffer(r.take(4 * cout), dtype="<i4").copy()
        (n_rq,) = r.unpack("<B")
        rqs = []
        for _ in range(n_rq):
            (count,) = r.unpack("<I")
            mult = np.frombuffer(r.take(4 * count), dtype="<i4").copy()
            shift = np.frombuffer(r.take(4 * count), dtype="<i4").copy()
            rqs.append(RequantParams(multiplier=mult, shift=shift))
        rec.requants = tuple(rqs)
        (plen,) = r.unpack("<Q")
        payload = r.take(plen)
        if ndim:
            rec.weight = QuantizedTensor(bits=wbits, packed=payload, shape=shape,
                                         scales=scales, signed=True)
            rec.bias_int = bias
        model.layers[lid] = rec
    if r.pos != len(data):
        raise PackFormatError("trailing bytes after packed model")
    return model


def save_packed(model: PackedModel, path: str) -> None:
    with open(path, "wb") as f:
        f.write(serialize(model))


def load_packed(path: str) -> PackedModel:
    with open(path, "rb") as f:
        return deserialize(f.read())


def check_model_matches(g: NetworkGraph, model: PackedModel) -> None:
    """Raise ModelMismatchError when a model cannot run on a graph."""
    if model.graph_layers != len(g.layers):
        raise ModelMismatchError(
            f"model built for {model.graph_layers} layers, graph has {len(g.layers)}")
    for t in g.encoded_tensors():
        if t not in model.act_bits:
            raise ModelMismatchError(f"model lacks an encoding for tensor {t}")
    for layer in g.layers:
        if layer.kind not in COMPUTE_KINDS and layer.kind != "relu_clip":
            continue
        rec = model.layers.get(layer.id)
        if rec is None:
            raise ModelMismatchError(f"model lacks a record for layer {layer.id}")
        if rec.kind != layer.kind:
            raise ModelMismatchError(
                f"layer {layer.id}: model kind {rec.kind!r} != graph kind {layer.kind!r}")
        if layer.kind in WEIGHTED_KINDS:
            if rec.weight is None or rec.weight.numel != layer.param_count:
                raise ModelMismatchError(
                    f"layer {layer.id}: weight payload does not match param count")
            if rec.weight.shape[0] != layer.out_channels:
                raise ModelMismatchError(
                    f"layer {layer.id}: weight channels != out_channels")

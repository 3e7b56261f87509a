"""Binary model and checkpoint files (``.lmba``).

Layout, all integers little-endian::

    "LMBA"  u32 version  u64 header_len  header (UTF-8 key=value lines)
    u32 n_tensors
    n_tensors x { u32 name_len, name, u8 dtype, u32 rank, u64 extents[rank], u64 offset }
    payloads, each starting on a 64-byte boundary

dtype tags: 0 float32, 1 float64, 2 4-bit groups (scales f32[G], zero points
nibble-packed, then codes nibble-packed). Payload sizes follow from dtype and
shape, so the file must end exactly where the last payload ends.
See docs/format.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (LlambaConfig, LlambaModel, TeacherConfig, TeacherModel, config_from_text,
                    config_to_text)
from .quant import GROUP_SIZE, QuantTensor, pack_nibbles, unpack_codes

MAGIC = b"LMBA"
VERSION = 1
ALIGN = 64

F32, F64, Q4 = 0, 1, 2
_TAGS = {np.dtype("<f4"): F32, np.dtype("<f8"): F64}
_NUMPY = {F32: np.dtype("<f4"), F64: np.dtype("<f8")}


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class UnknownDtypeError(FormatError):
    pass


@dataclass
class Checkpoint:
    """Student weights plus optimizer state, enough to resume a stage."""

    model: LlambaModel
    stage: int
    step: int
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_step: int = 0
    hyper: dict = field(default_factory=dict)   # beta1, beta2, weight_decay, eps
    meta: dict = field(default_factory=dict)


@dataclass
class RawFile:
    header: dict
    tensors: dict


def _payload_nbytes(tag, shape, group_size):
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if tag in _NUMPY:
        return n * _NUMPY[tag].itemsize
    cols = shape[-1]
    groups = (n // cols) * -(-cols // group_size)
    return 4 * groups + (groups + 1) // 2 + (n + 1) // 2


def _encode(value):
    if isinstance(value, QuantTensor):
        return Q4, value.shape, (value.scales.astype("<f4").tobytes()
                                 + pack_nibbles(value.zeros).tobytes() + value.packed.tobytes())
    arr = np.asarray(value)
    tag = _TAGS.get(arr.dtype.newbyteorder("<"))
    if tag is None:
        raise UnknownDtypeError(f"cannot store dtype {arr.dtype}")
    return tag, arr.shape, np.ascontiguousarray(arr, dtype=_NUMPY[tag]).tobytes()


def write_raw(path, header: dict, tensors: dict) -> None:
    """Write header pairs and named tensors; output depends only on the inputs."""
    head = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    encoded = [(name, *_encode(v)) for name, v in tensors.items()]
    table_len = 4
    for name, _, shape, _ in encoded:
        table_len += 4 + len(name.encode("utf-8")) + 1 + 4 + 8 * len(shape) + 8
    pos = 4 + 4 + 8 + len(head) + table_len
    offsets = []
    for _, _, _, payload in encoded:
        pos = -(-pos // ALIGN) * ALIGN
        offsets.append(pos)
        pos += len(payload)

    out = bytearray(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
    out += struct.pack("<I", len(encoded))
    for (name, tag, shape, _), off in zip(encoded, offsets):
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb + struct.pack("<BI", tag, len(shape))
        out += struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<Q", off)
    for (_, _, _, payload), off in zip(encoded, offsets):
        out += bytes(off - len(out)) + payload
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt, what):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise TruncationError(f"file ends inside {what}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncationError(f"file ends inside {what}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b


def read_raw(path) -> RawFile:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.take("<I", "version")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    (hlen,) = r.take("<Q", "header length")
    try:
        text = r.raw(hlen, "header").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not UTF-8") from exc
    header = {}
    for line in text.splitlines():
        if line:
            if "=" not in line:
                raise FormatError(f"{path}: malformed header line {line!r}")
            k, v = line.split("=", 1)
            header[k] = v
    group = int(header.get("quant.group_size", GROUP_SIZE))

    (count,) = r.take("<I", "tensor count")
    entries = []
    for i in range(count):
        (nlen,) = r.take("<I", f"table entry {i}")
        try:
            name = r.raw(nlen, f"table entry {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name {i} is not UTF-8") from exc
        tag, rank = r.take("<BI", f"table entry {name!r}")
        if tag not in (F32, F64, Q4):
            raise UnknownDtypeError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        shape = r.take(f"<{rank}Q", f"table entry {name!r}")
        (off,) = r.take("<Q", f"table entry {name!r}")
        entries.append((name, tag, tuple(int(s) for s in shape), off))

    tensors = {}
    end = r.pos
    for name, tag, shape, off in entries:
        if off < end or off % ALIGN:
            raise FormatError(f"{path}: tensor {name!r} has bad offset {off}")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        if tag == Q4 and not shape:
            raise FormatError(f"{path}: quantized tensor {name!r} has rank 0")
        size = _payload_nbytes(tag, shape, group)
        if off + size > len(buf):
            raise TruncationError(f"{path}: payload of tensor {name!r} is truncated")
        payload = buf[off:off + size]
        tensors[name] = _decode(tag, shape, payload, group)
        end = off + size
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after last payload")
    return RawFile(header, tensors)


def _decode(tag, shape, payload, group):
    if tag in _NUMPY:
        return np.frombuffer(payload, dtype=_NUMPY[tag]).reshape(shape).astype(_NUMPY[tag].newbyteorder("="))
    n = int(np.prod(shape))
    cols = shape[-1]
    groups = (n // cols) * -(-cols // group)
    scales = np.frombuffer(payload, dtype="<f4", count=groups).astype(np.float32)
    zbytes = (groups + 1) // 2
    zeros = unpack_codes(np.frombuffer(payload, np.uint8, zbytes, 4 * groups), groups)
    packed = np.frombuffer(payload, np.uint8, offset=4 * groups + zbytes).copy()
    return QuantTensor(shape, group, scales, zeros.astype(np.uint8), packed)


# ------------------------------------------------------------ models

def _model_header(kind, cfg, params):
    head = {"kind": kind}
    head.update({f"config.{k}": v for k, v in config_to_text(cfg).items()})
    groups = {v.group_size for v in params.values() if isinstance(v, QuantTensor)}
    if len(groups) > 1:
        raise ValueError("mixed quantization group sizes in one file")
    if groups:
        head["quant.group_size"] = str(groups.pop())
    return head


def save(obj, path) -> None:
    """Write a student, teacher or :class:`Checkpoint`."""
    if isinstance(obj, Checkpoint):
        head = _model_header("checkpoint", obj.model.config, obj.model.params)
        head.update({"stage": str(obj.stage), "step": str(obj.step), "opt.step": str(obj.opt_step)})
        head.update({f"opt.{k}": repr(float(v)) for k, v in sorted(obj.hyper.items())})
        head.update({f"meta.{k}": str(v) for k, v in sorted(obj.meta.items())})
        tensors = {f"param.{k}": v for k, v in sorted(obj.model.params.items())}
        tensors.update({f"opt.m.{k}": v for k, v in sorted(obj.opt_m.items())})
        tensors.update({f"opt.v.{k}": v for k, v in sorted(obj.opt_v.items())})
    elif isinstance(obj, LlambaModel):
        head = _model_header("student", obj.config, obj.params)
        tensors = dict(sorted(obj.params.items()))
    elif isinstance(obj, TeacherModel):
        head = _model_header("teacher", obj.config, obj.params)
        tensors = dict(sorted(obj.params.items()))
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    write_raw(path, head, tensors)


def load(path):
    """Read a file written by :func:`save`; returns the matching object."""
    raw = read_raw(path)
    kind = raw.header.get("kind")
    cfg_kv = {k[len("config."):]: v for k, v in raw.header.items() if k.startswith("config.")}
    try:
        if kind == "teacher":
            return TeacherModel(config_from_text(TeacherConfig, cfg_kv), raw.tensors)
        cfg = config_from_text(LlambaConfig, cfg_kv)
        if kind == "student":
            return LlambaModel(cfg, raw.tensors)
        if kind == "checkpoint":
            def part(prefix):
                return {k[len(prefix):]: v for k, v in raw.tensors.items() if k.startswith(prefix)}
            hyper = {k[len("opt."):]: float(v) for k, v in raw.header.items()
                     if k.startswith("opt.") and k != "opt.step"}
            meta = {k[len("meta."):]: v for k, v in raw.header.items() if k.startswith("meta.")}
            return Checkpoint(LlambaModel(cfg, part("param.")), int(raw.header["stage"]),
                              int(raw.header["step"]), part("opt.m."), part("opt.v."),
                              int(raw.header["opt.step"]), hyper, meta)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: inconsistent {kind} file: {exc}") from exc
    raise FormatError(f"{path}: unknown file kind {kind!r}")

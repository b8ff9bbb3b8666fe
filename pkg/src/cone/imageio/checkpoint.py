"""Binary checkpoint format.

Layout (all integers unsigned little-endian, all reals float32 LE)::

    offset 0   4s   magic b"CONE"
           4   u32  format version
           8   u32  header length N
          12   N    header, UTF-8 JSON with sorted keys (variant, mode,
                    stages, epoch, configs, batchnorm counts/momentum/eps)
        12+N   f32  a
               f32  b
               u32  tensor count
               then per tensor:
                   u16 name length, name (UTF-8)
                   u8  ndim, u32 x ndim dims
                   u32 value count (must equal the product of dims)
                   f32 x count

Tensors are written in a fixed order: enhancement blocks, then
self-calibrated blocks (kernel, bias, gamma, beta, running mean, running
var), then the self-calibrated output conv.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cem import CrfParams, Variant
from ..iem import ConvBlock, EnhNetWeights, NormBlock, SelfCalWeights
from ..ndgrad import BatchNormState, Tensor

MAGIC = b"CONE"
VERSION = 1
MODES = ("iem_only", "fixed_theta", "learned_theta")


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass
class Checkpoint:
    enh: EnhNetWeights
    selfcal: SelfCalWeights
    crf: CrfParams
    mode: str = "learned_theta"
    stages: int = 3
    epoch: int = 0
    train_config: dict = field(default_factory=dict)
    loss_config: dict = field(default_factory=dict)

    @property
    def variant(self) -> Variant:
        return self.crf.variant


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, blk in enumerate(ckpt.enh.blocks):
        out += [(f"enh.{i}.weight", blk.weight.data), (f"enh.{i}.bias", blk.bias.data)]
    for i, blk in enumerate(ckpt.selfcal.blocks):
        out += [(f"selfcal.{i}.weight", blk.weight.data), (f"selfcal.{i}.bias", blk.bias.data),
                (f"selfcal.{i}.gamma", blk.gamma.data), (f"selfcal.{i}.beta", blk.beta.data),
                (f"selfcal.{i}.running_mean", blk.state.running_mean),
                (f"selfcal.{i}.running_var", blk.state.running_var)]
    out += [("selfcal.out.weight", ckpt.selfcal.output.weight.data),
            ("selfcal.out.bias", ckpt.selfcal.output.bias.data)]
    return out


def _header(ckpt: Checkpoint) -> dict:
    states = [blk.state for blk in ckpt.selfcal.blocks]
    return {
        "variant": ckpt.crf.variant.value,
        "mode": ckpt.mode,
        "stages": ckpt.stages,
        "epoch": ckpt.epoch,
        "enh_blocks": len(ckpt.enh.blocks),
        "selfcal_blocks": len(ckpt.selfcal.blocks),
        "bn_counts": [s.count for s in states],
        "bn_momentum": states[0].momentum if states else 0.1,
        "bn_eps": states[0].eps if states else 1e-5,
        "train_config": ckpt.train_config,
        "loss_config": ckpt.loss_config,
    }


def dumps(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    a, b = ckpt.crf.a.data, ckpt.crf.b.data
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header,
             struct.pack("<ff", float(a), float(b))]
    named = _named_tensors(ckpt)
    parts.append(struct.pack("<I", len(named)))
    for name, arr in named:
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<I", arr.size) + arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = dumps(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                f"file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    version, hlen = r.unpack("<II", "version/header length")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    hpos = r.pos
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header at offset {hpos}: {exc}") from None
    a, b = r.unpack("<ff", "theta")
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        (n,) = r.unpack("<I", f"{name} count")
        if n != int(np.prod(dims, dtype=np.int64)):
            raise CheckpointError(
                f"tensor {name!r} at offset {start}: declared count {n} != product of dims {dims}")
        arr = np.frombuffer(r.take(4 * n, f"{name} payload"), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes at offset {r.pos}")

    def get(name):
        try:
            return tensors[name]
        except KeyError:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}") from None

    def param(name):
        return Tensor(get(name), requires_grad=True)

    enh = EnhNetWeights([ConvBlock(param(f"enh.{i}.weight"), param(f"enh.{i}.bias"))
                         for i in range(header["enh_blocks"])])
    blocks = []
    for i, cnt in enumerate(header["bn_counts"]):
        state = BatchNormState(get(f"selfcal.{i}.gamma").size,
                               momentum=header["bn_momentum"], eps=header["bn_eps"])
        state.running_mean = get(f"selfcal.{i}.running_mean").copy()
        state.running_var = get(f"selfcal.{i}.running_var").copy()
        state.count = cnt
        blocks.append(NormBlock(param(f"selfcal.{i}.weight"), param(f"selfcal.{i}.bias"),
                                gamma=param(f"selfcal.{i}.gamma"), beta=param(f"selfcal.{i}.beta"),
                                state=state))
    selfcal = SelfCalWeights(blocks, ConvBlock(param("selfcal.out.weight"), param("selfcal.out.bias")))
    mode = header["mode"]
    if mode not in MODES:
        raise CheckpointError(f"unknown training mode {mode!r} in header")
    crf = CrfParams(Variant.parse(header["variant"]), a=Tensor(np.float32(a)),
                    b=Tensor(np.float32(b)))
    return Checkpoint(enh, selfcal, crf, mode=mode, stages=header["stages"],
                      epoch=header["epoch"], train_config=header["train_config"],
                      loss_config=header["loss_config"])


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())

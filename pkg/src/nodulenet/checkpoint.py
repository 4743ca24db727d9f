"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"NODL"  u32 version  u64 manifest_len  manifest JSON (utf-8)
    repeated: u32 name_len  name  u8 dtype_tag  u32 rank  u64 dims[rank]  payload

The manifest carries the architecture description, the epoch counter, an
echo of the training config and the record count. Records hold network
parameters, batch-norm running statistics and optimizer accumulators.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import NetworkGraph, build
from .errors import FormatError, IncompatibilityError
from .optim import Adadelta

MAGIC = b"NODL"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    architecture: dict
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    config: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_graph(cls, graph: NetworkGraph, optimizer: Adadelta | None = None, epoch: int = 0,
                   config: dict | None = None) -> "Checkpoint":
        """Snapshot (copy) of every parameter, buffer and optimizer accumulator."""
        tensors = {n: t.data.copy() for n, t in graph.named_parameters().items()}
        tensors.update({f"buffer/{n}": a.copy() for n, a in graph.named_buffers().items()})
        if optimizer is not None:
            tensors.update({n: a.copy() for n, a in optimizer.state_arrays().items()})
        return cls(graph.manifest(), tensors, int(epoch), dict(config or {}))

    def parameters(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if not n.startswith(("buffer/", "optimizer/"))}

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if n.startswith("optimizer/")}

    def build_graph(self) -> NetworkGraph:
        """Rebuild the architecture from the manifest and load the stored tensors into it."""
        a = self.architecture
        try:
            graph = build(a["arch_kind"], a["width_scale"], a["seed"], np.dtype(a["dtype"]),
                          tuple(a["small_shape"]), tuple(a["large_shape"]))
        except KeyError as exc:
            raise FormatError(f"architecture manifest lacks {exc.args[0]!r}") from None
        self.load_into(graph)
        return graph

    def load_into(self, graph: NetworkGraph, optimizer: Adadelta | None = None) -> None:
        """Copy tensors into ``graph`` (and ``optimizer``); any mismatch names the tensor."""
        if graph.arch_kind != self.architecture.get("arch_kind"):
            raise IncompatibilityError(
                f"checkpoint holds a {self.architecture.get('arch_kind')!r} network, target is {graph.arch_kind!r}"
            )
        targets = {n: t.data for n, t in graph.named_parameters().items()}
        targets.update({f"buffer/{n}": a for n, a in graph.named_buffers().items()})
        for name, dst in targets.items():
            src = self.tensors.get(name)
            if src is None:
                raise IncompatibilityError(f"tensor {name!r} missing from checkpoint")
            if src.shape != dst.shape:
                raise IncompatibilityError(f"tensor {name!r}: checkpoint shape {src.shape}, network shape {dst.shape}")
        extra = sorted(set(self.parameters()) - set(targets))
        if extra:
            raise IncompatibilityError(f"tensor {extra[0]!r} in checkpoint has no place in the network")
        for name, dst in targets.items():
            dst[...] = self.tensors[name]
        if optimizer is not None:
            for name, dst in optimizer.state_arrays().items():
                src = self.tensors.get(name)
                if src is not None and src.shape != dst.shape:
                    raise IncompatibilityError(f"tensor {name!r}: checkpoint shape {src.shape}, optimizer shape {dst.shape}")
            optimizer.load_state_arrays(self.optimizer_state())


def _manifest_bytes(ckpt: Checkpoint) -> bytes:
    doc = {
        "architecture": ckpt.architecture,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "record_count": len(ckpt.tensors),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def serialize(ckpt: Checkpoint) -> bytes:
    manifest = _manifest_bytes(ckpt)
    out = [MAGIC, struct.pack("<IQ", ckpt.version, len(manifest)), manifest]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in TAG_OF:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode()
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BI", TAG_OF[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, mlen = r.unpack("<IQ", "header")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        doc = json.loads(r.take(mlen, "manifest").decode())
        count = int(doc["record_count"])
        arch = doc["architecture"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint manifest is invalid ({exc})") from None
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"record {i} name length")
        try:
            name = r.take(nlen, f"record {i} name").decode()
        except UnicodeDecodeError:
            raise FormatError(f"record {i} name is not utf-8") from None
        tag, rank = r.unpack("<BI", f"{name} header")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q", f"{name} dims")
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = r.take(nbytes, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last record")
    return Checkpoint(arch, tensors, int(doc.get("epoch", 0)), dict(doc.get("config", {})), version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint {path} does not exist") from None
    return deserialize(buf)

"""Binary checkpoint formats.

Network (magic ``SSNN``), little-endian::

    magic[4] | version u16 | layer_count u32 | in_ndim u8 | in_dims u32*in_ndim
    per layer: kind u8 | n_hyper u8 | hyper u32*n_hyper
               | n_params u8 | per param: ndim u8 | dims u32*ndim | f64 payload

Bundles (``SSAV`` attack VAE, ``SSDT`` detector) are section containers::

    magic[4] | version u16 | section_count u32
    per section: name_len u16 | name utf-8 | type u8 | length u64 | payload

Section types: 1 = embedded network, 2 = f64 array, 3 = JSON document.
All float payloads are stored as raw f64 so round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import BadMagicError, FrameError, TruncatedFrameError, VersionMismatchError
from .nn_core import LAYER_KINDS, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential

NETWORK_MAGIC = b"SSNN"
FORMAT_VERSION = 1

KIND_TAGS = {"dense": 1, "conv2d": 2, "relu": 3, "maxpool2d": 4, "flatten": 5}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

SECTION_NETWORK, SECTION_ARRAY, SECTION_JSON = 1, 2, 3


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFrameError(f"truncated frame: need {n} bytes at offset {self.pos}")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def header(self, magic: bytes):
        got = self.take(4)
        if got != magic:
            raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
        (version,) = self.unpack("H")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported version {version}, expected {FORMAT_VERSION}")


def _write_array(out: io.BytesIO, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.tobytes())


def _read_array(r: _Reader) -> np.ndarray:
    (ndim,) = r.unpack("B")
    shape = r.unpack(f"{ndim}I") if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def network_to_bytes(net: Sequential) -> bytes:
    out = io.BytesIO()
    out.write(NETWORK_MAGIC)
    out.write(struct.pack("<HI", FORMAT_VERSION, len(net.layers)))
    out.write(struct.pack("<B", len(net.input_shape)))
    out.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    for layer in net.layers:
        hp = layer.hyperparams()
        out.write(struct.pack("<BB", KIND_TAGS[layer.kind], len(hp)))
        out.write(struct.pack(f"<{len(hp)}I", *hp))
        params = layer.params()
        out.write(struct.pack("<B", len(params)))
        for p in params.values():
            _write_array(out, p)
    return out.getvalue()


def _build_layer(kind: str, hp: tuple[int, ...]):
    if kind == "dense":
        return Dense(hp[0], hp[1], bias=bool(hp[2]))
    if kind == "conv2d":
        return Conv2D(hp[0], hp[1], hp[2], stride=hp[3], padding=hp[4], bias=bool(hp[5]))
    if kind == "maxpool2d":
        return MaxPool2D(hp[0], hp[1])
    return {"relu": ReLU, "flatten": Flatten}[kind]()


def _read_network(r: _Reader) -> Sequential:
    r.header(NETWORK_MAGIC)
    (n_layers,) = r.unpack("I")
    (ndim,) = r.unpack("B")
    input_shape = r.unpack(f"{ndim}I")
    layers = []
    for _ in range(n_layers):
        tag, n_hp = r.unpack("BB")
        if tag not in TAG_KINDS:
            raise FrameError(f"unknown layer kind tag {tag}")
        layer = _build_layer(TAG_KINDS[tag], r.unpack(f"{n_hp}I"))
        (n_params,) = r.unpack("B")
        targets = list(layer.params().values())
        if n_params != len(targets):
            raise FrameError(f"{layer.kind}: expected {len(targets)} parameter blocks, got {n_params}")
        for target in targets:
            arr = _read_array(r)
            if arr.shape != target.shape:
                raise FrameError(f"{layer.kind}: parameter shape {arr.shape} != {target.shape}")
            target[...] = arr
        layers.append(layer)
    return Sequential(layers, input_shape)


def network_from_bytes(data: bytes) -> Sequential:
    r = _Reader(data)
    net = _read_network(r)
    if r.pos != len(data):
        raise FrameError(f"{len(data) - r.pos} trailing bytes after network checkpoint")
    return net


def bundle_to_bytes(magic: bytes, sections: dict) -> bytes:
    """Serialize ``{name: Sequential | ndarray | json-able}`` in insertion order."""
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<HI", FORMAT_VERSION, len(sections)))
    for name, value in sections.items():
        if isinstance(value, Sequential):
            kind, payload = SECTION_NETWORK, network_to_bytes(value)
        elif isinstance(value, np.ndarray):
            buf = io.BytesIO()
            _write_array(buf, value)
            kind, payload = SECTION_ARRAY, buf.getvalue()
        else:
            kind, payload = SECTION_JSON, json.dumps(value, sort_keys=True).encode()
        encoded = name.encode()
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<BQ", kind, len(payload)))
        out.write(payload)
    return out.getvalue()


def bundle_from_bytes(magic: bytes, data: bytes) -> dict:
    r = _Reader(data)
    r.header(magic)
    (count,) = r.unpack("I")
    sections = {}
    for _ in range(count):
        (name_len,) = r.unpack("H")
        name = r.take(name_len).decode()
        kind, length = r.unpack("BQ")
        payload = r.take(length)
        if kind == SECTION_NETWORK:
            sections[name] = network_from_bytes(payload)
        elif kind == SECTION_ARRAY:
            sections[name] = _read_array(_Reader(payload))
        elif kind == SECTION_JSON:
            sections[name] = json.loads(payload.decode())
        else:
            raise FrameError(f"unknown section type {kind} for {name!r}")
    return sections


def save_network(net: Sequential, path) -> None:
    with open(path, "wb") as fh:
        fh.write(network_to_bytes(net))


def load_network(path) -> Sequential:
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())


assert set(KIND_TAGS) == set(LAYER_KINDS)

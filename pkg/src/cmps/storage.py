"""Binary model files.

Layout (all integers little-endian unsigned):

========================  =====================================================
magic                     ``b"CMPS1\\x00"``
version                   u16 (currently 1)
N                         u32, number of sites
site block, N times       chi_left u32, chi_right u32, d u32,
                          feature descriptor (family u8, D u32, rescale u8,
                          domain kind u8, a f64, b f64, cardinality u32,
                          n_edges u32, edges f64 * n_edges),
                          compression flag u8 (0 none, 1 per-site, 2 shared)
                          [+ payload: D u32, d u32, matrix c16 * (D*d)]
core tensors, N times     complex128 as interleaved (re, im) f64 pairs, in
                          (left, site, right) row-major order
crc32                     u32 over everything above
========================  =====================================================

Round trips are bit-exact: floats are copied as raw bytes, and loading a
file then saving it again reproduces the file byte for byte.  Custom
(callable-backed) feature families cannot be written; loading rebuilds the
analytic families from their parameters.  Canonical-center and field
annotations are runtime state, not model content, and are not stored.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .compression import CompressionLayer
from .errors import DataError, SchemaError
from .features import DomainTag, FeatureMap
from .model import ContinuousMPS

__all__ = ["MAGIC", "VERSION", "model_bytes", "save_model", "load_model"]

MAGIC = b"CMPS1\x00"
VERSION = 1

_FAMILIES = ("fourier", "legendre", "laguerre", "hermite", "indicator")
_KINDS = ("compact", "periodic", "half_line", "real_line", "categorical")


def _complex_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr).astype("<c16", copy=False).tobytes()


def _pack_feature(fm: FeatureMap) -> bytes:
    if fm.family not in _FAMILIES:
        raise SchemaError(
            f"feature family {fm.family!r} has no serialized form")
    if fm.x_matrix is not None:
        raise SchemaError(
            "feature maps carrying a numeric isometrization matrix cannot be "
            "serialized; rebuild the model on an analytic family")
    dom = fm.domain
    parts = [
        struct.pack("<BIB", _FAMILIES.index(fm.family), fm.dim, int(fm.rescale)),
        struct.pack("<BddI", _KINDS.index(dom.kind), dom.a, dom.b, dom.cardinality),
    ]
    edges = fm.edges if fm.edges is not None else np.empty(0)
    parts.append(struct.pack("<I", edges.size))
    parts.append(np.ascontiguousarray(edges).astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def model_bytes(m: ContinuousMPS) -> bytes:
    """Serialize a model to the binary format (without touching disk)."""
    parts = [MAGIC, struct.pack("<HI", VERSION, m.n_sites)]
    for i in range(m.n_sites):
        left, d, right = m.cores[i].shape
        parts.append(struct.pack("<III", left, right, d))
        parts.append(_pack_feature(m.feature_maps[i]))
        if m.layer is None:
            parts.append(struct.pack("<B", 0))
        else:
            u = np.asarray(m.layer.matrix(i), dtype=np.complex128)
            flag = 2 if m.layer.shared else 1
            parts.append(struct.pack("<BII", flag, u.shape[0], u.shape[1]))
            parts.append(_complex_bytes(u))
    for core in m.cores:
        parts.append(_complex_bytes(core))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_model(m: ContinuousMPS, path) -> None:
    """Write the model file; see the module docstring for the layout."""
    Path(path).write_bytes(model_bytes(m))


class _Reader:
    """Bounds-checked cursor over the file blob."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise SchemaError("model file truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def complex_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        flat = np.frombuffer(self.take(16 * n), dtype="<c16")
        return flat.astype(np.complex128).reshape(shape)


def _read_feature(r: _Reader) -> FeatureMap:
    fam_i, dim, rescale = r.unpack("<BIB")
    kind_i, a, b, card = r.unpack("<BddI")
    if fam_i >= len(_FAMILIES) or kind_i >= len(_KINDS):
        raise SchemaError("unknown feature family or domain kind code")
    (n_edges,) = r.unpack("<I")
    edges = None
    if n_edges:
        edges = np.frombuffer(r.take(8 * n_edges), dtype="<f8").astype(np.float64)
    dom = DomainTag(_KINDS[kind_i], a, b, int(card))
    return FeatureMap(_FAMILIES[fam_i], int(dim), dom, rescale=bool(rescale),
                      edges=edges)


def load_model(path) -> ContinuousMPS:
    """Read a model file back; raises on any structural or checksum defect."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 10 or blob[:len(MAGIC)] != MAGIC:
        raise SchemaError(f"{path}: not a model file (bad magic)")
    body, tail = blob[:-4], blob[-4:]
    want = struct.unpack("<I", tail)[0]
    got = zlib.crc32(body) & 0xFFFFFFFF
    if want != got:
        raise DataError(
            f"{path}: corrupt model file (CRC {got:08x}, expected {want:08x})")

    r = _Reader(body)
    r.take(len(MAGIC))
    version, n = r.unpack("<HI")
    if version != VERSION:
        raise SchemaError(f"{path}: unsupported model format version {version}")
    if n == 0:
        raise SchemaError(f"{path}: empty model")

    shapes, maps, flags, mats = [], [], [], []
    for _ in range(n):
        left, right, d = r.unpack("<III")
        maps.append(_read_feature(r))
        shapes.append((left, d, right))
        (flag,) = r.unpack("<B")
        flags.append(flag)
        if flag not in (0, 1, 2):
            raise SchemaError("bad compression flag")
        if flag:
            big, small = r.unpack("<II")
            if small != d or big != maps[-1].dim:
                raise SchemaError("compression matrix shape disagrees with site")
            mats.append(r.complex_array((big, small)))
        else:
            if maps[-1].dim != d:
                raise SchemaError("core site dimension disagrees with feature map")
            mats.append(None)

    cores = [r.complex_array(shape) for shape in shapes]
    if r.pos != len(body):
        raise SchemaError(f"{path}: trailing bytes after core tensors")

    layer = None
    if any(f != 0 for f in flags):
        if 0 in flags or len(set(flags)) != 1:
            raise SchemaError("compression flags must agree across sites")
        if flags[0] == 2:
            layer = CompressionLayer(mats[0], shared=True)
        else:
            layer = CompressionLayer(mats)
    try:
        return ContinuousMPS(cores, maps, layer=layer)
    except ValueError as exc:
        raise SchemaError(f"{path}: inconsistent model contents ({exc})") from exc

"""Volume containers, 26-connectivity and single-file NIfTI-1 I/O.

Voxel arrays are stored with shape ``(nx, ny, nz)``.  Whenever a flat view is
needed the x-fastest linearisation ``index = x + nx * (y + ny * z)`` is used,
which is numpy's Fortran order and also the on-disk NIfTI order.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    IndexOutOfBounds,
    TooFewSubjects,
    TruncatedStream,
    UnsupportedDatatype,
    UnsupportedDim,
)

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (byte order applied later)
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
}

# header fields that carry orientation, copied verbatim on round trip
_ORIENTATION_SLICE = slice(252, 344)


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar field with voxel sizes in millimetres."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"Volume3D needs a non-empty 3D array, got shape {data.shape}")
        vox = tuple(float(v) for v in self.voxel_size_mm)
        if len(vox) != 3 or not all(v > 0 for v in vox):
            raise DataError(f"voxel sizes must be three positive numbers, got {vox}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", vox)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, flat, dims, voxel_size_mm=(1.0, 1.0, 1.0)):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != int(np.prod(dims)):
            raise DataError(f"data length {flat.size} does not match dims {tuple(dims)}")
        return cls(flat.reshape(tuple(dims), order="F"), voxel_size_mm)


@dataclass(frozen=True)
class Mask3D:
    included: np.ndarray
    in_mask_count: int = field(init=False)

    def __post_init__(self):
        inc = np.asarray(self.included, dtype=bool)
        if inc.ndim != 3:
            raise DataError(f"Mask3D needs a 3D array, got shape {inc.shape}")
        inc.setflags(write=False)
        object.__setattr__(self, "included", inc)
        object.__setattr__(self, "in_mask_count", int(inc.sum()))

    @property
    def dims(self):
        return self.included.shape

    @classmethod
    def full(cls, dims):
        return cls(np.ones(tuple(dims), dtype=bool))


@dataclass(frozen=True)
class SubjectStack:
    """``M`` subject volumes sharing one grid, stored as ``(M, nx, ny, nz)``."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise DataError(f"SubjectStack needs shape (M, nx, ny, nz), got {data.shape}")
        if data.shape[0] < 2:
            raise TooFewSubjects(f"need at least 2 subjects, got {data.shape[0]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))

    @property
    def subjects(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]


# ---------------------------------------------------------------------------
# indexing and connectivity

def linear_index(x, y, z, dims):
    nx, ny, nz = dims
    return x + nx * (y + ny * z)


def coords(index, dims):
    nx, ny, _ = dims
    return index % nx, (index // nx) % ny, index // (nx * ny)


OFFSETS26 = np.array(
    [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)], dtype=np.int64
)


def neighbors26(index: int, dims, mask=None) -> list[int]:
    """In-bounds, in-mask 26-neighbours of a linear voxel index."""
    dims = tuple(int(d) for d in dims)
    n = dims[0] * dims[1] * dims[2]
    if not 0 <= index < n:
        raise IndexOutOfBounds(f"voxel index {index} outside grid of {n} voxels")
    inc = None
    if mask is not None:
        inc = mask.included if isinstance(mask, Mask3D) else np.asarray(mask, dtype=bool)
        inc = inc.ravel(order="F")
    x, y, z = coords(index, dims)
    out = []
    for dx, dy, dz in OFFSETS26:
        u, v, w = x + dx, y + dy, z + dz
        if 0 <= u < dims[0] and 0 <= v < dims[1] and 0 <= w < dims[2]:
            j = linear_index(u, v, w, dims)
            if inc is None or inc[j]:
                out.append(int(j))
    return out


# ---------------------------------------------------------------------------
# NIfTI-1

@dataclass
class NiftiHeader:
    """Parsed subset of a NIfTI-1 header plus the raw bytes it came from."""

    raw: bytes
    dim: tuple[int, ...]
    pixdim: tuple[float, ...]
    datatype: int
    vox_offset: int
    scl_slope: float
    scl_inter: float
    byteorder: str
    description: str = ""


def _maybe_gunzip(buf: bytes) -> bytes:
    if buf[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(buf)
        except (EOFError, OSError) as exc:
            raise TruncatedStream(f"corrupt gzip stream: {exc}") from exc
    return buf


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedStream(f"stream holds {len(buf)} bytes, header needs {HEADER_SIZE}")
    for bo in ("<", ">"):
        if struct.unpack(bo + "i", buf[:4])[0] == HEADER_SIZE:
            break
    else:
        raise BadMagic("sizeof_hdr is not 348 in either byte order")
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise BadMagic(f"expected single-file magic 'n+1\\0', got {magic!r}")
    dim = struct.unpack(bo + "8h", buf[40:56])
    datatype = struct.unpack(bo + "h", buf[70:72])[0]
    pixdim = struct.unpack(bo + "8f", buf[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(bo + "3f", buf[108:120])
    descrip = buf[148:228].split(b"\x00", 1)[0].decode("latin-1")
    if dim[0] not in (3, 4):
        raise UnsupportedDim(f"dim[0] = {dim[0]}; only 3D and 4D images are supported")
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not supported")
    return NiftiHeader(
        raw=bytes(buf[:HEADER_SIZE]),
        dim=dim,
        pixdim=pixdim,
        datatype=datatype,
        vox_offset=int(vox_offset),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        byteorder=bo,
    )


def _read_array(buf: bytes):
    buf = _maybe_gunzip(bytes(buf))
    hdr = parse_header(buf)
    nx, ny, nz = (max(int(d), 1) for d in hdr.dim[1:4])
    nt = max(int(hdr.dim[4]), 1) if hdr.dim[0] == 4 else 1
    if min(hdr.dim[1:4]) < 1:
        raise UnsupportedDim(f"non-positive spatial dims {hdr.dim[1:4]}")
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.byteorder)
    count = nx * ny * nz * nt
    start = hdr.vox_offset
    end = start + count * dtype.itemsize
    if len(buf) < end:
        raise TruncatedStream(f"payload needs {end} bytes, stream holds {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).astype(np.float64)
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        arr = arr * hdr.scl_slope + hdr.scl_inter
    arr = arr.reshape((nx, ny, nz, nt), order="F")
    vox = tuple(abs(float(p)) or 1.0 for p in hdr.pixdim[1:4])
    return arr, vox, hdr


def read_nifti(stream) -> tuple[Volume3D, NiftiHeader]:
    """Decode a single-file NIfTI-1 image (optionally gzipped) into a volume.

    ``stream`` may be ``bytes`` or a binary file object.  4D files are accepted
    only when they hold one volume; use :func:`read_nifti_stack` otherwise.
    """
    arr, vox, hdr = _read_array(_as_bytes(stream))
    if arr.shape[3] != 1:
        raise UnsupportedDim(f"image holds {arr.shape[3]} volumes; use read_nifti_stack")
    return Volume3D(arr[..., 0], vox), hdr


def read_nifti_stack(stream) -> tuple[SubjectStack, NiftiHeader]:
    """Decode a 4D NIfTI-1 image as a subject stack (4th axis = subject)."""
    arr, vox, hdr = _read_array(_as_bytes(stream))
    return SubjectStack(np.moveaxis(arr, 3, 0), vox), hdr


def _as_bytes(stream) -> bytes:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return bytes(stream)
    return stream.read()


def _build_header(shape, voxel_size, template: NiftiHeader | None, description: str) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    if template is not None:
        raw = template.raw
        if template.byteorder == ">":
            # orientation block is floats/int16s; re-encode rather than copy
            qs = struct.unpack(">2h6f12f", raw[252:328])
            hdr[252:328] = struct.pack("<2h6f12f", *qs)
        else:
            hdr[252:328] = raw[252:328]
        hdr[328:344] = raw[328:344]
    ndim = len(shape)
    dim = [ndim, *shape] + [1] * (7 - ndim)
    pixdim = [1.0, *voxel_size] + [1.0] * (7 - len(voxel_size))
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, 16, 32)  # float32, bitpix
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 10  # mm + seconds
    hdr[148:228] = description.encode("latin-1")[:79].ljust(80, b"\x00")
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(vol, mask=None, template: NiftiHeader | None = None, description: str = "") -> bytes:
    """Encode a volume as little-endian float32 single-file NIfTI-1.

    Voxels outside ``mask`` are written as 0.  Orientation fields are copied
    from ``template`` when given and are otherwise left zero.
    """
    if not isinstance(vol, Volume3D):
        vol = Volume3D(vol)
    data = np.array(vol.data, dtype=np.float64)
    if mask is not None:
        inc = mask.included if isinstance(mask, Mask3D) else np.asarray(mask, dtype=bool)
        if inc.shape != data.shape:
            raise DataError(f"mask shape {inc.shape} does not match volume {data.shape}")
        data[~inc] = 0.0
    head = _build_header(data.shape, vol.voxel_size_mm, template, description)
    payload = data.astype("<f4").tobytes(order="F")
    return head + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti_stack(stack, template: NiftiHeader | None = None, description: str = "") -> bytes:
    if not isinstance(stack, SubjectStack):
        stack = SubjectStack(stack)
    arr = np.moveaxis(stack.data, 0, 3)
    head = _build_header(arr.shape, stack.voxel_size_mm, template, description)
    payload = arr.astype("<f4").tobytes(order="F")
    return head + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def load(path):
    with open(path, "rb") as fh:
        return read_nifti(fh)


def load_stack(path):
    with open(path, "rb") as fh:
        return read_nifti_stack(fh)


def save(path, vol, mask=None, template=None, description=""):
    blob = write_nifti(vol, mask, template, description)
    if str(path).endswith(".gz"):
        blob = gzip.compress(blob)
    with open(path, "wb") as fh:
        fh.write(blob)


def save_stack(path, stack, template=None, description=""):
    blob = write_nifti_stack(stack, template, description)
    if str(path).endswith(".gz"):
        blob = gzip.compress(blob)
    with open(path, "wb") as fh:
        fh.write(blob)

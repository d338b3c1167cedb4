"""Minimal NIfTI-1 volumes (float32, little-endian, single file) and protocol sidecars.

Only the subset this package writes is accepted on read; anything else is
rejected with :class:`VolumeFormatError`, which records the byte offset of
the offending field.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .model import AcquisitionProtocol

HEADER_SIZE = 348
VOX_OFFSET = 352          # header plus the 4-byte extension flag
DT_FLOAT32 = 16
MAGIC = b"n+1\0"
XYZT_MM_SEC = 2 | 8

_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL = 112
_OFF_MAGIC = 344


class VolumeFormatError(OSError):
    """Malformed or unsupported volume or sidecar file."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: {message} (at byte offset {offset})")
        self.path = str(path)
        self.offset = offset


def storage_roundtrip(a) -> np.ndarray:
    """The values a volume holds after a write/read cycle (float32 payload)."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _header(shape, pixdim, description=b""):
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, _OFF_DIM, *dim)
    struct.pack_into("<h", hdr, _OFF_DATATYPE, DT_FLOAT32)
    struct.pack_into("<h", hdr, _OFF_BITPIX, 32)
    pd = [1.0] + list(pixdim) + [1.0] * (7 - len(pixdim))
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, *pd)
    struct.pack_into("<f", hdr, _OFF_VOX_OFFSET, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, _OFF_SCL, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, XYZT_MM_SEC)
    struct.pack_into("80s", hdr, 148, description[:79])
    # scanner-aligned affine from the voxel sizes (sform code 1)
    struct.pack_into("<h", hdr, 254, 1)
    for row in range(3):
        srow = [0.0] * 4
        srow[row] = float(pd[row + 1])
        struct.pack_into("<4f", hdr, 280 + 16 * row, *srow)
    struct.pack_into("4s", hdr, _OFF_MAGIC, MAGIC)
    return bytes(hdr)


def write_volume(path, data, voxel_size=(1.0, 1.0, 1.0), description="") -> Path:
    """Write a 3-D volume or a ``(n_frames, Ni, Nj, Nk)`` series.

    Series are stored with the frame axis last, as NIfTI expects.
    """
    path = Path(path)
    a = np.asarray(data)
    if a.ndim == 4:
        a = np.moveaxis(a, 0, -1)
    elif a.ndim != 3:
        raise ValueError(f"expected a 3-D volume or 4-D series, got shape {a.shape}")
    if not np.all(np.isfinite(a[~np.isnan(a)])):
        raise ValueError("volumes may not contain infinities")
    pixdim = list(voxel_size) + ([1.0] if a.ndim == 4 else [])
    payload = np.asarray(a, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(_header(a.shape, pixdim, description.encode("ascii", "replace")))
        fh.write(b"\0\0\0\0")
        fh.write(payload)
    return path


def read_volume(path, return_voxel_size=False):
    """Read a volume written by :func:`write_volume` as float64.

    4-D files come back as ``(n_frames, Ni, Nj, Nk)``.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(path, 0, f"cannot read file: {exc.strerror}") from exc
    if len(raw) < VOX_OFFSET:
        raise VolumeFormatError(path, len(raw), f"file too short for a header ({len(raw)} bytes)")
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise VolumeFormatError(path, 0, "big-endian files are not supported")
        raise VolumeFormatError(path, 0, f"sizeof_hdr is {size}, expected {HEADER_SIZE}")
    if raw[_OFF_MAGIC:_OFF_MAGIC + 4] != MAGIC:
        raise VolumeFormatError(path, _OFF_MAGIC, "magic is not 'n+1' (single-file NIfTI-1)")
    dim = struct.unpack_from("<8h", raw, _OFF_DIM)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise VolumeFormatError(path, _OFF_DIM, f"dim[0] = {ndim}, expected 3 or 4")
    shape = dim[1:1 + ndim]
    if min(shape) < 1:
        raise VolumeFormatError(path, _OFF_DIM + 2, f"non-positive dimensions {shape}")
    (dtype,) = struct.unpack_from("<h", raw, _OFF_DATATYPE)
    if dtype != DT_FLOAT32:
        raise VolumeFormatError(path, _OFF_DATATYPE, f"datatype code {dtype}, only float32 (16) is supported")
    (bitpix,) = struct.unpack_from("<h", raw, _OFF_BITPIX)
    if bitpix != 32:
        raise VolumeFormatError(path, _OFF_BITPIX, f"bitpix {bitpix} inconsistent with float32")
    (vox,) = struct.unpack_from("<f", raw, _OFF_VOX_OFFSET)
    if not (math.isfinite(vox) and vox >= VOX_OFFSET and vox == int(vox)):
        raise VolumeFormatError(path, _OFF_VOX_OFFSET, f"invalid vox_offset {vox}")
    slope, inter = struct.unpack_from("<2f", raw, _OFF_SCL)
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise VolumeFormatError(path, _OFF_SCL, "intensity scaling is not supported")
    vox = int(vox)
    n = int(np.prod(shape))
    if len(raw) - vox != 4 * n:
        raise VolumeFormatError(path, vox, f"payload holds {len(raw) - vox} bytes, "
                                f"header dims {shape} need {4 * n}")
    a = np.frombuffer(raw, dtype="<f4", count=n, offset=vox).reshape(shape, order="F")
    a = a.astype(np.float64)
    if ndim == 4:
        a = np.ascontiguousarray(np.moveaxis(a, -1, 0))
    if return_voxel_size:
        pixdim = struct.unpack_from("<8f", raw, _OFF_PIXDIM)
        return a, tuple(float(p) for p in pixdim[1:4])
    return a


# ---------------------------------------------------------------------------
# protocol sidecar

SIDECAR_SCHEMA = {
    "type": "object",
    "required": ["t_ms", "tau_ms", "alpha", "lambda", "t1b_ms", "m0_file"],
    "additionalProperties": False,
    "properties": {
        "t_ms": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "tau_ms": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "alpha": {"type": "number"},
        "lambda": {"type": "number"},
        "t1_ms": {"type": "number"},
        "t1_file": {"type": "string"},
        "t1b_ms": {"type": "number"},
        "m0_file": {"type": "string"},
        "units": {"type": "object"},
        "description": {"type": "string"},
    },
}

SIDECAR_UNITS = {"t": "ms", "tau": "ms", "t1": "ms", "t1b": "ms", "lambda": "ml/g",
                 "pwi": "signal units"}


def sidecar_path(volume_path) -> Path:
    p = Path(volume_path)
    name = p.name[:-4] if p.name.endswith(".nii") else p.name
    return p.with_name(name + ".json")


def protocol_to_sidecar(proto: AcquisitionProtocol, m0_file="m0.nii", t1_file=None) -> dict:
    """JSON-ready protocol description; times in milliseconds."""
    side = {
        "t_ms": [float(x) * 1000.0 for x in proto.t],
        "tau_ms": [float(x) * 1000.0 for x in proto.tau],
        "alpha": float(proto.alpha),
        "lambda": float(proto.lam),
        "t1b_ms": float(proto.t1b) * 1000.0,
        "m0_file": m0_file,
        "units": dict(SIDECAR_UNITS),
    }
    if np.ndim(proto.t1) == 0:
        side["t1_ms"] = float(proto.t1) * 1000.0
    elif t1_file is None:
        raise ValueError("a T1 volume needs a t1_file entry")
    if t1_file is not None:
        side["t1_file"] = t1_file
    return side


def protocol_from_sidecar(side: dict, m0, t1_volume=None) -> AcquisitionProtocol:
    t1 = t1_volume if t1_volume is not None else side["t1_ms"] / 1000.0
    return AcquisitionProtocol(np.asarray(side["t_ms"]) / 1000.0,
                               np.asarray(side["tau_ms"]) / 1000.0, m0,
                               alpha=side["alpha"], lam=side["lambda"], t1=t1,
                               t1b=side["t1b_ms"] / 1000.0)


def write_sidecar(path, side: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(side, indent=2) + "\n")
    return path


def read_sidecar(path) -> dict:
    import jsonschema

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise VolumeFormatError(path, 0, f"cannot read sidecar: {exc.strerror}") from exc
    try:
        side = json.loads(text)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(path, exc.pos, f"invalid JSON: {exc.msg}") from exc
    try:
        jsonschema.validate(side, SIDECAR_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise VolumeFormatError(path, _char_offset(text, exc.absolute_path),
                                f"sidecar field {where}: {exc.message}") from exc
    if len(side["t_ms"]) != len(side["tau_ms"]):
        raise VolumeFormatError(path, _char_offset(text, ["tau_ms"]),
                                "t_ms and tau_ms differ in length")
    if "t1_ms" not in side and "t1_file" not in side:
        raise VolumeFormatError(path, 0, "sidecar needs t1_ms or t1_file")
    return side


def _char_offset(text, json_path):
    """Best-effort character offset of the first key of ``json_path`` in ``text``."""
    for key in json_path:
        if isinstance(key, str):
            pos = text.find(json.dumps(key))
            return max(pos, 0)
    return 0


def load_series(path):
    """Read a PWI series with its sidecar and referenced volumes.

    Returns ``(d, proto, voxel_size)``; relative file names in the sidecar
    are resolved against the series' directory.
    """
    path = Path(path)
    spath = sidecar_path(path)
    if not spath.exists():
        raise VolumeFormatError(spath, 0, "sidecar file is missing")
    side = read_sidecar(spath)
    d, vs = read_volume(path, return_voxel_size=True)
    if d.ndim != 4:
        raise VolumeFormatError(path, _OFF_DIM, "a PWI series must be 4-D")
    if d.shape[0] != len(side["t_ms"]):
        raise VolumeFormatError(path, _OFF_DIM + 8, f"series has {d.shape[0]} frames, sidecar lists "
                                f"{len(side['t_ms'])}")
    m0 = read_volume(path.parent / side["m0_file"])
    if m0.shape != d.shape[1:]:
        raise VolumeFormatError(path.parent / side["m0_file"], _OFF_DIM,
                                f"m0 grid {m0.shape} differs from series grid {d.shape[1:]}")
    t1 = None
    if "t1_file" in side:
        t1 = read_volume(path.parent / side["t1_file"])
    try:
        proto = protocol_from_sidecar(side, m0, t1)
    except ValueError as exc:
        raise VolumeFormatError(spath, 0, f"invalid protocol: {exc}") from exc
    return d, proto, vs

"""Volume and field file I/O, intensity normalization, and run reports.

Two on-disk formats:

* NIfTI-1, uncompressed single-file only, magic ``n+1\\0``, datatypes uint8,
  int16, float32. Only dims and pixdim are honored; orientation and scaling
  header fields are ignored.
* raw + sidecar: little-endian binary next to a ``<path>.meta`` text sidecar
  holding ``dims``, ``spacing``, ``dtype``.

Axis order: files store the first header axis fastest; in memory the fastest
axis is last, so a NIfTI (nx, ny, nz) appears here as dims (nz, ny, nx).
Integer data is converted to float32 and normalized to [0, 1] at read time;
float32 data round-trips bit-exactly. Vector fields are stored one scalar
file per component with ``.c0/.c1/.c2`` suffixes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InputError
from .grid import VectorField, Volume

__all__ = [
    "VolumeInfo",
    "read_volume",
    "read_volume_ex",
    "write_volume",
    "write_field",
    "read_field",
    "normalize_volume",
    "pad_to_multiple",
    "crop_to_dims",
    "write_trace_csv",
    "write_report",
    "sig12",
]

_NIFTI_HDR = struct.Struct("<i10s18sihcc8h3f4h8f3fh2c4f2i80s24s2h6f12f16s4s")
assert _NIFTI_HDR.size == 348
_NIFTI_MAGIC = b"n+1\x00"
_NIFTI_DTYPES = {2: "<u1", 4: "<i2", 16: "<f4"}
_DTYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}
_SIDE_DTYPES = {"uint8": "<u1", "int16": "<i2", "float32": "<f4"}


@dataclass(frozen=True)
class VolumeInfo:
    """Provenance of a loaded volume: format, on-disk dtype, the raw value
    range, and whether read-time normalization fired."""

    format: str
    dtype: str
    raw_min: float
    raw_max: float
    normalized: bool
    constant: bool = False

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "dtype": self.dtype,
            "raw_min": self.raw_min,
            "raw_max": self.raw_max,
            "normalized": self.normalized,
            "constant": self.constant,
        }


def normalize_volume(vol: Volume) -> tuple[Volume, float, float, bool]:
    """Rescale to [0, 1] by (v - min)/(max - min); a constant image maps to
    all zeros with the constant flag set. Returns (vol, min, max, constant)."""
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi > lo:
        return vol.with_data((vol.data - lo) / (hi - lo)), lo, hi, False
    return vol.with_data(np.zeros(vol.dims)), lo, hi, True


# ---------------------------------------------------------------------------
# NIfTI-1


def _read_nifti(path: Path) -> tuple[Volume, VolumeInfo]:
    blob = path.read_bytes()
    if len(blob) < 348:
        raise FileFormatError(f"{path}: header truncated at {len(blob)} bytes (need 348)")
    fields = _NIFTI_HDR.unpack_from(blob, 0)
    sizeof_hdr = fields[0]
    if sizeof_hdr != 348:
        raise FileFormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348 (little-endian)")
    magic = fields[-1]
    if magic != _NIFTI_MAGIC:
        raise FileFormatError(f"{path}: magic {magic!r} is not single-file 'n+1\\0'")
    dim = fields[7:15]
    datatype = fields[19]
    bitpix = fields[20]
    pixdim = fields[22:30]
    vox_offset = fields[30]
    if datatype not in _NIFTI_DTYPES:
        raise FileFormatError(f"{path}: unsupported datatype {datatype}")
    ndim = dim[0]
    if ndim not in (2, 3):
        raise FileFormatError(f"{path}: dim[0] is {ndim}, only 2-3 axis volumes supported")
    file_dims = tuple(int(n) for n in dim[1 : 1 + ndim])
    if any(n < 1 for n in file_dims):
        raise FileFormatError(f"{path}: dim holds non-positive extent {file_dims}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype])
    if bitpix != dtype.itemsize * 8:
        raise FileFormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    offset = int(vox_offset)
    if offset < 348:
        raise FileFormatError(f"{path}: vox_offset {offset} overlaps the header")
    count = int(np.prod(file_dims))
    need = count * dtype.itemsize
    if len(blob) < offset + need:
        raise FileFormatError(
            f"{path}: payload truncated, need {need} bytes at offset {offset}, have {len(blob) - offset}"
        )
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    # file stores the first axis fastest; flip to last-axis-fastest
    data = raw.reshape(tuple(reversed(file_dims)))
    spacing = tuple(float(p) if p > 0 else 1.0 for p in reversed(pixdim[1 : 1 + ndim]))
    dtype_name = {v: k for k, v in _DTYPE_CODES.items()}[datatype]
    return _finish_read(data, spacing, "nifti1", dtype_name)


def _finish_read(data: np.ndarray, spacing, fmt: str, dtype_name: str) -> tuple[Volume, VolumeInfo]:
    raw_min = float(data.min())
    raw_max = float(data.max())
    if dtype_name == "float32":
        vol = Volume(np.ascontiguousarray(data, dtype=np.float64), spacing)
        return vol, VolumeInfo(fmt, dtype_name, raw_min, raw_max, normalized=False)
    vol = Volume(data.astype(np.float32).astype(np.float64), spacing)
    vol, lo, hi, const = normalize_volume(vol)
    return vol, VolumeInfo(fmt, dtype_name, lo, hi, normalized=True, constant=const)


def _write_nifti(vol: Volume, path: Path) -> None:
    ndim = vol.ndim
    dim = [ndim] + [0] * 7
    pixdim = [1.0] + [0.0] * 7
    for a in range(ndim):
        dim[1 + a] = vol.dims[ndim - 1 - a]
        pixdim[1 + a] = vol.spacing[ndim - 1 - a]
    for a in range(ndim, 7):
        dim[1 + a] = 1
        pixdim[1 + a] = 1.0
    header = _NIFTI_HDR.pack(
        348,
        b"", b"",
        0, 0, b"r", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0, 16, 32, 0,
        *pixdim,
        352.0, 1.0, 0.0,
        0, b"\x00", b"\x00",
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"heatreg volume", b"",
        0, 0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        b"", _NIFTI_MAGIC,
    )
    payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    path.write_bytes(header + b"\x00\x00\x00\x00" + payload)


# ---------------------------------------------------------------------------
# raw + sidecar


def _sidecar_path(path: Path) -> Path:
    return Path(str(path) + ".meta")


def _read_raw(path: Path) -> tuple[Volume, VolumeInfo]:
    side = _sidecar_path(path)
    if not side.exists():
        raise FileFormatError(f"{path}: missing sidecar {side}")
    meta = {}
    for lineno, line in enumerate(side.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FileFormatError(f"{side}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    for key in ("dims", "dtype"):
        if key not in meta:
            raise FileFormatError(f"{side}: missing required key {key!r}")
    try:
        dims = tuple(int(t) for t in meta["dims"].split(","))
    except ValueError:
        raise FileFormatError(f"{side}: dims {meta['dims']!r} is not a comma list of integers")
    if any(n < 1 for n in dims) or len(dims) not in (1, 2, 3):
        raise FileFormatError(f"{side}: bad dims {dims}")
    if meta["dtype"] not in _SIDE_DTYPES:
        raise FileFormatError(f"{side}: unsupported dtype {meta['dtype']!r}")
    if "spacing" in meta:
        try:
            spacing = tuple(float(t) for t in meta["spacing"].split(","))
        except ValueError:
            raise FileFormatError(f"{side}: spacing {meta['spacing']!r} is not a comma list")
        if len(spacing) != len(dims):
            raise FileFormatError(f"{side}: spacing has {len(spacing)} entries for {len(dims)} dims")
    else:
        spacing = (1.0,) * len(dims)
    dtype = np.dtype(_SIDE_DTYPES[meta["dtype"]])
    blob = path.read_bytes()
    need = int(np.prod(dims)) * dtype.itemsize
    if len(blob) != need:
        raise FileFormatError(f"{path}: payload is {len(blob)} bytes, dims {dims} need {need}")
    data = np.frombuffer(blob, dtype=dtype).reshape(dims)
    return _finish_read(data, spacing, "raw", meta["dtype"])


def _write_raw(vol: Volume, path: Path) -> None:
    path.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    lines = [
        "format=raw",
        "dtype=float32",
        "dims=" + ",".join(str(n) for n in vol.dims),
        "spacing=" + ",".join(repr(s) for s in vol.spacing),
    ]
    _sidecar_path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# public API


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("nifti1", "raw"):
            raise InputError(f"unknown volume format {fmt!r}")
        return fmt
    return "nifti1" if path.suffix == ".nii" else "raw"


def read_volume(path) -> Volume:
    """Load a volume; integer data is normalized to [0, 1], float32 is raw."""
    return read_volume_ex(path)[0]


def read_volume_ex(path) -> tuple[Volume, VolumeInfo]:
    """Like `read_volume` but also reports format/dtype/normalization facts."""
    path = Path(path)
    if not path.exists():
        raise FileFormatError(f"{path}: no such file")
    if _detect_format(path, None) == "nifti1":
        return _read_nifti(path)
    return _read_raw(path)


def write_volume(vol: Volume, path, fmt: str | None = None) -> None:
    """Write float32, deterministically; format from `fmt` or the extension
    (``.nii`` selects NIfTI-1, anything else raw + sidecar)."""
    if not isinstance(vol, Volume):
        raise InputError(f"write_volume expects a Volume, got {type(vol).__name__}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _detect_format(path, fmt) == "nifti1":
        _write_nifti(vol, path)
    else:
        _write_raw(vol, path)


def _component_path(path: Path, c: int) -> Path:
    return path.with_name(path.stem + f".c{c}" + path.suffix) if path.suffix else Path(str(path) + f".c{c}")


def write_field(field: VectorField, path, fmt: str | None = None) -> list[Path]:
    """One scalar file per component, suffixes .c0/.c1/.c2 before the
    extension; returns the paths written."""
    path = Path(path)
    written = []
    for c in range(field.data.shape[0]):
        p = _component_path(path, c)
        write_volume(Volume(field.data[c], field.spacing), p, fmt)
        written.append(p)
    return written


def read_field(path) -> VectorField:
    path = Path(path)
    comps = []
    for c in range(3):
        p = _component_path(path, c)
        if not p.exists():
            break
        comps.append(read_volume(p))
    if not comps:
        raise FileFormatError(f"{path}: no components found (expected {_component_path(path, 0)})")
    data = np.stack([v.data for v in comps])
    return VectorField(data, comps[0].spacing)


def pad_to_multiple(vol: Volume, multiple: int) -> tuple[Volume, tuple[int, ...]]:
    """Edge-replicate at the high end of each axis until divisible; returns
    the padded volume and the pad widths (all zero when already divisible)."""
    pads = tuple((-n) % multiple for n in vol.dims)
    if not any(pads):
        return vol, pads
    padded = np.pad(vol.data, [(0, p) for p in pads], mode="edge")
    return Volume(padded, vol.spacing), pads


def crop_to_dims(obj, dims):
    """Undo `pad_to_multiple` on a Volume or VectorField."""
    sl = tuple(slice(0, n) for n in dims)
    if isinstance(obj, VectorField):
        return VectorField(obj.data[(slice(None),) + sl], obj.spacing)
    return Volume(obj.data[sl], obj.spacing)


# ---------------------------------------------------------------------------
# trace + report serialization


def sig12(x: float) -> float:
    """Round to the 12 significant decimal digits used in emitted traces."""
    if not math.isfinite(x):
        return x
    return float(f"{x:.12g}")


def write_trace_csv(trace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["outer_iter,C,C_U,t,gap"]
    for rec in trace:
        lines.append(
            f"{rec.outer_iter},{rec.C:.12g},{rec.C_U:.12g},{rec.t:.12g},{rec.gap:.12g}"
        )
    path.write_text("\n".join(lines) + "\n")


def _trace_rows(trace) -> list[dict]:
    return [
        {
            "outer_iter": rec.outer_iter,
            "C": sig12(rec.C),
            "C_U": sig12(rec.C_U),
            "t": sig12(rec.t),
            "gap": sig12(rec.gap),
        }
        for rec in trace
    ]


def write_report(result, path, config_echo: dict | None = None, normalization: dict | None = None,
                 files: dict | None = None) -> None:
    """JSON run report: config echo, normalization record, per-cycle trace
    (same values as trace.csv), final metrics, status."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": 1,
        "status": result.status,
        "diagnostic": result.diagnostic,
        "config": config_echo or {},
        "normalization": normalization or {},
        "trace": _trace_rows(result.trace),
        "final_metrics": result.final_metrics.to_dict(),
        "files": files or {},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

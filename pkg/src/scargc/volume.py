"""Volumetric images on a regular grid, MetaImage-style raw I/O and trilinear sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PADDING_VALUE = 0.0

_ELEMENT_TYPES = {"FLOAT32": np.dtype("<f4"), "UINT8": np.dtype("u1")}
_HEADER_KEYS = ("NDims", "DimSize", "ElementSpacing", "Offset", "ElementType", "ElementDataFile")


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent header/raw file pairs."""


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar image with physical spacing.

    ``data`` is indexed ``[i, j, k]`` along (x, y, z); on disk the samples are
    written x-fastest. World position of voxel (i, j, k) is
    ``origin + (i*sx, j*sy, k*sz)``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(np.array(self.data, dtype=self._dtype(), copy=True))
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin need three components")
        if not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        self._validate(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def _dtype(self):
        return np.float32

    def _validate(self, data):
        pass

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def world_to_voxel(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return np.asarray(self.origin) + ijk * np.asarray(self.spacing)

    def same_grid(self, other: "Volume3D") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin

    def with_data(self, data) -> "Volume3D":
        return type(self)(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class LabelVolume(Volume3D):
    """Integer label map sharing the grid conventions of :class:`Volume3D`."""

    label_set: tuple[int, ...] = field(default=(0, 1))

    def _dtype(self):
        return np.uint8

    def _validate(self, data):
        present = np.unique(data)
        extra = set(present.tolist()) - set(self.label_set)
        if extra:
            raise ValueError(f"labels {sorted(extra)} outside declared set {self.label_set}")

    def with_data(self, data) -> "LabelVolume":
        return LabelVolume(data, self.spacing, self.origin, self.label_set)

    def as_float(self) -> Volume3D:
        return Volume3D(self.data.astype(np.float32), self.spacing, self.origin)


def _fmt(values) -> str:
    return " ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


def save_volume(vol: Volume3D, path) -> None:
    """Write ``<path>`` (text header) and a sibling ``.raw`` file."""
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    etype = "UINT8" if isinstance(vol, LabelVolume) else "FLOAT32"
    header = {
        "NDims": "3",
        "DimSize": _fmt(vol.dims),
        "ElementSpacing": _fmt(vol.spacing),
        "Offset": _fmt(vol.origin),
        "ElementType": etype,
        "ElementDataFile": raw_path.name,
    }
    payload = np.asarray(vol.data, dtype=_ELEMENT_TYPES[etype]).tobytes(order="F")
    raw_path.write_bytes(payload)
    path.write_text("".join(f"{k} = {header[k]}\n" for k in _HEADER_KEYS), encoding="ascii")


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"line {lineno}: expected 'Key = Value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    missing = [k for k in _HEADER_KEYS if k not in out]
    if missing:
        raise VolumeFormatError(f"header missing keys: {missing}")
    return out


def load_volume(path) -> Volume3D:
    path = Path(path)
    try:
        hdr = _parse_header(path.read_text(encoding="ascii"))
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f"{path}: header is not ASCII") from exc
    try:
        ndims = int(hdr["NDims"])
        dims = tuple(int(x) for x in hdr["DimSize"].split())
        spacing = tuple(float(x) for x in hdr["ElementSpacing"].split())
        origin = tuple(float(x) for x in hdr["Offset"].split())
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: unparseable numeric field ({exc})") from exc
    if ndims != 3 or len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeFormatError(f"{path}: only 3-D volumes are supported")
    if any(d < 1 for d in dims):
        raise VolumeFormatError(f"{path}: DimSize must be positive, got {dims}")
    etype = hdr["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise VolumeFormatError(f"{path}: unknown ElementType {etype!r}")
    dtype = _ELEMENT_TYPES[etype]
    raw = (path.parent / hdr["ElementDataFile"]).read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: size mismatch, DimSize {dims} needs {expected} bytes, raw file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    if etype == "UINT8":
        labels = tuple(sorted(set(np.unique(data).tolist()) | {0, 1}))
        return LabelVolume(data, spacing, origin, labels)
    return Volume3D(data, spacing, origin)


def sample_trilinear(vol: Volume3D, points) -> np.ndarray | float:
    """Trilinear interpolation at world points (mm).

    Accepts a single point or an ``(..., 3)`` array. Points outside the hull
    of voxel centres return :data:`PADDING_VALUE`.
    """
    p = np.asarray(points, dtype=np.float64)
    scalar = p.ndim == 1
    flat = p.reshape(-1, 3)
    u = (flat - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    dims = np.asarray(vol.dims)
    inside = np.all((u >= 0) & (u <= dims - 1), axis=1)
    out = ndimage.map_coordinates(vol.data, u.T, output=np.float64, order=1, mode="nearest", prefilter=False)
    out[~inside] = PADDING_VALUE
    if scalar:
        return float(out[0])
    return out.reshape(p.shape[:-1])


def nearest_voxel_values(vol: Volume3D, points, fill=0) -> np.ndarray:
    """Nearest-voxel lookup; out-of-grid points get ``fill``."""
    p = np.asarray(points, dtype=np.float64)
    idx = np.rint(vol.world_to_voxel(p.reshape(-1, 3))).astype(np.int64)
    dims = np.asarray(vol.dims)
    ok = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.full(len(idx), fill, dtype=vol.data.dtype)
    good = idx[ok]
    out[ok] = vol.data[good[:, 0], good[:, 1], good[:, 2]]
    return out.reshape(p.shape[:-1])


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


__all__ = [
    "PADDING_VALUE", "Volume3D", "LabelVolume", "VolumeFormatError",
    "save_volume", "load_volume", "sample_trilinear", "nearest_voxel_values", "file_digest",
]

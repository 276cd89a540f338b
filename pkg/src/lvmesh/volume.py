"""Volumetric image containers, trilinear sampling and MetaImage-style file I/O.

Volumes are stored as numpy arrays in (z, y, x) index order so the raw
payload on disk (x-fastest, z-slowest, little-endian) maps directly onto the
C-contiguous buffer.  All physical quantities are millimetres; voxel centers
sit at ``origin + index * spacing``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ImageVolume",
    "LabelVolume",
    "FrameSequence",
    "VolumeError",
    "read_mhd",
    "write_mhd",
    "sample_trilinear",
    "sample_trilinear_with_gradient",
    "resample_z",
]


class VolumeError(Exception):
    """Raised for malformed headers, payload mismatches or invalid grids."""


# MetaImage element type <-> numpy dtype (little-endian on disk)
_MET_TO_DTYPE = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}
_DTYPE_TO_MET = {
    np.dtype("uint8"): "MET_UCHAR",
    np.dtype("int16"): "MET_SHORT",
    np.dtype("float32"): "MET_FLOAT",
}


@dataclass(frozen=True)
class ImageVolume:
    """Scalar voxel grid with physical spacing and origin.

    ``data`` has shape (nz, ny, nx); an optional trailing component axis of
    size ``channels`` is used for vector-valued grids (displacement fields).
    """

    data: np.ndarray
    spacing: tuple[float, float, float]  # (sx, sy, sz) mm/voxel
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim not in (3, 4):
            raise VolumeError(f"expected 3D or 4D data array, got ndim={arr.ndim}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)."""
        nz, ny, nx = self.data.shape[:3]
        return (nx, ny, nz)

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[3]

    def same_grid(self, other: "ImageVolume", tol: float = 1e-9) -> bool:
        return (
            self.data.shape[:3] == other.data.shape[:3]
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
        )

    def voxel_centers(self) -> np.ndarray:
        """Physical coordinates of all voxel centers, shape (nz, ny, nx, 3)."""
        nz, ny, nx = self.data.shape[:3]
        sx, sy, sz = self.spacing
        ox, oy, oz = self.origin
        zz, yy, xx = np.meshgrid(
            oz + sz * np.arange(nz),
            oy + sy * np.arange(ny),
            ox + sx * np.arange(nx),
            indexing="ij",
        )
        return np.stack([xx, yy, zz], axis=-1)


@dataclass(frozen=True)
class LabelVolume(ImageVolume):
    """Integer label grid; 0 background, 1 RV pool, 2 LV myocardium, 3 LV pool."""

    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.data.dtype, np.integer):
            raise VolumeError("LabelVolume requires an integer dtype")


@dataclass
class FrameSequence:
    """Ordered cine frames on a shared grid; frame 0 is end-diastole."""

    frames: list

    def __post_init__(self):
        if len(self.frames) < 2:
            raise VolumeError("a frame sequence needs at least 2 frames")
        ref = self.frames[0]
        for i, f in enumerate(self.frames[1:], 1):
            if not ref.same_grid(f):
                raise VolumeError(f"frame {i} grid differs from frame 0")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


def _parse_header(path: str) -> dict:
    header = {}
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise VolumeError(f"malformed header line in {path!r}: {line!r}")
            key, val = line.split("=", 1)
            header[key.strip()] = val.strip()
    return header


def read_mhd(path: str, labels: bool = False):
    """Read a MetaImage header + raw pair.

    Returns a LabelVolume when ``labels`` is true (payload cast to integer),
    else an ImageVolume.  Vector-valued payloads are supported through the
    ElementNumberOfChannels key.
    """
    header = _parse_header(path)
    for key in ("DimSize", "ElementType", "ElementDataFile"):
        if key not in header:
            raise VolumeError(f"missing required header key {key!r} in {path!r}")
    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise VolumeError(f"only 3-dimensional volumes supported, got NDims={ndims}")
    dims = tuple(int(v) for v in header["DimSize"].split())
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeError(f"bad DimSize {header['DimSize']!r}")
    spacing = tuple(float(v) for v in header.get("ElementSpacing", "1 1 1").split())
    origin = tuple(float(v) for v in header.get("Offset", "0 0 0").split())
    channels = int(header.get("ElementNumberOfChannels", "1"))
    met = header["ElementType"]
    if met not in _MET_TO_DTYPE:
        raise VolumeError(f"unsupported ElementType {met!r}")
    dtype = _MET_TO_DTYPE[met]

    raw_name = header["ElementDataFile"]
    raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), raw_name)
    payload = np.fromfile(raw_path, dtype=dtype)
    nx, ny, nz = dims
    expected = nx * ny * nz * channels
    if payload.size != expected:
        raise VolumeError(
            f"payload size mismatch in {raw_path!r}: expected {expected} elements, "
            f"got {payload.size}"
        )
    if channels == 1:
        data = payload.reshape(nz, ny, nx)
    else:
        data = payload.reshape(nz, ny, nx, channels)
    data = data.astype(dtype.newbyteorder("="))
    if labels:
        return LabelVolume(data.astype(np.int32), spacing, origin)
    return ImageVolume(data, spacing, origin)


def write_mhd(vol: ImageVolume, path: str) -> None:
    """Write header + raw pair; ``read_mhd`` is the exact inverse.

    LabelVolumes are stored as the smallest sufficient unsigned type (u8).
    """
    data = vol.data
    if isinstance(vol, LabelVolume):
        if data.min() < 0 or data.max() > 255:
            raise VolumeError("labels outside u8 range cannot be serialized")
        data = data.astype(np.uint8)
    dtype = np.dtype(data.dtype)
    if dtype not in _DTYPE_TO_MET:
        raise VolumeError(f"unsupported element dtype {dtype}; use u8/i16/f32")
    nx, ny, nz = vol.dims
    base = os.path.splitext(os.path.basename(path))[0]
    raw_name = base + ".raw"
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        f"DimSize = {nx} {ny} {nz}",
        "ElementSpacing = {:.17g} {:.17g} {:.17g}".format(*vol.spacing),
        "Offset = {:.17g} {:.17g} {:.17g}".format(*vol.origin),
    ]
    if vol.channels != 1:
        lines.append(f"ElementNumberOfChannels = {vol.channels}")
    lines.append(f"ElementType = {_DTYPE_TO_MET[dtype]}")
    lines.append(f"ElementDataFile = {raw_name}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), raw_name)
    np.ascontiguousarray(data.astype(dtype.newbyteorder("<"))).tofile(raw_path)


def _continuous_index(vol: ImageVolume, points_mm: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points_mm, dtype=np.float64))
    return (p - np.asarray(vol.origin)) / np.asarray(vol.spacing)


def sample_trilinear(vol: ImageVolume, points_mm: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at physical points, clamped at the grid edge.

    ``points_mm`` is (..., 3); scalar volumes return shape (...,), vector
    volumes (..., channels).
    """
    vals, _ = _trilinear(vol, points_mm, want_gradient=False)
    return vals


def sample_trilinear_with_gradient(vol: ImageVolume, points_mm: np.ndarray):
    """Values and spatial gradient (per mm) of the clamped trilinear interpolant."""
    return _trilinear(vol, points_mm, want_gradient=True)


def _trilinear(vol: ImageVolume, points_mm: np.ndarray, want_gradient: bool):
    pts = np.asarray(points_mm, dtype=np.float64)
    out_shape = pts.shape[:-1]
    ci = _continuous_index(vol, pts.reshape(-1, 3))  # (N, 3) in (x, y, z) order
    nz, ny, nx = vol.data.shape[:3]
    dims = np.array([nx, ny, nz], dtype=np.float64)

    clamped = np.clip(ci, 0.0, dims - 1.0)
    inside = (ci > 0.0) & (ci < dims - 1.0)  # derivative survives only off the clamp
    i0 = np.floor(clamped).astype(np.intp)
    i0 = np.minimum(i0, (dims - 2).astype(np.intp).clip(min=0))
    frac = clamped - i0
    i1 = np.minimum(i0 + 1, (dims - 1).astype(np.intp))

    data = vol.data
    vector = data.ndim == 4
    if vector:
        nc = data.shape[3]
        acc = np.zeros((ci.shape[0], nc))
        grad = np.zeros((ci.shape[0], 3, nc)) if want_gradient else None
    else:
        acc = np.zeros(ci.shape[0])
        grad = np.zeros((ci.shape[0], 3)) if want_gradient else None

    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    dwx = (-1.0, 1.0)
    for cz in (0, 1):
        iz = (i0[:, 2], i1[:, 2])[cz]
        for cy in (0, 1):
            iy = (i0[:, 1], i1[:, 1])[cy]
            for cx in (0, 1):
                ix = (i0[:, 0], i1[:, 0])[cx]
                v = data[iz, iy, ix]
                w = wx[cx] * wy[cy] * wz[cz]
                if vector:
                    acc += w[:, None] * v
                else:
                    acc += w * v
                if want_gradient:
                    gx = dwx[cx] * wy[cy] * wz[cz]
                    gy = wx[cx] * dwx[cy] * wz[cz]
                    gz = wx[cx] * wy[cy] * dwx[cz]
                    if vector:
                        grad[:, 0] += gx[:, None] * v
                        grad[:, 1] += gy[:, None] * v
                        grad[:, 2] += gz[:, None] * v
                    else:
                        grad[:, 0] += gx * v
                        grad[:, 1] += gy * v
                        grad[:, 2] += gz * v

    if vector:
        vals = acc.reshape(out_shape + (data.shape[3],))
    else:
        vals = acc.reshape(out_shape)
    if not want_gradient:
        return vals, None
    # chain rule index -> mm, zeroed where the clamp is active
    spacing = np.asarray(vol.spacing)
    if vector:
        grad *= inside[:, :, None] / spacing[None, :, None]
        grads = grad.reshape(out_shape + (3, data.shape[3]))
    else:
        grad *= inside / spacing[None, :]
        grads = grad.reshape(out_shape + (3,))
    return vals, grads


def resample_z(vol: ImageVolume, new_sz_mm: float):
    """Resample along z to a new slice thickness (linear; nearest for labels)."""
    if new_sz_mm <= 0:
        raise VolumeError("new slice thickness must be positive")
    nz, ny, nx = vol.data.shape[:3]
    sx, sy, sz = vol.spacing
    new_nz = int(round(nz * sz / new_sz_mm))
    if new_nz < 2:
        raise VolumeError(f"resampling to {new_sz_mm} mm leaves only {new_nz} slices")
    z_new = np.arange(new_nz) * new_sz_mm / sz  # in original slice index units
    is_labels = isinstance(vol, LabelVolume)
    if is_labels:
        idx = np.clip(np.round(z_new).astype(np.intp), 0, nz - 1)
        data = vol.data[idx]
    else:
        z_new = np.clip(z_new, 0.0, nz - 1.0)
        k0 = np.minimum(np.floor(z_new).astype(np.intp), nz - 2) if nz > 1 else np.zeros(new_nz, np.intp)
        f = (z_new - k0)[:, None, None]
        data = (1.0 - f) * vol.data[k0] + f * vol.data[k0 + 1]
        data = data.astype(np.float32)
    new_spacing = (sx, sy, float(new_sz_mm))
    cls = LabelVolume if is_labels else ImageVolume
    return cls(data, new_spacing, vol.origin)

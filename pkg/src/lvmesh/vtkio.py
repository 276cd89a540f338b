"""Legacy ASCII VTK readers/writers for triangle surfaces and tet meshes.

Deterministic formatting (repr-stable %.9g floats) so repeated runs produce
byte-identical artifacts.
"""

from __future__ import annotations

import numpy as np

from .isosurface import SurfaceMesh
from .tetmesh import TetMesh

__all__ = [
    "write_polydata",
    "read_polydata",
    "write_unstructured_grid",
    "read_unstructured_grid",
    "write_ply",
]


class VtkIoError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_polydata(mesh: SurfaceMesh, path: str, comment: str = "surface") -> None:
    v = mesh.vertices
    t = mesh.triangles
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(comment + "\n")
        fh.write("ASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {len(v)} float\n")
        for p in v:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        fh.write(f"POLYGONS {len(t)} {4 * len(t)}\n")
        for a, b, c in t:
            fh.write(f"3 {a} {b} {c}\n")


def read_polydata(path: str) -> SurfaceMesh:
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        i = tokens.index("POINTS")
        n = int(tokens[i + 1])
        coords = np.array(tokens[i + 3 : i + 3 + 3 * n], dtype=np.float64).reshape(n, 3)
        j = tokens.index("POLYGONS")
        m = int(tokens[j + 1])
        cells = np.array(tokens[j + 3 : j + 3 + 4 * m], dtype=np.int64).reshape(m, 4)
    except (ValueError, IndexError) as exc:
        raise VtkIoError(f"malformed polydata file {path!r}: {exc}") from exc
    if not np.all(cells[:, 0] == 3):
        raise VtkIoError("only triangle polygons are supported")
    return SurfaceMesh(coords, cells[:, 1:])


def write_unstructured_grid(mesh: TetMesh, path: str, comment: str = "tetmesh") -> None:
    v = mesh.vertices
    t = mesh.tets
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(comment + "\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(v)} float\n")
        for p in v:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        fh.write(f"CELLS {len(t)} {5 * len(t)}\n")
        for a, b, c, d in t:
            fh.write(f"4 {a} {b} {c} {d}\n")
        fh.write(f"CELL_TYPES {len(t)}\n")
        fh.write("\n".join(["10"] * len(t)) + "\n")
        if mesh.quality is not None:
            fh.write(f"CELL_DATA {len(t)}\n")
            fh.write("SCALARS scaled_jacobian float 1\nLOOKUP_TABLE default\n")
            for q in mesh.quality.scaled_jacobian:
                fh.write(_fmt(q) + "\n")
        if len(mesh.boundary_map):
            # surface-vertex correspondence: index into the generating surface,
            # -1 for vertices that are not mapped
            sidx = np.full(len(v), -1, dtype=np.int64)
            sidx[mesh.boundary_map] = np.arange(len(mesh.boundary_map))
            fh.write(f"POINT_DATA {len(v)}\n")
            fh.write("SCALARS surface_index int 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(str(s) for s in sidx) + "\n")


def read_unstructured_grid(path: str) -> TetMesh:
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        i = tokens.index("POINTS")
        n = int(tokens[i + 1])
        coords = np.array(tokens[i + 3 : i + 3 + 3 * n], dtype=np.float64).reshape(n, 3)
        j = tokens.index("CELLS")
        m = int(tokens[j + 1])
        cells = np.array(tokens[j + 3 : j + 3 + 5 * m], dtype=np.int64).reshape(m, 5)
    except (ValueError, IndexError) as exc:
        raise VtkIoError(f"malformed unstructured grid file {path!r}: {exc}") from exc
    if not np.all(cells[:, 0] == 4):
        raise VtkIoError("only tetrahedral cells are supported")
    boundary_map = np.arange(0)
    if "surface_index" in tokens:
        # skip the type, component count, and LOOKUP_TABLE name tokens
        k = tokens.index("surface_index") + 5
        sidx = np.array(tokens[k : k + n], dtype=np.int64)
        mapped = sidx >= 0
        boundary_map = np.empty(int(mapped.sum()), dtype=np.int64)
        boundary_map[sidx[mapped]] = np.nonzero(mapped)[0]
    return TetMesh(coords, cells[:, 1:], boundary_map)


def write_ply(mesh: SurfaceMesh, path: str) -> None:
    v = mesh.vertices
    t = mesh.triangles
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(v)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(t)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for p in v:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        for a, b, c in t:
            fh.write(f"3 {a} {b} {c}\n")

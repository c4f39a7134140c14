"""Endocardial surface meshes: extraction, normals, adjacency and label projection."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _skimage_marching_cubes

from .volume import LabelVolume, nearest_voxel_values, sample_trilinear

LABEL_SOURCES = ("GT_M", "GT_auto", "predicted")
NORMAL_SMOOTHING_MM = 2.0


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    vertices: np.ndarray            # (V, 3) world mm
    triangles: np.ndarray           # (F, 3) vertex indices, outward winding
    normals: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("vertices must be (V,3) and triangles (F,3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle references an invalid vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.normals is not None:
            object.__setattr__(self, "normals", np.ascontiguousarray(self.normals, dtype=np.float64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def _edge_table(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    @property
    def edges(self) -> np.ndarray:
        """Undirected edges as sorted (i < j) pairs, lexicographic order."""
        return self._edge_table[0]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR ``(indptr, indices)``; each vertex's neighbour list is sorted."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        indptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.add.at(indptr, both[:, 0] + 1, 1)
        return np.cumsum(indptr), both[:, 1].copy()

    def neighbors(self, i: int) -> np.ndarray:
        indptr, indices = self.adjacency
        return indices[indptr[i]:indptr[i + 1]]

    def is_watertight(self) -> bool:
        return bool(np.all(self._edge_table[1] == 2))

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + len(self.triangles)

    def face_normals(self, unit=False) -> np.ndarray:
        v, t = self.vertices, self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        if unit:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def area(self) -> float:
        return float(0.5 * np.linalg.norm(self.face_normals(), axis=1).sum())

    def signed_volume(self) -> float:
        v, t = self.vertices, self.triangles
        return float(np.einsum("ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0)


@dataclass(frozen=True, eq=False)
class VertexLabels:
    labels: np.ndarray
    source: str = "predicted"

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if lab.size and not np.isin(lab, (0, 1)).all():
            raise ValueError("vertex labels must be 0 (normal) or 1 (scar)")
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.source!r}")
        object.__setattr__(self, "labels", lab.astype(np.uint8))

    def __len__(self):
        return len(self.labels)


def upsampled_field(mask: LabelVolume, factor: int):
    """Trilinear upsampling of the {0,1} mask onto cell-centred sub-voxel points.

    Returns ``(field, spacing, origin)`` of the finer grid. Sub-voxel points
    sit at voxel offsets ``(m + 0.5)/factor - 0.5``; for ``factor == 2`` no
    sample can equal exactly 0.5, which keeps the isosurface free of
    degenerate triangles.
    """
    axes = [(np.arange(n * factor) + 0.5) / factor - 0.5 for n in mask.dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    world = mask.voxel_to_world(grid)
    fld = sample_trilinear(mask.as_float(), world)
    spacing = tuple(s / factor for s in mask.spacing)
    origin = tuple(mask.origin[d] + (0.5 / factor - 0.5) * mask.spacing[d] for d in range(3))
    return fld, spacing, origin


def marching_cubes(mask: LabelVolume, upsample_factor: int = 2,
                   normal_smoothing_mm: float = NORMAL_SMOOTHING_MM) -> SurfaceMesh:
    """Closed, outward-oriented isosurface of a binary mask with vertex normals."""
    if upsample_factor < 1 or int(upsample_factor) != upsample_factor:
        raise MeshError("upsample_factor must be a positive integer")
    data = np.asarray(mask.data)
    if not np.isin(data, (0, 1)).all():
        raise MeshError("mask must be binary")
    if not data.any():
        raise MeshError("mask is empty")
    border = np.concatenate([data[[0, -1]].ravel(), data[:, [0, -1]].ravel(), data[:, :, [0, -1]].ravel()])
    if border.any():
        raise MeshError("mask touches the grid boundary; pad it with background before meshing")

    # the upsampling is local, so a padded bounding box gives the same surface
    nz = np.nonzero(data)
    lo = [max(int(ax.min()) - 2, 0) for ax in nz]
    hi = [min(int(ax.max()) + 3, n) for ax, n in zip(nz, data.shape)]
    crop = LabelVolume(data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], mask.spacing,
                       tuple(mask.origin[d] + lo[d] * mask.spacing[d] for d in range(3)))
    fld, spacing, origin = upsampled_field(crop, int(upsample_factor))
    # factors other than 1 and 2 can produce samples exactly on the level
    fld = np.where(fld == 0.5, 0.5 + 1e-6, fld)
    verts, faces, _, _ = _skimage_marching_cubes(fld, level=0.5, spacing=spacing, method="lewiner")
    verts = verts + np.asarray(origin)
    mesh = SurfaceMesh(verts, faces)
    if mesh.signed_volume() < 0:
        mesh = SurfaceMesh(verts, faces[:, [0, 2, 1]])
    return replace(mesh, normals=vertex_normals(mesh, mask, normal_smoothing_mm))


def vertex_normals(mesh: SurfaceMesh, mask: LabelVolume, smoothing_mm: float = NORMAL_SMOOTHING_MM) -> np.ndarray:
    """Area-weighted unit vertex normals pointing out of the masked region.

    Each vertex first sums the area-weighted normals of its incident
    triangles. With ``smoothing_mm > 0`` those sums are then averaged over
    nearby vertices with Gaussian weights (sigma = ``smoothing_mm``, cut at
    3 sigma), which removes the voxel staircase of a binary mask; 0 keeps
    the plain one-ring estimate. The sign is decided by majority vote: the
    mask field one millimetre along the normal should be lower than one
    millimetre against it.
    """
    acc = np.zeros_like(mesh.vertices)
    fn = mesh.face_normals()
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    if np.any(norm == 0):
        bad = int(np.flatnonzero(norm == 0)[0])
        raise MeshError(f"vertex {bad} has zero incident area")
    if smoothing_mm > 0:
        tree = cKDTree(mesh.vertices)
        near = tree.sparse_distance_matrix(tree, 3 * smoothing_mm, output_type="coo_matrix")
        w = np.exp(-near.data ** 2 / (2 * smoothing_mm ** 2))
        n = mesh.n_vertices
        kernel = sparse.csr_matrix((w, (near.row, near.col)), shape=(n, n)) + sparse.identity(n, format="csr")
        acc = kernel @ acc
        norm = np.linalg.norm(acc, axis=1)
        if np.any(norm == 0):
            raise MeshError("smoothed normal vanished; reduce smoothing_mm")
    normals = acc / norm[:, None]
    fmask = mask.as_float()
    ahead = sample_trilinear(fmask, mesh.vertices + normals)
    behind = sample_trilinear(fmask, mesh.vertices - normals)
    if np.count_nonzero(ahead < behind) < np.count_nonzero(ahead > behind):
        normals = -normals
    return normals


def project_labels(mesh: SurfaceMesh, scar: LabelVolume, search_mm: float = 3.0,
                   step_mm: float = 0.5, source: str = "GT_M") -> VertexLabels:
    """Label a vertex scar when a scar voxel is hit along ``v + t*n``, ``|t| <= search_mm``."""
    if search_mm <= 0:
        raise ValueError("search_mm must be positive")
    if mesh.normals is None:
        raise MeshError("mesh has no normals")
    k = int(np.floor(search_mm / step_mm + 1e-9))
    ts = step_mm * np.arange(-k, k + 1)
    pts = mesh.vertices[:, None, :] + ts[None, :, None] * mesh.normals[:, None, :]
    hits = nearest_voxel_values(scar, pts, fill=0) > 0
    return VertexLabels(hits.any(axis=1).astype(np.uint8), source)


def write_ply(path, mesh: SurfaceMesh, labels=None, prob_scar=None) -> None:
    """ASCII PLY with x,y,z,nx,ny,nz,label,prob_scar per vertex."""
    n = mesh.n_vertices
    normals = mesh.normals if mesh.normals is not None else np.zeros((n, 3))
    lab = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(
        labels.labels if isinstance(labels, VertexLabels) else labels, dtype=np.int64)
    prob = lab.astype(np.float64) if prob_scar is None else np.asarray(prob_scar, dtype=np.float64)
    if len(lab) != n or len(prob) != n:
        raise ValueError("per-vertex arrays must match the vertex count")
    lines = [
        "ply", "format ascii 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar label", "property float prob_scar",
        f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, q, l, s in zip(mesh.vertices, normals, lab, prob):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {q[0]:.6f} {q[1]:.6f} {q[2]:.6f} {l:d} {s:.6f}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> dict:
    """Parse a file written by :func:`write_ply`; returns arrays keyed by property name."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "ply":
        raise MeshError(f"{path}: not a PLY file")
    if "end_header" not in lines:
        raise MeshError(f"{path}: header never ends")
    props, nv, nf = [], 0, 0
    i = 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts and parts[0] == "element":
            if parts[1] == "vertex":
                nv = int(parts[2])
            elif parts[1] == "face":
                nf = int(parts[2])
        elif parts and parts[0] == "property" and parts[1] != "list":
            props.append(parts[-1])
        i += 1
    body = lines[i + 1:]
    if len(body) < nv + nf:
        raise MeshError(f"{path}: expected {nv} vertices and {nf} faces, found {len(body)} data lines")
    try:
        vals = np.array([[float(x) for x in ln.split()] for ln in body[:nv]]).reshape(nv, len(props))
        faces = np.array([[int(x) for x in ln.split()[1:]] for ln in body[nv:nv + nf]], dtype=np.int64)
    except ValueError as exc:
        raise MeshError(f"{path}: malformed data line ({exc})") from exc
    out = {name: vals[:, k] for k, name in enumerate(props)}
    out["faces"] = faces.reshape(nf, 3) if nf else np.zeros((0, 3), dtype=np.int64)
    return out

"""Multi-scale elongated patches sampled along surface normals."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .mesh import SurfaceMesh, VertexLabels
from .volume import Volume3D, sample_trilinear

VARIANCE_FLOOR = 1e-8
MIN_PATCH_SIDE = 7

# transverse world-axis pairs in tie-break preference order, keyed by the dropped axis
_AXIS_PAIRS = ((2, (0, 1)), (1, (0, 2)), (0, (1, 2)))


@dataclass(frozen=True)
class PatchGeometry:
    size: tuple[int, int, int] = (13, 13, 17)
    base_spacing_mm: float = 1.0
    n_scales: int = 3
    multipliers: tuple[float, ...] | None = None

    def __post_init__(self):
        size = tuple(int(s) for s in self.size)
        if len(size) != 3 or any(s % 2 == 0 for s in size):
            raise ValueError(f"patch sides must be odd, got {size}")
        if min(size) < MIN_PATCH_SIDE:
            raise ValueError(f"patch sides must be at least {MIN_PATCH_SIDE}")
        if self.n_scales < 1:
            raise ValueError("need at least one scale")
        if self.base_spacing_mm <= 0:
            raise ValueError("base spacing must be positive")
        mult = self.multipliers
        if mult is None:
            mult = tuple(float(2 ** s) for s in range(self.n_scales))
        mult = tuple(float(m) for m in mult)
        if len(mult) != self.n_scales or any(b <= a for a, b in zip(mult, mult[1:])) or mult[0] <= 0:
            raise ValueError(f"multipliers must be {self.n_scales} strictly increasing positive values")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "multipliers", mult)

    @property
    def n_samples(self) -> int:
        a, b, c = self.size
        return a * b * c

    def spacing(self, scale: int) -> float:
        return self.base_spacing_mm * self.multipliers[scale]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["size"] = tuple(d["size"])
        if d.get("multipliers") is not None:
            d["multipliers"] = tuple(d["multipliers"])
        return cls(**d)

    def with_scales(self, n: int) -> "PatchGeometry":
        return PatchGeometry(self.size, self.base_spacing_mm, n, self.multipliers[:n] if n <= self.n_scales else None)


@dataclass(frozen=True, eq=False)
class MultiScalePatchSet:
    patches: list          # n_scales arrays of shape geometry.size
    center: np.ndarray     # unshifted centre, world mm
    long_axis: np.ndarray
    shift_applied: float


def transverse_axes(normals) -> tuple[np.ndarray, np.ndarray]:
    """Two unit axes orthogonal to each normal, closest to a world-axis pair.

    The pair of world axes whose plane is most orthogonal to the normal is
    kept (the axis with the largest ``|n_k|`` is dropped; ties prefer
    keeping (x, y), then (x, z)), then Gram-Schmidt orthogonalised.
    """
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    mag = np.abs(n)
    top = mag.max(axis=1)
    u1 = np.empty_like(n)
    u2 = np.empty_like(n)
    done = np.zeros(len(n), dtype=bool)
    eye = np.eye(3)
    for dropped, (a, b) in _AXIS_PAIRS:
        sel = ~done & (mag[:, dropped] == top)
        done |= sel
        ea, eb = eye[a], eye[b]
        v1 = ea - (n[sel] @ ea)[:, None] * n[sel]
        v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
        v2 = eb - (n[sel] @ eb)[:, None] * n[sel]
        v2 -= np.einsum("ij,ij->i", v2, v1)[:, None] * v1
        v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
        u1[sel], u2[sel] = v1, v2
    return u1, u2


def _local_offsets(size) -> np.ndarray:
    a, b, c = size
    g = np.meshgrid(np.arange(a) - (a - 1) / 2, np.arange(b) - (b - 1) / 2, np.arange(c) - (c - 1) / 2,
                    indexing="ij")
    return np.stack(g, axis=-1).reshape(-1, 3)


def extract_patches(vol: Volume3D, centers, normals, geom: PatchGeometry, shifts=None,
                    normalize: bool = True, chunk: int = 256) -> np.ndarray:
    """Batched multi-scale patch extraction.

    Returns float32 ``(N, n_scales, a, b, c)``; the last axis runs along the
    normal from inside (cavity) to outside. Each patch set is standardised
    by the mean/std of its scale-0 samples.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero normal")
    normals = normals / norms[:, None]
    n = len(centers)
    shifts = np.zeros(n) if shifts is None else np.broadcast_to(np.asarray(shifts, dtype=np.float64), (n,))
    if not np.all(np.isfinite(shifts)):
        raise ValueError("shift must be finite")
    u1, u2 = transverse_axes(normals)
    eff = centers + shifts[:, None] * normals
    off = _local_offsets(geom.size)
    m = geom.n_samples
    out = np.empty((n, geom.n_scales, *geom.size), dtype=np.float32)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        frames = np.stack([u1[lo:hi], u2[lo:hi], normals[lo:hi]], axis=1)   # (k, 3, 3)
        local = np.einsum("sd,kde->kse", off, frames)                      # (k, m, 3)
        pts = np.concatenate(
            [eff[lo:hi, None, :] + geom.spacing(s) * local for s in range(geom.n_scales)], axis=1)
        vals = sample_trilinear(vol, pts).reshape(hi - lo, geom.n_scales, m)
        if normalize:
            base = vals[:, 0, :]
            mu = base.mean(axis=1)
            var = base.var(axis=1)
            ok = var >= VARIANCE_FLOOR
            sd = np.sqrt(np.where(ok, var, 1.0))
            vals = np.where(ok[:, None, None], (vals - mu[:, None, None]) / sd[:, None, None], 0.0)
        out[lo:hi] = vals.reshape(hi - lo, geom.n_scales, *geom.size)
    return out


def extract_msp(vol: Volume3D, center, normal, geom: PatchGeometry, shift_mm: float = 0.0,
                normalize: bool = True) -> MultiScalePatchSet:
    normal = np.asarray(normal, dtype=np.float64)
    if np.linalg.norm(normal) == 0:
        raise ValueError("zero normal")
    if not np.isfinite(shift_mm):
        raise ValueError("shift must be finite")
    arr = extract_patches(vol, center, normal, geom, [shift_mm], normalize=normalize)[0]
    return MultiScalePatchSet([arr[s] for s in range(geom.n_scales)], np.asarray(center, dtype=np.float64),
                              normal / np.linalg.norm(normal), float(shift_mm))


@dataclass(eq=False)
class NodeSamples:
    """T-NET training samples; ``patches`` is ``(N, n_scales, a, b, c)``."""
    case: np.ndarray
    vertex: np.ndarray
    label: np.ndarray
    shift: np.ndarray
    patches: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.label)


@dataclass(eq=False)
class PairSamples:
    """N-NET training samples over mesh edges; ``same`` is 1 iff the two labels agree."""
    case: np.ndarray
    vi: np.ndarray
    vj: np.ndarray
    distance: np.ndarray
    same: np.ndarray
    shift: np.ndarray
    patches_i: np.ndarray = field(repr=False)
    patches_j: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.same)


def _uniform_open(rng, radius: float, n: int) -> np.ndarray:
    if radius == 0:
        return np.zeros(n)
    g = rng.uniform(-radius, radius, n)
    bad = np.abs(g) >= radius
    while bad.any():
        g[bad] = rng.uniform(-radius, radius, int(bad.sum()))
        bad = np.abs(g) >= radius
    return g


def build_training_sets(cases: Sequence[tuple[SurfaceMesh, VertexLabels, Volume3D]], geom: PatchGeometry,
                        R_mm: float, n_node_samples: int, n_pair_samples: int, seed: int):
    """Class-balanced node and edge-pair samples with random normal shifts.

    Node samples pick a class with probability 1/2, then a vertex of that
    class uniformly over all cases. Pair samples pick same-label and
    cross-label mesh edges with probability 1/2 each (same-label edges split
    evenly between scar-scar and normal-normal where both exist). Every
    emitted sample draws its own shift ``gamma ~ U(-R, R)``; both nodes of a
    pair share one shift.
    """
    if R_mm < 0:
        raise ValueError("R_mm must be non-negative")
    seq = np.random.SeedSequence(int(seed))
    node_rng, pair_rng = (np.random.Generator(np.random.Philox(s)) for s in seq.spawn(2))

    labels = [np.asarray(gt.labels) for _, gt, _ in cases]
    pool_case = np.concatenate([np.full(len(l), c) for c, l in enumerate(labels)])
    pool_vert = np.concatenate([np.arange(len(l)) for l in labels])
    pool_lab = np.concatenate(labels)
    for cls, name in ((1, "scar"), (0, "normal")):
        if not np.any(pool_lab == cls):
            raise ValueError(f"class '{name}' is absent from the ground truth")

    by_class = [np.flatnonzero(pool_lab == 0), np.flatnonzero(pool_lab == 1)]
    cls = node_rng.integers(0, 2, n_node_samples)
    pick = np.empty(n_node_samples, dtype=np.int64)
    for k in (0, 1):
        sel = cls == k
        pick[sel] = by_class[k][node_rng.integers(0, len(by_class[k]), int(sel.sum()))]
    node_shift = _uniform_open(node_rng, R_mm, n_node_samples)
    n_case, n_vert = pool_case[pick], pool_vert[pick]
    node_patches = _materialize(cases, geom, n_case, n_vert, node_shift)
    nodes = NodeSamples(n_case, n_vert, pool_lab[pick].astype(np.uint8), node_shift, node_patches)

    e_case, e_i, e_j, e_d, e_lab = [], [], [], [], []
    for c, (mesh, gt, _) in enumerate(cases):
        e = mesh.edges
        e_case.append(np.full(len(e), c))
        e_i.append(e[:, 0])
        e_j.append(e[:, 1])
        e_d.append(mesh.edge_lengths)
        e_lab.append(np.asarray(gt.labels)[e])
    e_case, e_i, e_j, e_d = (np.concatenate(x) for x in (e_case, e_i, e_j, e_d))
    e_lab = np.concatenate(e_lab)
    kind = np.where(e_lab[:, 0] != e_lab[:, 1], 0, np.where(e_lab[:, 0] == 1, 2, 1))
    groups = {k: np.flatnonzero(kind == k) for k in (0, 1, 2)}
    if len(groups[0]) == 0:
        raise ValueError("no cross-label edges: cannot balance pair samples")
    same = pair_rng.integers(0, 2, n_pair_samples)
    sub = pair_rng.integers(1, 3, n_pair_samples)
    if len(groups[2]) == 0:
        sub[:] = 1
    if len(groups[1]) == 0:
        sub[:] = 2
    group = np.where(same == 1, sub, 0)
    epick = np.empty(n_pair_samples, dtype=np.int64)
    for k in (0, 1, 2):
        sel = group == k
        if sel.any():
            epick[sel] = groups[k][pair_rng.integers(0, len(groups[k]), int(sel.sum()))]
    pair_shift = _uniform_open(pair_rng, R_mm, n_pair_samples)
    p_case = e_case[epick]
    pi = _materialize(cases, geom, p_case, e_i[epick], pair_shift)
    pj = _materialize(cases, geom, p_case, e_j[epick], pair_shift)
    pairs = PairSamples(p_case, e_i[epick], e_j[epick], e_d[epick], (kind[epick] != 0).astype(np.uint8),
                        pair_shift, pi, pj)
    return nodes, pairs


def _materialize(cases, geom, case_idx, vert_idx, shifts) -> np.ndarray:
    out = np.empty((len(case_idx), geom.n_scales, *geom.size), dtype=np.float32)
    for c, (mesh, _, vol) in enumerate(cases):
        sel = np.flatnonzero(case_idx == c)
        if len(sel):
            v = vert_idx[sel]
            out[sel] = extract_patches(vol, mesh.vertices[v], mesh.normals[v], geom, shifts[sel])
    return out


_DUMP_MAGIC = b"SCARMSP1"


def save_node_samples(path, samples: NodeSamples, geom: PatchGeometry) -> None:
    """Binary dump: magic, u32 header length, JSON header, then little-endian arrays.

    Array order after the header: int32 case, int32 vertex, uint8 label,
    float64 shift, float32 patches (C order).
    """
    header = json.dumps({"count": len(samples), "geometry": geom.to_dict()}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(samples.case.astype("<i4").tobytes())
        fh.write(samples.vertex.astype("<i4").tobytes())
        fh.write(samples.label.astype("u1").tobytes())
        fh.write(samples.shift.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(samples.patches, dtype="<f4").tobytes())


def load_node_samples(path) -> tuple[NodeSamples, PatchGeometry]:
    raw = Path(path).read_bytes()
    if raw[:8] != _DUMP_MAGIC:
        raise ValueError("not a patch sample dump")
    (hlen,) = struct.unpack("<I", raw[8:12])
    hdr = json.loads(raw[12:12 + hlen])
    geom = PatchGeometry.from_dict(hdr["geometry"])
    n = hdr["count"]
    off = 12 + hlen

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    case, vert, lab, shift = take("<i4", n), take("<i4", n), take("u1", n), take("<f8", n)
    patches = take("<f4", n * geom.n_scales * geom.n_samples).reshape(n, geom.n_scales, *geom.size)
    if off != len(raw):
        raise ValueError("trailing bytes in patch sample dump")
    return NodeSamples(case.astype(np.int64), vert.astype(np.int64), lab, shift, patches), geom

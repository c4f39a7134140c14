import numpy as np
import pytest
from scipy.spatial import cKDTree

from scargc.mesh import (MeshError, SurfaceMesh, VertexLabels, marching_cubes, project_labels, read_ply,
                         vertex_normals, write_ply)
from scargc.phantom import PhantomSpec, generate_phantom, perturb_segmentation
from scargc.volume import LabelVolume


def ball(radius_vox, n=None, spacing=1.0, axes=None):
    axes = axes or (radius_vox,) * 3
    n = n or int(2 * max(axes) + 7)
    c = (n - 1) / 2
    g = np.mgrid[:n, :n, :n] - c
    inside = sum((g[d] / axes[d]) ** 2 for d in range(3)) <= 1.0
    origin = (-c * spacing,) * 3
    return LabelVolume(inside.astype(np.uint8), (spacing,) * 3, origin)


def ellipsoid_area(a, b, c):
    # Knud Thomsen approximation, relative error below 1.1%
    p = 1.6075
    return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def test_unit_cube_euler_characteristic():
    m = np.zeros((5, 5, 5), dtype=np.uint8)
    m[2, 2, 2] = 1
    mesh = marching_cubes(LabelVolume(m, (1, 1, 1), (0, 0, 0)), upsample_factor=1)
    assert mesh.euler_characteristic() == 2
    assert mesh.is_watertight()


def test_ellipsoid_area_within_five_percent():
    axes = (11.0, 8.0, 6.0)
    mask = ball(None, n=29, axes=axes)
    mesh = marching_cubes(mask, 2)
    assert mesh.is_watertight()
    assert abs(mesh.area() - ellipsoid_area(*axes)) / ellipsoid_area(*axes) < 0.05


def test_upsampling_increases_vertices():
    mask = ball(5.0)
    assert marching_cubes(mask, 2).n_vertices > marching_cubes(mask, 1).n_vertices


def test_errors():
    with pytest.raises(MeshError, match="empty"):
        marching_cubes(LabelVolume(np.zeros((5, 5, 5), dtype=np.uint8), (1, 1, 1), (0, 0, 0)))
    m = np.zeros((5, 5, 5), dtype=np.uint8)
    m[0, 2, 2] = 1
    with pytest.raises(MeshError, match="pad"):
        marching_cubes(LabelVolume(m, (1, 1, 1), (0, 0, 0)))
    with pytest.raises(MeshError):
        marching_cubes(ball(3.0), upsample_factor=0)


def test_sphere_normals_radial_and_unit():
    mask = ball(10.0)
    mesh = marching_cubes(mask, 2)
    n = mesh.normals
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", n, radial), -1, 1)))
    assert np.mean(ang < 5.0) >= 0.99


def test_complement_flips_normals():
    mask = ball(6.0)
    mesh = marching_cubes(mask, 2)
    comp = mask.with_data(1 - mask.data)
    assert np.allclose(vertex_normals(mesh, comp), -mesh.normals)


def test_outward_winding_and_adjacency():
    mesh = marching_cubes(ball(6.0), 2)
    assert mesh.signed_volume() > 0
    indptr, idx = mesh.adjacency
    pairs = {(i, int(j)) for i in range(mesh.n_vertices) for j in idx[indptr[i]:indptr[i + 1]]}
    assert all((j, i) in pairs for i, j in pairs)
    for i in range(0, mesh.n_vertices, 97):
        nb = mesh.neighbors(i)
        assert np.all(np.diff(nb) > 0)
    assert np.all(mesh.edges[:, 0] < mesh.edges[:, 1])
    assert np.allclose(mesh.edge_lengths,
                       np.linalg.norm(mesh.vertices[mesh.edges[:, 0]] - mesh.vertices[mesh.edges[:, 1]], axis=1))


def test_project_empty_scar():
    mask = ball(6.0)
    mesh = marching_cubes(mask, 2)
    lab = project_labels(mesh, mask.with_data(np.zeros_like(mask.data)), 3.0)
    assert not lab.labels.any() and len(lab) == mesh.n_vertices


def test_project_scar_voxel_at_vertex():
    verts = np.array([[2.0, 2.0, 2.0], [3.0, 2.0, 2.0], [2.0, 3.0, 2.0]])
    mesh = SurfaceMesh(verts, np.array([[0, 1, 2]]), normals=np.tile([0.0, 0.0, 1.0], (3, 1)))
    scar = np.zeros((6, 6, 6), dtype=np.uint8)
    scar[2, 2, 2] = 1
    lab = project_labels(mesh, LabelVolume(scar, (1, 1, 1), (0, 0, 0)), 0.5)
    assert lab.labels[0] == 1


def test_project_equatorial_patch_extent():
    angle = 35.0
    spec = PhantomSpec(semi_axes_mm=(14.0, 14.0, 14.0), margin_mm=6.0, scar_count=1,
                       scar_angle_deg=(angle, angle), scar_directions=((1.0, 0.0, 0.0),), tube_count=0)
    _, cav, scar = generate_phantom(spec)
    mesh = marching_cubes(cav, 2)
    lab = project_labels(mesh, scar, 3.0)
    # angular extent from labelled surface area: cap of half-angle t covers (1 - cos t)/2 of the sphere
    tri = mesh.triangles
    face_area = 0.5 * np.linalg.norm(mesh.face_normals(), axis=1)
    vert_area = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(vert_area, tri[:, k], face_area / 3)
    frac = vert_area[lab.labels == 1].sum() / vert_area.sum()
    extent = np.degrees(np.arccos(1 - 2 * frac))
    assert abs(extent - angle) / angle < 0.10


def test_projection_monotone_in_search():
    spec = PhantomSpec(seed=3)
    _, cav, scar = generate_phantom(spec)
    mesh = marching_cubes(cav, 2)
    prev = None
    for s in (0.5, 1.0, 2.0, 3.0, 4.5):
        lab = project_labels(mesh, scar, s).labels.astype(bool)
        if prev is not None:
            assert np.all(prev <= lab)
        prev = lab


def test_projection_robust_to_perturbation():
    spec = PhantomSpec(seed=5)
    _, cav, scar = generate_phantom(spec)
    m0 = marching_cubes(cav, 2)
    l0 = project_labels(m0, scar, 3.0).labels.astype(bool)
    pert = perturb_segmentation(cav, 3.0, seed=17)
    m1 = marching_cubes(pert, 2)
    l1 = project_labels(m1, scar, 3.0).labels.astype(bool)
    tree = cKDTree(m1.vertices[l1])
    d, _ = tree.query(m0.vertices[l0])
    assert np.mean(d <= 4.0) >= 0.90


def test_vertex_labels_validation():
    with pytest.raises(ValueError):
        VertexLabels(np.array([0, 2]))
    with pytest.raises(ValueError):
        VertexLabels(np.array([0, 1]), source="manual")


def test_ply_roundtrip(tmp_path):
    mesh = marching_cubes(ball(4.0), 2)
    lab = (mesh.vertices[:, 0] > 0).astype(np.uint8)
    prob = np.linspace(0, 1, mesh.n_vertices)
    write_ply(tmp_path / "m.ply", mesh, lab, prob)
    text = (tmp_path / "m.ply").read_text()
    for prop in ("x", "y", "z", "nx", "ny", "nz", "label", "prob_scar"):
        assert f"property float {prop}\n" in text or f"property uchar {prop}\n" in text
    back = read_ply(tmp_path / "m.ply")
    assert np.array_equal(back["label"].astype(np.uint8), lab)
    assert np.array_equal(back["faces"], mesh.triangles)
    assert np.allclose(back["x"], mesh.vertices[:, 0], atol=1e-6)

import numpy as np
import pytest
import torch

from scargc.mesh import marching_cubes, project_labels
from scargc.nets import (CheckpointError, GeometryMismatch, NNet, TNet, TrainConfig, TrainingDiverged, _fit,
                         gradient_check, load_checkpoint, nnet_forward, predict_edges, predict_features,
                         predict_nodes, save_checkpoint, similarity_features, tnet_forward, train_nnet, train_tnet)
from scargc.patches import NodeSamples, PatchGeometry, build_training_sets, extract_patches
from scargc.phantom import PhantomSpec, generate_phantom

SMALL = PatchGeometry((7, 7, 9), 1.0, 2)
ONE = PatchGeometry((7, 7, 9), 1.0, 1)


def blob_dataset(n, seed, geom=ONE):
    """Scar patches carry a centred +1 Gaussian blob, normal patches are flat; both noisy."""
    rng = np.random.default_rng(seed)
    a, b, c = geom.size
    g = np.mgrid[:a, :b, :c].astype(float)
    centre = np.array([(a - 1) / 2, (b - 1) / 2, (c - 1) / 2])[:, None, None, None]
    blob = np.exp(-((g - centre) ** 2).sum(0) / (2 * 1.5 ** 2))
    label = np.r_[np.ones(n // 2), np.zeros(n - n // 2)].astype(np.uint8)
    rng.shuffle(label)
    x = 0.3 * rng.standard_normal((n, geom.n_scales, a, b, c)) + label[:, None, None, None, None] * blob
    return NodeSamples(np.zeros(n, int), np.arange(n), label, np.zeros(n), x.astype(np.float32))


def test_zero_head_gives_half():
    m = TNet(SMALL)
    with torch.no_grad():
        m.fc2.weight.zero_()
        m.fc2.bias.zero_()
    p = tnet_forward(m, np.random.default_rng(0).standard_normal((2, 7, 7, 9)))
    assert p == (0.5, 0.5)


def test_softmax_sums_to_one():
    m = TNet(SMALL, seed=3)
    x = np.random.default_rng(1).standard_normal((100, 2, 7, 7, 9)).astype(np.float32)
    p = predict_nodes(m, x)
    assert p.shape == (100, 2)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)


def test_geometry_mismatch():
    m = TNet(SMALL)
    with pytest.raises(GeometryMismatch):
        tnet_forward(m, np.zeros((3, 7, 7, 9)))
    with pytest.raises(GeometryMismatch):
        tnet_forward(m, np.zeros((2, 9, 7, 7)))


def test_similarity_feature_examples():
    assert np.allclose(similarity_features(np.ones(16), np.ones(16)), 1)
    assert np.allclose(similarity_features(np.ones(4), np.zeros(4)), 0)
    assert np.all(similarity_features(np.full(16, 0.5), np.full(16, 0.5)) == 0.5)
    with pytest.raises(ValueError):
        similarity_features(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        similarity_features(torch.ones(3), torch.ones(4))
    f = np.random.default_rng(2).random(16)
    assert np.all(similarity_features(f, f) >= 0.5)


def test_nnet_swap_symmetry_and_distance_check():
    rng = np.random.default_rng(3)
    m = NNet(SMALL, seed=1, distance_scale=0.8)
    for _ in range(20):
        pi, pj = rng.standard_normal((2, 2, 7, 7, 9))
        d = float(rng.uniform(0.2, 2))
        s = nnet_forward(m, pi, pj, d)
        assert s == nnet_forward(m, pj, pi, d)
        assert 0 < s < 1
    with pytest.raises(ValueError):
        nnet_forward(m, pi, pj, 0.0)


def test_nnet_features_in_unit_interval():
    m = NNet(SMALL, seed=2)
    f = predict_features(m, np.random.default_rng(4).standard_normal((30, 2, 7, 7, 9)).astype(np.float32))
    assert f.shape == (30, 16) and np.all((f > 0) & (f < 1))


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 0.01 and cfg.lr_at(999) == 0.01
    assert cfg.lr_at(1000) == pytest.approx(0.01 * 0.8, rel=1e-15)
    assert cfg.lr_at(2500) == pytest.approx(0.01 * 0.8 ** 2, rel=1e-15)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_one_epoch_fifty_samples_is_one_step():
    data = blob_dataset(50, 0)
    _, trace = train_tnet(data, TrainConfig(epochs=1), ONE)
    assert trace.steps == 1 and trace.lrs == [0.01]
    assert len(trace.epoch_loss) == 1


def test_separable_training():
    train = blob_dataset(1000, 5)
    model, trace = train_tnet(train, TrainConfig(epochs=8, seed=1), ONE)
    assert all(b < a for a, b in zip(trace.epoch_loss[:5], trace.epoch_loss[1:5]))
    test = blob_dataset(400, 6)
    pred = (predict_nodes(model, test.patches)[:, 0] >= 0.5).astype(np.uint8)
    assert (pred == test.label).mean() >= 0.95


def test_training_deterministic():
    data = blob_dataset(150, 7)
    a, ta = train_tnet(data, TrainConfig(epochs=2, seed=4), ONE)
    b, tb = train_tnet(data, TrainConfig(epochs=2, seed=4), ONE)
    assert ta.epoch_loss == tb.epoch_loss
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_weight_decay_shrinks_norm():
    m = TNet(ONE, seed=2)
    norms = []

    def param_norm():
        return float(torch.sqrt(sum((p.detach().double() ** 2).sum() for p in m.parameters())))

    def zero_data_loss(idx):
        norms.append(param_norm())
        return sum(p.sum() for p in m.parameters()) * 0.0

    _fit(m, 500, zero_data_loss, TrainConfig(epochs=2, seed=0))
    norms.append(param_norm())
    assert len(norms) == 21
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_divergence_raises_with_trace():
    data = blob_dataset(100, 8)
    data.patches[3] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train_tnet(data, TrainConfig(epochs=1), ONE)
    assert np.isnan(err.value.trace.epoch_loss[-1])


def test_gradient_check_linear_head():
    torch.manual_seed(0)
    lin = torch.nn.Linear(12, 3).double()
    x = torch.randn(5, 12, dtype=torch.float64)
    assert gradient_check(lin, lambda m: (m(x) ** 2).sum(), n_params=39) < 1e-8


def test_gradient_check_tnet_and_nnet():
    rng = np.random.default_rng(9)
    x = torch.from_numpy(rng.standard_normal((4, 2, 7, 7, 9)))
    y = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    t = TNet(SMALL, seed=5)
    assert gradient_check(t, lambda m: ((m(x)[:, 0] - y) ** 2).mean(), n_params=200) < 1e-4
    n = NNet(SMALL, seed=6, distance_scale=0.9)
    xj = torch.from_numpy(rng.standard_normal((4, 2, 7, 7, 9)))
    d = torch.tensor([0.5, 0.7, 1.1, 0.9], dtype=torch.float64)
    assert gradient_check(n, lambda m: ((m(x, xj, d) - y) ** 2).mean(), n_params=200) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    x = np.random.default_rng(10).standard_normal((5, 2, 7, 7, 9)).astype(np.float32)
    t = TNet(SMALL, seed=11)
    save_checkpoint(tmp_path / "t.ckpt", t)
    t2 = load_checkpoint(tmp_path / "t.ckpt", SMALL)
    assert np.array_equal(predict_nodes(t, x), predict_nodes(t2, x))
    n = NNet(SMALL, seed=12, distance_scale=0.73)
    save_checkpoint(tmp_path / "n.ckpt", n)
    n2 = load_checkpoint(tmp_path / "n.ckpt")
    assert float(n2.distance_scale) == pytest.approx(0.73)
    f, f2 = predict_features(n, x), predict_features(n2, x)
    assert np.array_equal(f, f2)
    e = np.array([[0, 1], [2, 3]])
    assert np.array_equal(predict_edges(n, f, e, np.array([1.0, 2.0])), predict_edges(n2, f2, e, np.array([1.0, 2.0])))


def test_checkpoint_errors(tmp_path):
    t = TNet(SMALL)
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, t)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, PatchGeometry((7, 7, 9), 1.0, 3))
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")


def test_nnet_learns_label_agreement_on_phantom():
    cases = []
    for seed in (31, 32):
        vol, cav, scar = generate_phantom(PhantomSpec(seed=seed))
        mesh = marching_cubes(cav, 2)
        cases.append((mesh, project_labels(mesh, scar, 3.0), vol))
    _, pairs = build_training_sets(cases[:1], SMALL, 0.0, 0, 1500, seed=0)
    scale = float(cases[0][0].edge_lengths.mean())
    model, _ = train_nnet(pairs, TrainConfig(epochs=6, seed=0), SMALL, scale)
    mesh, gt, vol = cases[1]
    x = extract_patches(vol, mesh.vertices, mesh.normals, SMALL)
    sims = predict_edges(model, predict_features(model, x), mesh.edges, mesh.edge_lengths)
    lab = gt.labels
    same = lab[mesh.edges[:, 0]] == lab[mesh.edges[:, 1]]
    assert sims[same].mean() > sims[~same].mean()

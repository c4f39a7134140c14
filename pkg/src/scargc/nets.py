"""T-NET and N-NET: multi-scale 3-D CNNs predicting t-link and n-link potentials."""

from __future__ import annotations

import contextlib
import copy
import json
import math
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .patches import MultiScalePatchSet, NodeSamples, PairSamples, PatchGeometry

FEATURE_DIM = 16
CHECKPOINT_MAGIC = b"SCARCKPT"
CHECKPOINT_VERSION = 1


class GeometryMismatch(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class CheckpointError(ValueError):
    pass


@contextlib.contextmanager
def single_threaded():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _pool_len(n: int) -> int:
    n = math.ceil((n - 2) / 2)
    return math.ceil((n - 2) / 2)


class Pathway(nn.Module):
    """conv(8) -> relu -> pool -> conv(16) -> relu -> pool, valid 3x3x3 kernels."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv3d(1, 8, 3)
        self.conv2 = nn.Conv3d(8, 16, 3)
        self.pool = nn.MaxPool3d(2, ceil_mode=True)

    def forward(self, x):
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        return x.flatten(1)


class MultiScaleEncoder(nn.Module):
    def __init__(self, geom: PatchGeometry):
        super().__init__()
        self.geom = geom
        self.paths = nn.ModuleList(Pathway() for _ in range(geom.n_scales))
        self.out_dim = geom.n_scales * 16 * math.prod(_pool_len(s) for s in geom.size)

    def forward(self, x):
        if x.shape[1:] != (self.geom.n_scales, *self.geom.size):
            raise GeometryMismatch(
                f"patch tensor {tuple(x.shape[1:])} does not match geometry "
                f"{(self.geom.n_scales, *self.geom.size)}")
        return torch.cat([p(x[:, s:s + 1]) for s, p in enumerate(self.paths)], dim=1)


def _init_uniform(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                m.bias.zero_()


class TNet(nn.Module):
    """Node classifier; ``forward`` returns softmax probabilities ``[p_scar, p_normal]``."""

    kind = "tnet"

    def __init__(self, geom: PatchGeometry, seed: int = 0):
        super().__init__()
        self.geom = geom
        self.encoder = MultiScaleEncoder(geom)
        self.fc1 = nn.Linear(self.encoder.out_dim, 64)
        self.fc2 = nn.Linear(64, 2)
        _init_uniform(self, seed)

    def logits(self, x):
        return self.fc2(torch.relu(self.fc1(self.encoder(x))))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class NNet(nn.Module):
    """Edge similarity network built around a shared feature map with outputs in (0, 1)."""

    kind = "nnet"

    def __init__(self, geom: PatchGeometry, seed: int = 0, distance_scale: float = 1.0,
                 feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.geom = geom
        self.feature_dim = feature_dim
        self.encoder = MultiScaleEncoder(geom)
        self.feat = nn.Linear(self.encoder.out_dim, feature_dim)
        self.sim1 = nn.Linear(feature_dim + 1, 16)
        self.sim2 = nn.Linear(16, 1)
        self.register_buffer("distance_scale", torch.tensor(float(distance_scale), dtype=torch.float32))
        _init_uniform(self, seed)

    def features(self, x):
        return torch.sigmoid(self.feat(self.encoder(x)))

    def similarity(self, fi, fj, d):
        g = similarity_features(fi, fj)
        z = torch.cat([g, (d / self.distance_scale).reshape(-1, 1).to(g.dtype)], dim=1)
        return torch.sigmoid(self.sim2(torch.relu(self.sim1(z)))).reshape(-1)

    def forward(self, xi, xj, d):
        return self.similarity(self.features(xi), self.features(xj), d)


def similarity_features(fi, fj):
    """Componentwise ``fi*fj + (1-fi)*(1-fj)``; symmetric in its arguments."""
    if isinstance(fi, torch.Tensor):
        if fi.shape != fj.shape:
            raise ValueError(f"feature length mismatch: {tuple(fi.shape)} vs {tuple(fj.shape)}")
        return fi * fj + (1 - fi) * (1 - fj)
    fi = np.asarray(fi, dtype=np.float64)
    fj = np.asarray(fj, dtype=np.float64)
    if fi.shape != fj.shape:
        raise ValueError(f"feature length mismatch: {fi.shape} vs {fj.shape}")
    if np.any((fi < 0) | (fi > 1)) or np.any((fj < 0) | (fj > 1)):
        raise ValueError("features must lie in [0, 1]")
    return fi * fj + (1 - fi) * (1 - fj)


def _as_batch(patches, geom: PatchGeometry) -> torch.Tensor:
    if isinstance(patches, MultiScalePatchSet):
        arr = np.stack(patches.patches)[None]
    else:
        arr = np.asarray(patches, dtype=np.float32)
        if arr.ndim == 4:
            arr = arr[None]
    if arr.shape[1:] != (geom.n_scales, *geom.size):
        raise GeometryMismatch(f"patches {arr.shape[1:]} do not match geometry {(geom.n_scales, *geom.size)}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def tnet_forward(model: TNet, patches) -> tuple[float, float]:
    with torch.inference_mode():
        p = model(_as_batch(patches, model.geom))[0]
    return float(p[0]), float(p[1])


def nnet_forward(model: NNet, patches_i, patches_j, d_ij: float) -> float:
    """Edge similarity; each side is encoded on its own so swapping is bit-exact."""
    if not d_ij > 0:
        raise ValueError("distance must be positive")
    with torch.inference_mode():
        fi = model.features(_as_batch(patches_i, model.geom))
        fj = model.features(_as_batch(patches_j, model.geom))
        return float(model.similarity(fi, fj, torch.tensor([d_ij], dtype=torch.float32))[0])


def predict_nodes(model: TNet, patches: np.ndarray, batch: int = 1000) -> np.ndarray:
    """``(N, 2)`` float64 probabilities ``[p_scar, p_normal]``."""
    out = []
    with torch.inference_mode():
        for lo in range(0, len(patches), batch):
            out.append(model(_as_batch(patches[lo:lo + batch], model.geom)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def predict_features(model: NNet, patches: np.ndarray, batch: int = 1000) -> np.ndarray:
    out = []
    with torch.inference_mode():
        for lo in range(0, len(patches), batch):
            out.append(model.features(_as_batch(patches[lo:lo + batch], model.geom)).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.feature_dim), dtype=np.float32)


def predict_edges(model: NNet, features: np.ndarray, edges: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    with torch.inference_mode():
        f = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))
        e = torch.from_numpy(np.asarray(edges, dtype=np.int64))
        d = torch.from_numpy(np.asarray(lengths, dtype=np.float32))
        return model.similarity(f[e[:, 0]], f[e[:, 1]], d).double().numpy()


@dataclass(frozen=True)
class TrainConfig:
    momentum: float = 0.9
    batch_size: int = 50
    weight_decay: float = 1e-4
    epochs: int = 15
    lr: float = 0.01
    lr_decay: float = 0.8
    lr_step: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not (self.momentum > 0 and self.batch_size > 0 and self.weight_decay > 0
                and self.epochs > 0 and self.lr > 0 and self.lr_step > 0):
            raise ValueError("training hyper-parameters must be positive")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.lr_decay ** (iteration // self.lr_step)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainTrace:
    epoch_loss: list = field(default_factory=list)
    lrs: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.lrs)


def _fit(model, n, batch_loss, cfg: TrainConfig) -> TrainTrace:
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace()
    it = 0
    model.train()
    with single_threaded():
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, cfg.batch_size):
                idx = np.sort(order[lo:lo + cfg.batch_size])
                lr = cfg.lr_at(it)
                for g in opt.param_groups:
                    g["lr"] = lr
                loss = batch_loss(idx)
                value = float(loss.detach())
                if not math.isfinite(value):
                    trace.epoch_loss.append(float("nan"))
                    raise TrainingDiverged(f"loss became {value} at iteration {it} (epoch {epoch})", trace)
                opt.zero_grad()
                loss.backward()
                opt.step()
                trace.lrs.append(lr)
                total += value * len(idx)
                it += 1
            trace.epoch_loss.append(total / n)
    model.eval()
    return trace


def train_tnet(samples: NodeSamples, cfg: TrainConfig, geom: PatchGeometry) -> tuple[TNet, TrainTrace]:
    """Minimise the batch-mean squared error between ``p_scar`` and the 0/1 label."""
    if len(samples) == 0:
        raise ValueError("empty training set")
    model = TNet(geom, seed=cfg.seed)
    x = torch.from_numpy(np.ascontiguousarray(samples.patches, dtype=np.float32))
    y = torch.from_numpy(samples.label.astype(np.float32))

    def batch_loss(idx):
        t = torch.from_numpy(idx)
        p = model(x[t])[:, 0]
        return ((p - y[t]) ** 2).mean()

    trace = _fit(model, len(samples), batch_loss, cfg)
    return model, trace


def train_nnet(pairs: PairSamples, cfg: TrainConfig, geom: PatchGeometry,
               distance_scale: float) -> tuple[NNet, TrainTrace]:
    """Minimise the batch-mean squared error between predicted and true label agreement."""
    if len(pairs) == 0:
        raise ValueError("empty training set")
    model = NNet(geom, seed=cfg.seed, distance_scale=distance_scale)
    xi = torch.from_numpy(np.ascontiguousarray(pairs.patches_i, dtype=np.float32))
    xj = torch.from_numpy(np.ascontiguousarray(pairs.patches_j, dtype=np.float32))
    d = torch.from_numpy(pairs.distance.astype(np.float32))
    m = torch.from_numpy(pairs.same.astype(np.float32))

    def batch_loss(idx):
        t = torch.from_numpy(idx)
        return ((model(xi[t], xj[t], d[t]) - m[t]) ** 2).mean()

    trace = _fit(model, len(pairs), batch_loss, cfg)
    return model, trace


def gradient_check(model: nn.Module, loss_fn, n_params: int = 200, h: float = 1e-5,
                   seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of ``model``. ``loss_fn(model)`` must return a
    scalar tensor. The relative error of one entry is
    ``|a - n| / max(|a| + |n|, floor)``; the floor keeps entries whose true
    gradient is zero from amplifying round-off in the difference quotient.
    """
    m = copy.deepcopy(model).double()
    m.zero_grad()
    loss_fn(m).backward()
    params = [p for p in m.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for fid in np.sort(flat_ids):
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            p = params[k]
            local = int(fid - offsets[k])
            analytic = float(p.grad.reshape(-1)[local])
            view = p.data.reshape(-1)
            orig = float(view[local])
            view[local] = orig + h
            up = float(loss_fn(m))
            view[local] = orig - h
            down = float(loss_fn(m))
            view[local] = orig
            numeric = (up - down) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
            worst = max(worst, err)
    return worst


def save_checkpoint(path, model: nn.Module) -> None:
    """Versioned little-endian checkpoint: magic, u32 version, u32 header length, JSON header, float32 tensors."""
    state = model.state_dict()
    header = {
        "kind": model.kind,
        "version": CHECKPOINT_VERSION,
        "geometry": model.geom.to_dict(),
        "layers": [[name, list(t.shape)] for name, t in state.items()],
    }
    if isinstance(model, NNet):
        header["feature_dim"] = model.feature_dim
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in state.values():
            fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path, expected_geometry: PatchGeometry | None = None):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    geom = PatchGeometry.from_dict(header["geometry"])
    if expected_geometry is not None and geom != expected_geometry:
        raise CheckpointError(f"{path}: checkpoint geometry {geom} does not match {expected_geometry}")
    if header["kind"] == "tnet":
        model = TNet(geom)
    elif header["kind"] == "nnet":
        model = NNet(geom, feature_dim=header.get("feature_dim", FEATURE_DIM))
    else:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
    state = model.state_dict()
    if [[n, list(t.shape)] for n, t in state.items()] != header["layers"]:
        raise CheckpointError(f"{path}: layer layout does not match the {header['kind']} architecture")
    off = 16 + hlen
    new = {}
    for name, t in state.items():
        count = t.numel()
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        new[name] = torch.from_numpy(arr.astype(np.float32).reshape(t.shape))
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    model.load_state_dict(new)
    model.eval()
    return model

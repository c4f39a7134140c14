"""Phantom cohorts, model training and per-method segmentation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from functools import cached_property

import numpy as np

from .baselines import (classify_threshold, fit_mgmm, mgmm_graphcut, otsu_threshold, threshold_nsd)
from .graphcut import build_graph, min_cut
from .mesh import SurfaceMesh, VertexLabels, marching_cubes, project_labels
from .metrics import confusion_stats
from .nets import (NNet, TNet, TrainConfig, predict_edges, predict_features, predict_nodes, train_nnet,
                   train_tnet)
from .patches import PatchGeometry, build_training_sets, extract_patches
from .phantom import PhantomSpec, generate_phantom, perturb_segmentation
from .volume import sample_trilinear

# method -> (initialisation arm, description)
METHODS = {
    "2sd": ("M", "wall mean + n SD threshold"),
    "otsu": ("M", "Otsu threshold"),
    "mgmm": ("M", "multi-component Gaussian mixture"),
    "mgmm-gc": ("M", "mixture posteriors + graph cut"),
    "mscnn0-m": ("M", "T-NET trained without shift, exact mask"),
    "mscnn0-auto": ("auto", "T-NET trained without shift, perturbed mask"),
    "mscnn": ("auto", "T-NET trained with shift, perturbed mask"),
    "learngc": ("auto", "learned graph cut, perturbed mask"),
    "gt-echo": ("auto", "returns the ground truth"),
}
SWEEP_AXES = ("patch_size", "lambda", "R", "scales")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    train_seeds: list = field(default_factory=lambda: list(range(1000, 1020)))
    test_seeds: list = field(default_factory=lambda: list(range(2000, 2010)))
    phantom: dict = field(default_factory=dict)
    perturb_mm: float = 3.0
    perturb_seed_offset: int = 7919
    upsample: int = 2
    search_mm: float = 3.0
    patch_size: tuple = (13, 13, 17)
    n_scales: int = 3
    base_spacing_mm: float = 1.0
    train: dict = field(default_factory=dict)
    R_mm: float = 8.0
    lam: float = 0.4
    n_node_samples: int = 5000
    n_pair_samples: int = 5000
    sample_seed: int = 0
    n_sd: float = 2.0
    mgmm_k_scar: int = 2
    mgmm_k_normal: int = 3
    mgmm_lambda: float = 0.4
    methods: list = field(default_factory=lambda: list(METHODS))
    lambda_grid: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.4, 0.8, 1.2, 2.0])
    R_grid: list = field(default_factory=lambda: [0.0, 2.0, 4.0, 8.0])
    scales_grid: list = field(default_factory=lambda: [1, 2, 3])
    patch_size_grid: list = field(default_factory=lambda: [[9, 9, 13], [13, 13, 17], [17, 17, 21]])

    def validate(self):
        if not self.train_seeds or not self.test_seeds:
            raise ConfigError("train and test cohorts must be non-empty")
        if set(self.train_seeds) & set(self.test_seeds):
            raise ConfigError("train and test seeds overlap")
        if len(set(self.train_seeds)) != len(self.train_seeds) or len(set(self.test_seeds)) != len(self.test_seeds):
            raise ConfigError("duplicate seeds in a cohort")
        for name in ("lambda_grid", "R_grid", "scales_grid", "patch_size_grid", "methods"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}")
        if self.perturb_mm < 0:
            raise ConfigError("perturb_mm must be non-negative")
        self.phantom_spec(0).validate()
        self.train_config()
        self.geometry()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "patch_size" in d:
            d["patch_size"] = tuple(d["patch_size"])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    def phantom_spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec.from_dict({**self.phantom, "seed": int(seed)})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def geometry(self, n_scales=None, patch_size=None) -> PatchGeometry:
        return PatchGeometry(tuple(patch_size or self.patch_size), self.base_spacing_mm,
                             int(n_scales or self.n_scales))


def config_digest_of(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def config_digest(cfg: ExperimentConfig) -> str:
    return config_digest_of(cfg.to_dict())


@dataclass(eq=False)
class Case:
    """One phantom with its exact (M) and perturbed (auto) initialisations."""
    seed: int
    volume: object
    cavity: object
    scar: object
    cavity_auto: object
    upsample: int = 2
    search_mm: float = 3.0

    @cached_property
    def mesh_M(self) -> SurfaceMesh:
        return marching_cubes(self.cavity, self.upsample)

    @cached_property
    def mesh_auto(self) -> SurfaceMesh:
        return marching_cubes(self.cavity_auto, self.upsample)

    @cached_property
    def gt_M(self) -> VertexLabels:
        return project_labels(self.mesh_M, self.scar, self.search_mm, source="GT_M")

    @cached_property
    def gt_auto(self) -> VertexLabels:
        return project_labels(self.mesh_auto, self.scar, self.search_mm, source="GT_auto")

    def mesh(self, arm: str) -> SurfaceMesh:
        return self.mesh_M if arm == "M" else self.mesh_auto

    def gt(self, arm: str) -> VertexLabels:
        return self.gt_M if arm == "M" else self.gt_auto


def make_case(cfg: ExperimentConfig, seed: int, volumes=None) -> Case:
    """Build a case from its seed, or wrap ``volumes = (intensity, cavity, scar, cavity_auto)``."""
    if volumes is None:
        vol, cav, scar = generate_phantom(cfg.phantom_spec(seed))
        auto = perturb_segmentation(cav, cfg.perturb_mm, seed + cfg.perturb_seed_offset)
    else:
        vol, cav, scar, auto = volumes
    return Case(int(seed), vol, cav, scar, auto, cfg.upsample, cfg.search_mm)


@dataclass
class ModelPair:
    tnet: TNet
    nnet: NNet | None
    geom: PatchGeometry
    R_mm: float
    traces: dict = field(default_factory=dict)


def train_models(cases, cfg: ExperimentConfig, geom: PatchGeometry, R_mm: float, with_nnet: bool = True,
                 tcfg: TrainConfig | None = None) -> ModelPair:
    """Train T-NET (and N-NET) on the exact-mask meshes of ``cases`` with shift radius ``R_mm``."""
    tcfg = tcfg or cfg.train_config()
    triples = [(c.mesh_M, c.gt_M, c.volume) for c in cases]
    nodes, pairs = build_training_sets(triples, geom, R_mm, cfg.n_node_samples,
                                       cfg.n_pair_samples if with_nnet else 0, cfg.sample_seed)
    tnet, ttrace = train_tnet(nodes, tcfg, geom)
    del nodes
    traces = {"tnet": ttrace.epoch_loss}
    nnet = None
    if with_nnet:
        scale = float(np.mean(np.concatenate([c.mesh_M.edge_lengths for c in cases])))
        nnet, ntrace = train_nnet(pairs, tcfg, geom, scale)
        traces["nnet"] = ntrace.epoch_loss
    return ModelPair(tnet, nnet, geom, R_mm, traces)


def case_patches(case: Case, arm: str, geom: PatchGeometry) -> np.ndarray:
    mesh = case.mesh(arm)
    return extract_patches(case.volume, mesh.vertices, mesh.normals, geom)


def vertex_intensities(case: Case, arm: str = "M") -> np.ndarray:
    """Raw intensity at each vertex, i.e. the scale-0 patch centre before normalisation."""
    return np.asarray(sample_trilinear(case.volume, case.mesh(arm).vertices), dtype=np.float64)


def learned_potentials(models: ModelPair, patches: np.ndarray, mesh: SurfaceMesh, with_edges: bool = True):
    """T-NET node probabilities and N-NET edge similarities for one mesh."""
    x = patches[:, :models.geom.n_scales]
    probs = predict_nodes(models.tnet, x)
    sims = None
    if with_edges and models.nnet is not None:
        feats = predict_features(models.nnet, x)
        sims = predict_edges(models.nnet, feats, mesh.edges, mesh.edge_lengths)
    return probs, sims


def learngc_labels(mesh: SurfaceMesh, probs, sims, lam: float) -> VertexLabels:
    if lam == 0 or sims is None:
        sims = np.zeros(len(mesh.edges))
    return min_cut(build_graph(mesh, probs, sims, lam))


def baseline_labels(method: str, case: Case, cfg: ExperimentConfig) -> tuple[VertexLabels, np.ndarray]:
    """Label the exact-mask mesh with a classical method; also returns the per-vertex score."""
    vals = vertex_intensities(case, "M")
    if method == "2sd":
        return classify_threshold(vals, threshold_nsd(vals, cfg.n_sd)), vals
    if method == "otsu":
        return classify_threshold(vals, otsu_threshold(vals)), vals
    _, post = fit_mgmm(vals, cfg.mgmm_k_scar, cfg.mgmm_k_normal, seed=case.seed)
    if method == "mgmm":
        return VertexLabels((post >= 0.5).astype(np.uint8)), post
    if method == "mgmm-gc":
        return mgmm_graphcut(post, vals, case.mesh_M, cfg.mgmm_lambda), post
    raise ConfigError(f"{method} is not a baseline")


def probs_digest(probs: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(probs, dtype="<f8").tobytes()).hexdigest()


def segment_case(case: Case, cfg: ExperimentConfig, methods, models: dict, patch_cache=None) -> dict:
    """Run every requested method on one case.

    ``models`` maps ``"R0"``/``"R"`` to trained :class:`ModelPair`. Returns
    ``method -> dict(labels, arm, score, t_hash)`` where ``score`` is the
    per-vertex scar probability (or intensity for thresholds).
    """
    out = {}
    patch_cache = {} if patch_cache is None else patch_cache

    def patches(arm, geom):
        # fewer scales reuse a prefix: normalisation only depends on scale 0
        key = (arm, geom.size, geom.base_spacing_mm)
        if key in patch_cache:
            mult, arr = patch_cache[key]
            if mult[:geom.n_scales] == geom.multipliers:
                return arr
        want = max([m.geom for m in models.values() if m.geom.size == geom.size], key=lambda g: g.n_scales)
        if want.multipliers[:geom.n_scales] != geom.multipliers:
            want = geom
        arr = case_patches(case, arm, want)
        patch_cache[key] = (want.multipliers, arr)
        return arr

    pot_cache = {}

    def potentials(tag, arm):
        if (tag, arm) not in pot_cache:
            m = models[tag]
            edges = "learngc" in methods and tag == "R" and arm == METHODS["learngc"][0]
            pot_cache[(tag, arm)] = learned_potentials(m, patches(arm, m.geom), case.mesh(arm), edges)
        return pot_cache[(tag, arm)]

    for method in methods:
        arm = METHODS[method][0]
        if method in ("2sd", "otsu", "mgmm", "mgmm-gc"):
            labels, score = baseline_labels(method, case, cfg)
            out[method] = {"labels": labels, "arm": arm, "score": score, "t_hash": None}
            continue
        if method == "gt-echo":
            gt = case.gt(arm)
            out[method] = {"labels": VertexLabels(gt.labels), "arm": arm,
                           "score": gt.labels.astype(np.float64), "t_hash": None}
            continue
        tag = "R0" if method.startswith("mscnn0") else "R"
        probs, sims = potentials(tag, arm)
        lam = cfg.lam if method == "learngc" else 0.0
        labels = learngc_labels(case.mesh(arm), probs, sims, lam)
        out[method] = {"labels": labels, "arm": arm, "score": probs[:, 0], "t_hash": probs_digest(probs)}
    return out


def evaluate_case(result: dict, case: Case) -> dict:
    return {m: confusion_stats(r["labels"], case.gt(r["arm"])) for m, r in result.items()}

"""Classical scar classifiers on per-vertex wall intensities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphcut import DEFAULT_LAMBDA, SurfaceGraph, min_cut
from .mesh import SurfaceMesh, VertexLabels

VAR_FLOOR = 1e-6
OTSU_BINS = 256
OTSU_TIE_RTOL = 1e-12


class MgmmError(RuntimeError):
    pass


def threshold_nsd(wall_values, n_sd: float = 2.0) -> float:
    """``mean + n_sd * std`` (population std) of the wall intensities."""
    v = np.asarray(wall_values, dtype=np.float64).ravel()
    if len(v) < 2:
        raise ValueError("need at least 2 samples")
    return float(v.mean() + n_sd * v.std())


def classify_threshold(values, threshold: float) -> VertexLabels:
    """Scar where the value is strictly above the threshold."""
    return VertexLabels((np.asarray(values) > threshold).astype(np.uint8), "predicted")


def between_class_variance(hist) -> np.ndarray:
    """sigma_B^2 for every cut; entry k splits bins ``[0..k]`` from ``[k+1..]``."""
    h = np.asarray(hist, dtype=np.float64)
    p = h / h.sum()
    idx = np.arange(len(p))
    w0 = np.cumsum(p)[:-1]
    mu_cum = np.cumsum(p * idx)[:-1]
    mu_t = (p * idx).sum()
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        sb = (mu_t * w0 - mu_cum) ** 2 / (w0 * w1)
    sb[(w0 <= 0) | (w1 <= 0)] = 0.0
    return sb


def otsu_pick(sigma_b) -> int:
    """Index of the chosen cut among near-maximal ones.

    Cuts within a relative 1e-12 of the maximum are tied; the lower median
    of the tied indices is taken, so a run of equal cuts between two modes
    resolves to its middle and an even run to the lower of its two middles.
    """
    sb = np.asarray(sigma_b)
    best = sb.max()
    tied = np.flatnonzero(sb >= best * (1 - OTSU_TIE_RTOL))
    return int(tied[(len(tied) - 1) // 2])


def otsu_threshold(values, bins: int = OTSU_BINS) -> float:
    """Otsu threshold on a ``bins``-bin histogram over ``[min, max]``; returns a bin centre."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) < 2 or v.min() == v.max():
        raise ValueError("Otsu needs at least two distinct values")
    hist, edges = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    k = otsu_pick(between_class_variance(hist))
    return float(0.5 * (edges[k] + edges[k + 1]))


@dataclass
class MgmmModel:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray          # pooled mixture weights, sum to 1
    is_scar: np.ndarray          # component -> class
    log_likelihood: list = field(default_factory=list)
    reinitialized: list = field(default_factory=list)

    @property
    def priors(self) -> tuple[float, float]:
        """(scar, normal) class priors."""
        ps = float(self.weights[self.is_scar].sum())
        return ps, float(self.weights[~self.is_scar].sum())

    def class_weights(self, scar: bool) -> np.ndarray:
        w = self.weights[self.is_scar == scar]
        return w / w.sum()

    def responsibilities(self, values) -> tuple[np.ndarray, np.ndarray]:
        """Per-component responsibilities ``(N, K)`` and per-sample log-likelihood."""
        x = np.asarray(values, dtype=np.float64).reshape(-1, 1)
        logp = (np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.variances)
                - 0.5 * (x - self.means) ** 2 / self.variances)
        top = logp.max(axis=1, keepdims=True)
        ll = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        return np.exp(logp - ll[:, None]), ll

    def posterior(self, values) -> np.ndarray:
        r, _ = self.responsibilities(values)
        return np.clip(r[:, self.is_scar].sum(axis=1), 0.0, 1.0)


def fit_mgmm(values, k_scar: int = 2, k_normal: int = 3, seed: int = 0,
             tol: float = 1e-7, max_iter: int = 500) -> tuple[MgmmModel, np.ndarray]:
    """EM for a 1-D mixture whose components are split into normal and scar classes.

    Normal components start at the lower quantiles and scar components at the
    upper ones. A component that collapses onto the variance floor is moved
    once to a random sample (drawn with ``seed``); a second collapse raises.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    K = k_scar + k_normal
    if k_scar < 1 or k_normal < 1:
        raise ValueError("each class needs at least one component")
    if len(x) < 3 * K:
        raise ValueError(f"need at least {3 * K} samples for {K} components")
    xs = np.sort(x)  # sufficient statistics independent of input order
    rng = np.random.default_rng(seed)
    spread = max(xs.var(), VAR_FLOOR)

    means = np.quantile(xs, (np.arange(K) + 0.5) / K)
    model = MgmmModel(means=means, variances=np.full(K, spread / K), weights=np.full(K, 1.0 / K),
                      is_scar=np.arange(K) >= k_normal)
    collapsed = np.zeros(K, dtype=int)
    prev = None
    for _ in range(max_iter):
        r, ll = model.responsibilities(xs)
        total = float(ll.sum())
        model.log_likelihood.append(total)
        if prev is not None and abs(total - prev) <= tol * abs(prev):
            break
        prev = total
        nk = r.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        model.weights = nk / nk.sum()
        model.means = (r * xs[:, None]).sum(axis=0) / nk
        var = (r * (xs[:, None] - model.means) ** 2).sum(axis=0) / nk
        hit = var < VAR_FLOOR
        model.variances = np.maximum(var, VAR_FLOOR)
        if hit.any():
            for k in np.flatnonzero(hit):
                collapsed[k] += 1
                if collapsed[k] > 1:
                    raise MgmmError(f"component {k} collapsed onto the variance floor twice")
                model.means[k] = xs[rng.integers(len(xs))]
                model.variances[k] = spread / K
                model.weights[k] = 1.0 / K
                model.reinitialized.append((len(model.log_likelihood), int(k)))
            model.weights = model.weights / model.weights.sum()
            prev = None
    return model, model.posterior(x)


def mgmm_graphcut(posteriors, vertex_values, mesh: SurfaceMesh, lam: float = DEFAULT_LAMBDA,
                  sigma: float | None = None) -> VertexLabels:
    """Smooth MGMM posteriors with an intensity-contrast Potts term."""
    p = np.asarray(posteriors, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.isnan(p).any():
        raise ValueError("posteriors must lie in [0, 1]")
    vals = np.asarray(vertex_values, dtype=np.float64)
    if sigma is None:
        sigma = float(vals.std())
    e = mesh.edges
    d = mesh.edge_lengths
    diff = vals[e[:, 0]] - vals[e[:, 1]]
    contrast = np.exp(-diff ** 2 / (2 * sigma ** 2)) if sigma > 0 else np.ones(len(e))
    w = contrast * (d.mean() / d)
    g = SurfaceGraph(np.stack([1.0 - p, p], axis=1), e, w, lam)
    return min_cut(g)

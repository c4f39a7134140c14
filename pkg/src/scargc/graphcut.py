"""Binary surface labelling by exact s-t minimum cut.

The source terminal is *scar* and the sink is *normal*. A node left on the
source side of the cut is labelled scar. Capacities are floats; residuals
at or below :data:`RESIDUAL_EPS` count as saturated.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import SurfaceMesh, VertexLabels

RESIDUAL_EPS = 1e-12
BRUTE_FORCE_MAX_NODES = 20
DEFAULT_LAMBDA = 0.4

_TERMINAL = -1
_ORPHAN = -2
_FREE = -3
_INF_DIST = 1 << 60


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SurfaceGraph:
    """``t_costs[i] = (cost_if_scar, cost_if_normal)``; ``edges`` are undirected pairs."""

    t_costs: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        t = np.asarray(self.t_costs, dtype=np.float64).reshape(-1, 2)
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        lam = float(self.lam)
        if len(w) != len(e):
            raise GraphError("one weight per edge required")
        for name, arr in (("t-link cost", t), ("n-link weight", w)):
            if not np.all(np.isfinite(arr)):
                raise GraphError(f"{name} is not finite")
            if np.any(arr < 0):
                raise GraphError(f"{name} is negative")
        if not (np.isfinite(lam) and lam >= 0):
            raise GraphError("lambda must be finite and non-negative")
        if len(e):
            if e.min() < 0 or e.max() >= len(t):
                raise GraphError("edge references a missing node")
            if np.any(e[:, 0] == e[:, 1]):
                raise GraphError("self-loops are not allowed")
            key = np.sort(e, axis=1)
            if len(np.unique(key, axis=0)) != len(key):
                raise GraphError("duplicate undirected edge")
        object.__setattr__(self, "t_costs", t)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "lam", lam)

    @property
    def n(self) -> int:
        return len(self.t_costs)


def build_graph(mesh: SurfaceMesh, node_probs, edge_sims, lam: float = DEFAULT_LAMBDA) -> SurfaceGraph:
    """t-link cost of a label is one minus its predicted probability; n-link weight is the similarity."""
    probs = np.asarray(node_probs, dtype=np.float64)
    sims = np.asarray(edge_sims, dtype=np.float64)
    if np.isnan(probs).any() or np.isnan(sims).any():
        raise GraphError("NaN in predicted potentials")
    if probs.shape != (mesh.n_vertices, 2):
        raise GraphError(f"node_probs must be ({mesh.n_vertices}, 2)")
    if sims.shape != (len(mesh.edges),):
        raise GraphError(f"edge_sims must have one entry per mesh edge ({len(mesh.edges)})")
    return SurfaceGraph(1.0 - probs, mesh.edges, sims, lam)


def _labels_array(g: SurfaceGraph, labels) -> np.ndarray:
    lab = np.asarray(labels.labels if isinstance(labels, VertexLabels) else labels).astype(np.int64)
    if lab.shape != (g.n,):
        raise GraphError(f"labelling has length {lab.shape}, graph has {g.n} nodes")
    return lab


def energy(g: SurfaceGraph, labels) -> float:
    """``sum_i cost_i(l_i) + lam * sum_(i,j) w_ij [l_i != l_j]`` (label 1 = scar)."""
    lab = _labels_array(g, labels)
    unary = np.where(lab == 1, g.t_costs[:, 0], g.t_costs[:, 1]).sum()
    if len(g.edges) == 0:
        return float(unary)
    cut = lab[g.edges[:, 0]] != lab[g.edges[:, 1]]
    return float(unary + g.lam * g.weights[cut].sum())


class _BKFlow:
    """Boykov-Kolmogorov augmenting paths with search-tree reuse."""

    def __init__(self, g: SurfaceGraph, eps: float = RESIDUAL_EPS):
        self.eps = eps
        n = g.n
        self.n = n
        cs = g.t_costs[:, 1].tolist()   # source -> i, paid when i ends up normal
        ct = g.t_costs[:, 0].tolist()   # i -> sink, paid when i ends up scar
        self.flow = 0.0
        self.tr = [0.0] * n
        for i in range(n):
            m = min(cs[i], ct[i])
            self.flow += m
            self.tr[i] = cs[i] - ct[i]

        caps = (g.lam * g.weights).tolist()
        head, rcap = [], []
        out = [[] for _ in range(n)]
        for (i, j), c in zip(g.edges.tolist(), caps):
            if c <= 0:
                continue
            a = len(head)
            head += [j, i]
            rcap += [c, c]
            out[i].append(a)
            out[j].append(a + 1)
        self.head, self.rcap, self.out = head, rcap, out

    def run(self) -> float:
        n, eps = self.n, self.eps
        head, rcap, out, tr = self.head, self.rcap, self.out, self.tr
        parent = [_FREE] * n
        sink = [False] * n
        ts = [0] * n
        dist = [0] * n
        active = deque()
        queued = [False] * n
        for i in range(n):
            if tr[i] > eps:
                parent[i], sink[i], dist[i] = _TERMINAL, False, 1
            elif tr[i] < -eps:
                parent[i], sink[i], dist[i] = _TERMINAL, True, 1
            else:
                continue
            active.append(i)
            queued[i] = True

        time = 0
        orphans = deque()
        current = -1
        while True:
            i = current
            if i >= 0 and parent[i] == _FREE:
                i = -1
            if i < 0:
                while active:
                    cand = active.popleft()
                    queued[cand] = False
                    if parent[cand] != _FREE:
                        i = cand
                        break
                if i < 0:
                    break

            middle = -1
            if not sink[i]:
                for a in out[i]:
                    if rcap[a] > eps:
                        j = head[a]
                        if parent[j] == _FREE:
                            sink[j] = False
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1
                            if not queued[j]:
                                active.append(j)
                                queued[j] = True
                        elif sink[j]:
                            middle = a
                            break
                        elif ts[j] <= ts[i] and dist[j] > dist[i]:
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1
            else:
                for a in out[i]:
                    if rcap[a ^ 1] > eps:
                        j = head[a]
                        if parent[j] == _FREE:
                            sink[j] = True
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1
                            if not queued[j]:
                                active.append(j)
                                queued[j] = True
                        elif not sink[j]:
                            middle = a ^ 1
                            break
                        elif ts[j] <= ts[i] and dist[j] > dist[i]:
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1

            time += 1
            if middle < 0:
                current = -1
                continue
            current = i

            # augment along source-tree path -> middle arc -> sink-tree path
            b = rcap[middle]
            u = head[middle ^ 1]
            while parent[u] != _TERMINAL:
                a = parent[u]
                if rcap[a ^ 1] < b:
                    b = rcap[a ^ 1]
                u = head[a]
            if tr[u] < b:
                b = tr[u]
            u = head[middle]
            while parent[u] != _TERMINAL:
                a = parent[u]
                if rcap[a] < b:
                    b = rcap[a]
                u = head[a]
            if -tr[u] < b:
                b = -tr[u]

            rcap[middle] -= b
            rcap[middle ^ 1] += b
            u = head[middle ^ 1]
            while parent[u] != _TERMINAL:
                a = parent[u]
                rcap[a] += b
                rcap[a ^ 1] -= b
                nxt = head[a]
                if rcap[a ^ 1] <= eps:
                    parent[u] = _ORPHAN
                    orphans.appendleft(u)
                u = nxt
            tr[u] -= b
            if tr[u] <= eps:
                parent[u] = _ORPHAN
                orphans.appendleft(u)
            u = head[middle]
            while parent[u] != _TERMINAL:
                a = parent[u]
                rcap[a ^ 1] += b
                rcap[a] -= b
                nxt = head[a]
                if rcap[a] <= eps:
                    parent[u] = _ORPHAN
                    orphans.appendleft(u)
                u = nxt
            tr[u] += b
            if -tr[u] <= eps:
                parent[u] = _ORPHAN
                orphans.appendleft(u)
            self.flow += b

            # adoption
            while orphans:
                o = orphans.popleft()
                is_sink = sink[o]
                best, best_d = -1, _INF_DIST
                for a0 in out[o]:
                    # residual toward o (source tree) or away from o (sink tree)
                    if (rcap[a0] if is_sink else rcap[a0 ^ 1]) <= eps:
                        continue
                    j = head[a0]
                    if sink[j] != is_sink or parent[j] == _FREE:
                        continue
                    d = 0
                    k = j
                    while True:
                        if ts[k] == time:
                            d += dist[k]
                            break
                        pa = parent[k]
                        d += 1
                        if pa == _TERMINAL:
                            ts[k], dist[k] = time, 1
                            break
                        if pa == _ORPHAN:
                            d = _INF_DIST
                            break
                        k = head[pa]
                    if d < _INF_DIST:
                        if d < best_d:
                            best, best_d = a0, d
                        k = j
                        while ts[k] != time:
                            ts[k], dist[k] = time, d
                            d -= 1
                            k = head[parent[k]]
                if best >= 0:
                    parent[o] = best
                    ts[o], dist[o] = time, best_d + 1
                    continue
                parent[o] = _FREE
                for a0 in out[o]:
                    j = head[a0]
                    if sink[j] != is_sink or parent[j] == _FREE:
                        continue
                    if (rcap[a0] if is_sink else rcap[a0 ^ 1]) > eps and not queued[j]:
                        active.append(j)
                        queued[j] = True
                    pa = parent[j]
                    if pa >= 0 and head[pa] == o:
                        parent[j] = _ORPHAN
                        orphans.append(j)
        return self.flow

    def reaches_sink(self) -> np.ndarray:
        """Nodes with a residual path to the sink; all others lie on the maximal source side."""
        eps, head, rcap, out = self.eps, self.head, self.rcap, self.out
        seen = [t < -eps for t in self.tr]
        queue = deque(i for i in range(self.n) if seen[i])
        while queue:
            v = queue.popleft()
            for a in out[v]:
                w = head[a]
                if not seen[w] and rcap[a ^ 1] > eps:
                    seen[w] = True
                    queue.append(w)
        return np.array(seen, dtype=bool)


def max_flow(g: SurfaceGraph) -> tuple[float, VertexLabels]:
    """Maximum flow value and the cut labelling with the largest scar set."""
    bk = _BKFlow(g)
    value = bk.run()
    labels = (~bk.reaches_sink()).astype(np.uint8)
    return value, VertexLabels(labels, "predicted")


def min_cut(g: SurfaceGraph) -> VertexLabels:
    """Globally optimal labelling; among optimal labellings, the one with the most scar nodes."""
    return max_flow(g)[1]


def brute_force_min_energy(g: SurfaceGraph) -> VertexLabels:
    """Exhaustive minimiser.

    Ties (within 1e-12 relative) go to the lexicographically largest label
    vector, i.e. scar preferred at the lowest node index. For a submodular
    energy that is the same labelling :func:`min_cut` returns.
    """
    n = g.n
    if n > BRUTE_FORCE_MAX_NODES:
        raise GraphError(f"brute force limited to {BRUTE_FORCE_MAX_NODES} nodes, got {n}")
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    chunk = 1 << 16

    def energies():
        for lo in range(0, 1 << n, chunk):
            idx = np.arange(lo, min(lo + chunk, 1 << n), dtype=np.int64)
            lab = (idx[:, None] >> shifts[None, :]) & 1
            e = np.where(lab == 1, g.t_costs[:, 0], g.t_costs[:, 1]).sum(axis=1)
            if len(g.edges):
                cut = lab[:, g.edges[:, 0]] != lab[:, g.edges[:, 1]]
                e = e + g.lam * (cut * g.weights).sum(axis=1)
            yield idx, e

    best_e = min(float(e.min()) for _, e in energies())
    tol = 1e-12 * max(1.0, abs(best_e))
    # index bit order puts node 0 most significant, so the largest index is lexicographically largest
    best_idx = max(int(idx[e <= best_e + tol].max()) for idx, e in energies() if (e <= best_e + tol).any())
    labels = (best_idx >> shifts) & 1
    return VertexLabels(labels.astype(np.uint8), "predicted")


def save_graph(path, g: SurfaceGraph) -> None:
    """Text dump: header lines, then ``n <i> <cost_scar> <cost_normal>`` and ``e <i> <j> <w>`` records."""
    lines = ["# scargc surface graph v1", f"nodes {g.n}", f"edges {len(g.edges)}", f"lambda {g.lam!r}"]
    for i, (cs, cn) in enumerate(g.t_costs.tolist()):
        lines.append(f"n {i} {cs!r} {cn!r}")
    for (i, j), w in zip(g.edges.tolist(), g.weights.tolist()):
        lines.append(f"e {i} {j} {w!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_graph(path) -> SurfaceGraph:
    n = m = None
    lam = DEFAULT_LAMBDA
    costs, edges, weights = {}, [], []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "nodes":
            n = int(parts[1])
        elif tag == "edges":
            m = int(parts[1])
        elif tag == "lambda":
            lam = float(parts[1])
        elif tag == "n":
            costs[int(parts[1])] = (float(parts[2]), float(parts[3]))
        elif tag == "e":
            edges.append((int(parts[1]), int(parts[2])))
            weights.append(float(parts[3]))
        else:
            raise GraphError(f"unknown record {tag!r}")
    if n is None or len(costs) != n or sorted(costs) != list(range(n)):
        raise GraphError("node records incomplete")
    if m is not None and m != len(edges):
        raise GraphError("edge count mismatch")
    return SurfaceGraph(np.array([costs[i] for i in range(n)]).reshape(-1, 2),
                        np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(weights), lam)

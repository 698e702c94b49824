"""Binary part labeling by s-t minimum cut.

Energy of a labeling x (True = foreground):

    E(x) = sum_i [cost_f(i) if x_i else cost_b(i)] + sum_{(i,j)} w_ij [x_i != x_j]

With nonnegative weights the energy is submodular and the minimum cut is a
global minimizer.  Source side = foreground.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import networkx as nx
import numpy as np

PIN_COST = 1e9
DEFAULT_LAMBDA_PAIRWISE = 0.02


@dataclass(frozen=True, eq=False)
class CutProblem:
    cost_f: np.ndarray
    cost_b: np.ndarray
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("cost_f", "cost_b", "weights"):
            arr = np.asarray(getattr(self, name), float).reshape(-1)
            if not np.isfinite(arr).all() or (arr < 0).any():
                raise ValueError(f"{name} must be finite and nonnegative")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "edges", np.asarray(self.edges, np.int64).reshape(-1, 2))
        if len(self.cost_f) != len(self.cost_b) or len(self.edges) != len(self.weights):
            raise ValueError("inconsistent cut problem sizes")

    @property
    def n(self) -> int:
        return len(self.cost_f)

    def energy(self, labels) -> float:
        x = np.asarray(labels, bool)
        value = float(np.where(x, self.cost_f, self.cost_b).sum())
        if len(self.edges):
            cut = x[self.edges[:, 0]] != x[self.edges[:, 1]]
            value += float(self.weights[cut].sum())
        return value


@dataclass(frozen=True)
class CutResult:
    labels: np.ndarray
    energy: float
    flow: float


def build_cut_problem(likelihoods, edges, intra_weights,
                      lambda_pairwise: float = DEFAULT_LAMBDA_PAIRWISE,
                      pinned=None) -> CutProblem:
    """Unaries cost_f = 1 - L, cost_b = L; ``pinned`` maps part -> fixed label."""
    lik = np.asarray(likelihoods, float)
    if ((lik < 0) | (lik > 1)).any():
        raise ValueError("likelihoods must lie in [0, 1]")
    cost_f = 1.0 - lik
    cost_b = lik.copy()
    for part, label in (pinned or {}).items():
        if label:
            cost_b[part] = PIN_COST
        else:
            cost_f[part] = PIN_COST
    return CutProblem(cost_f, cost_b, edges, lambda_pairwise * np.asarray(intra_weights, float))


def min_cut(problem: CutProblem) -> CutResult:
    """Exact minimizer; among optimal labelings the one with fewest foreground parts."""
    n = problem.n
    if n == 0:
        return CutResult(np.zeros(0, bool), 0.0, 0.0)
    g = nx.DiGraph()
    src, sink = n, n + 1
    g.add_nodes_from(range(n + 2))
    for i in range(n):
        if problem.cost_b[i] > 0:
            g.add_edge(src, i, capacity=float(problem.cost_b[i]))
        if problem.cost_f[i] > 0:
            g.add_edge(i, sink, capacity=float(problem.cost_f[i]))
    for (a, b), w in zip(problem.edges.tolist(), problem.weights.tolist()):
        if w <= 0:
            continue
        for u, v in ((a, b), (b, a)):
            if g.has_edge(u, v):
                g[u][v]["capacity"] += w
            else:
                g.add_edge(u, v, capacity=w)
    flow_value, flow = nx.maximum_flow(g, src, sink)

    # residual reachability from the source gives the smallest optimal source set
    scale = max(1.0, float(max(problem.cost_f.max(initial=0), problem.cost_b.max(initial=0))))
    eps = 1e-12 * scale
    seen = {src}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v, attrs in g[u].items():
            if v not in seen and attrs["capacity"] - flow[u][v] > eps:
                seen.add(v)
                queue.append(v)
        for v in g.predecessors(u):
            if v not in seen and flow[v][u] > eps:
                seen.add(v)
                queue.append(v)
    labels = np.array([i in seen for i in range(n)], dtype=bool)
    return CutResult(labels, problem.energy(labels), float(flow_value))


def segment(likelihoods, edges, intra_weights, lambda_pairwise: float = DEFAULT_LAMBDA_PAIRWISE,
            pinned=None) -> np.ndarray:
    return min_cut(build_cut_problem(likelihoods, edges, intra_weights,
                                     lambda_pairwise, pinned)).labels

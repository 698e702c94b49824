"""Variational inference for binary pairwise MRFs.

Beliefs maximize the entropy-regularized program

    sum_e <b_e, theta_e> + sum_i <b_i, theta_i> + sum_i c_i H(b_i) + sum_e c_e H(b_e)

over the local polytope.  For binary variables every edge belief is fixed by
the two node marginals and one free entry, and for c_e > 0 that entry has a
closed-form optimum.  The solver therefore works on the node marginals
alone: a damped Newton ascent whose iterates are always primal feasible, so
the objective is non-decreasing from one iteration to the next.

With positive counting numbers the program is strictly concave.  On forests
with Bethe counting numbers (c_e = 1, c_i = 1 - deg(i)) it is concave as well
and its optimum is the exact Gibbs marginals.

``extended_solve`` adds the cross-image term sum_{ij} w_ij sum_y b_i(y) b_j(y)
and maximizes by block coordinate ascent, one image at a time.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import entr, logsumexp

log = logging.getLogger(__name__)

MAX_EXACT_NODES = 20
_TINY = 1e-300


class InferenceError(ValueError):
    """Invalid model or counting numbers for the requested solver mode."""


class ConcavityError(InferenceError):
    """The extended program is not certified strictly concave."""


@dataclass(frozen=True, eq=False)
class BinaryMRF:
    """Binary pairwise MRF.

    ``unary[i, k]`` and ``pairwise[e, k, l]`` are indexed by label index
    k = (y + 1) / 2, so column 1 is y = +1 (foreground).
    """
    unary: np.ndarray
    edges: np.ndarray
    pairwise: np.ndarray
    node_counting: np.ndarray
    edge_counting: np.ndarray

    def __post_init__(self):
        n = len(self.unary)
        object.__setattr__(self, "unary", np.asarray(self.unary, float).reshape(n, 2))
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        m = len(edges)
        object.__setattr__(self, "pairwise", np.asarray(self.pairwise, float).reshape(m, 2, 2))
        object.__setattr__(self, "node_counting",
                           np.broadcast_to(np.asarray(self.node_counting, float), (n,)).copy())
        object.__setattr__(self, "edge_counting",
                           np.broadcast_to(np.asarray(self.edge_counting, float), (m,)).copy())
        if m:
            if (edges < 0).any() or (edges >= n).any():
                raise InferenceError("edge endpoint out of range")
            if (edges[:, 0] == edges[:, 1]).any():
                raise InferenceError("self-loop edge")
            key = np.sort(edges, axis=1)
            if len(np.unique(key, axis=0)) != m:
                raise InferenceError("duplicate edge")

    @property
    def n_nodes(self) -> int:
        return len(self.unary)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def with_counting(self, node=None, edge=None) -> BinaryMRF:
        return replace(self,
                       node_counting=self.node_counting if node is None else node,
                       edge_counting=self.edge_counting if edge is None else edge)

    def bethe(self) -> BinaryMRF:
        return self.with_counting(1.0 - self.degrees(), np.ones(self.n_edges))

    def is_forest(self) -> bool:
        parent = list(range(self.n_nodes))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.edges:
            ra, rb = find(int(a)), find(int(b))
            if ra == rb:
                return False
            parent[ra] = rb
        return True

    @classmethod
    def from_potentials(cls, theta_f, theta_b, edges=(), weights=(),
                        node_counting=1.0, edge_counting=1.0) -> BinaryMRF:
        """Build from foreground/background scores and attractive edge weights."""
        unary = np.column_stack([np.asarray(theta_b, float), np.asarray(theta_f, float)])
        w = np.asarray(weights, float).reshape(-1)
        pair = w[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])
        return cls(unary, np.asarray(edges, np.int64).reshape(-1, 2), pair,
                   node_counting, edge_counting)


@dataclass(frozen=True, eq=False)
class BeliefState:
    singleton: np.ndarray
    pairwise: np.ndarray
    objective: float = float("nan")
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0

    @property
    def foreground(self) -> np.ndarray:
        return self.singleton[:, 1]


# ---------------------------------------------------------------------------
# objective

def variational_objective(mrf: BinaryMRF, beliefs) -> float:
    """Linear terms plus counting-number weighted Shannon entropies (natural log)."""
    single = beliefs.singleton if isinstance(beliefs, BeliefState) else beliefs[0]
    pair = beliefs.pairwise if isinstance(beliefs, BeliefState) else beliefs[1]
    single = np.asarray(single, float)
    pair = np.asarray(pair, float).reshape(-1, 2, 2)
    value = float((mrf.unary * single).sum())
    value += float((mrf.node_counting * entr(single).sum(axis=1)).sum())
    if mrf.n_edges:
        value += float((mrf.pairwise * pair).sum())
        value += float((mrf.edge_counting * entr(pair).sum(axis=(1, 2))).sum())
    return value


# ---------------------------------------------------------------------------
# solver internals

@dataclass(frozen=True, eq=False)
class _Prepared:
    n: int
    ei: np.ndarray
    ej: np.ndarray
    a: np.ndarray            # unary(+1) - unary(-1)
    ci: np.ndarray
    ce: np.ndarray
    t10: np.ndarray          # theta_e[1,0] - theta_e[0,0]
    t01: np.ndarray          # theta_e[0,1] - theta_e[0,0]
    log_k: np.ndarray        # interaction / c_e


def _prepare(mrf: BinaryMRF) -> _Prepared:
    th = mrf.pairwise
    inter = th[:, 1, 1] - th[:, 1, 0] - th[:, 0, 1] + th[:, 0, 0]
    with np.errstate(divide="ignore"):
        log_k = inter / mrf.edge_counting if mrf.n_edges else np.zeros(0)
    return _Prepared(mrf.n_nodes, mrf.edges[:, 0], mrf.edges[:, 1],
                     mrf.unary[:, 1] - mrf.unary[:, 0], mrf.node_counting, mrf.edge_counting,
                     th[:, 1, 0] - th[:, 0, 0], th[:, 0, 1] - th[:, 0, 0], log_k)


def _edge_tables(prep: _Prepared, p: np.ndarray, pm: np.ndarray):
    """Optimal edge beliefs given node marginals; returns (b11, b10, b01, b00)."""
    pi, pj = p[prep.ei], p[prep.ej]
    pmi, pmj = pm[prep.ei], pm[prep.ej]
    s = pi + pj
    q = np.empty_like(pi)
    # q * b00 = K * b10 * b01, solved on the side of K that cannot overflow
    weak = prep.log_k <= 0
    if weak.any():
        k = np.exp(prep.log_k[weak])
        a = 1.0 - k
        bq = (pmi[weak] - pj[weak]) + k * s[weak]
        c0 = -k * pi[weak] * pj[weak]
        disc = np.sqrt(np.maximum(bq * bq - 4.0 * a * c0, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.where(bq >= 0, -2.0 * c0 / (bq + disc), (-bq + disc) / (2.0 * a))
        q[weak] = np.where(np.isfinite(root), root, 0.0)
    strong = ~weak
    if strong.any():
        r = np.exp(-prep.log_k[strong])
        big_b = r * (pmi[strong] - pj[strong]) + s[strong]
        disc = np.sqrt(np.maximum(big_b * big_b - 4.0 * (1.0 - r) * pi[strong] * pj[strong], 0.0))
        q[strong] = 2.0 * pi[strong] * pj[strong] / (big_b + disc)
    lo = np.maximum(0.0, pi - pmj)
    q = np.clip(q, lo, np.minimum(pi, pj))
    b10 = pi - q
    b01 = pj - q
    b00 = pmi - b01
    return (np.maximum(q, _TINY), np.maximum(b10, _TINY), np.maximum(b01, _TINY),
            np.maximum(b00, _TINY))


def _beliefs_from(prep: _Prepared, p, pm):
    single = np.column_stack([pm, p])
    if len(prep.ei):
        b11, b10, b01, b00 = _edge_tables(prep, p, pm)
        pair = np.stack([np.stack([b00, b01], 1), np.stack([b10, b11], 1)], 1)
    else:
        pair = np.zeros((0, 2, 2))
    return single, pair


def _objective(mrf, prep, p, pm) -> float:
    return variational_objective(mrf, _beliefs_from(prep, p, pm))


def _gradient_hessian(prep: _Prepared, p, pm):
    n = prep.n
    with np.errstate(divide="ignore"):
        grad = prep.a + prep.ci * (np.log(np.maximum(pm, _TINY)) - np.log(np.maximum(p, _TINY)))
    hess = np.zeros((n, n))
    hess[np.diag_indices(n)] = -prep.ci * (1.0 / np.maximum(p, _TINY) + 1.0 / np.maximum(pm, _TINY))
    if len(prep.ei):
        b11, b10, b01, b00 = _edge_tables(prep, p, pm)
        c = prep.ce
        gi = prep.t10 + c * (np.log(b00) - np.log(b10))
        gj = prep.t01 + c * (np.log(b00) - np.log(b01))
        grad = grad + np.bincount(prep.ei, gi, n) + np.bincount(prep.ej, gj, n)
        si = 1.0 / b10 + 1.0 / b00
        sj = 1.0 / b01 + 1.0 / b00
        sall = 1.0 / b11 + 1.0 / b10 + 1.0 / b01 + 1.0 / b00
        hii = -c * si + c * si * si / sall
        hjj = -c * sj + c * sj * sj / sall
        hij = -c / b00 + c * si * sj / sall
        flat = hess.reshape(-1)
        flat += np.bincount(prep.ei * (n + 1), hii, n * n)
        flat += np.bincount(prep.ej * (n + 1), hjj, n * n)
        flat += np.bincount(prep.ei * n + prep.ej, hij, n * n)
        flat += np.bincount(prep.ej * n + prep.ei, hij, n * n)
    return grad, hess


def _newton_direction(grad, hess):
    neg = -hess
    scale = np.sqrt(np.maximum(np.diag(neg), _TINY))
    scaled = neg / scale[:, None] / scale[None, :]
    rhs = grad / scale
    mu = 0.0
    eye = np.eye(len(grad))
    for _ in range(30):
        try:
            chol = np.linalg.cholesky(scaled + mu * eye)
            y = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
            return y / scale
        except np.linalg.LinAlgError:
            mu = 1e-10 if mu == 0 else mu * 10
    return grad / np.maximum(np.abs(np.diag(neg)), 1.0)


def _check_mode(mrf: BinaryMRF, mode: str) -> None:
    if mode == "concave":
        if (mrf.node_counting <= 0).any() or (mrf.edge_counting <= 0).any():
            raise InferenceError("concave mode needs positive counting numbers")
    elif mode == "bethe":
        if not mrf.is_forest():
            raise InferenceError("bethe mode is only exact on graphs without cycles")
        if (not np.allclose(mrf.edge_counting, 1.0)
                or not np.allclose(mrf.node_counting, 1.0 - mrf.degrees())):
            raise InferenceError("bethe mode needs c_e = 1 and c_i = 1 - deg(i)")
    else:
        raise InferenceError(f"unknown mode {mode!r}")


def cbp_solve(mrf: BinaryMRF, mode: str = "concave", tolerance: float = 1e-8,
              max_iters: int = 2000, init=None, trace: list | None = None) -> BeliefState:
    """Optimal beliefs of the variational program.

    ``init`` optionally gives starting foreground marginals.  When ``trace`` is
    a list, one ``(iteration, objective, residual)`` row is appended per
    iteration, residual being the largest change of a singleton belief.
    """
    _check_mode(mrf, mode)
    prep = _prepare(mrf)
    n = mrf.n_nodes
    if n == 0:
        return BeliefState(np.zeros((0, 2)), np.zeros((0, 2, 2)), 0.0)
    p = np.full(n, 0.5) if init is None else np.clip(np.asarray(init, float), 1e-6, 1 - 1e-6)
    pm = 1.0 - p
    value = _objective(mrf, prep, p, pm)
    converged = False
    residual = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        grad, hess = _gradient_hessian(prep, p, pm)
        d = _newton_direction(grad, hess)
        slope = float(grad @ d)
        if slope <= 0:
            d, slope = grad, float(grad @ grad)
        # stay strictly inside (0, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(d > 0, pm / d, np.where(d < 0, -p / d, np.inf))
        step = min(1.0, 0.99 * float(room.min()))
        accepted = False
        for _ in range(60):
            cand_p = p + step * d
            cand_pm = pm - step * d
            cand = _objective(mrf, prep, cand_p, cand_pm)
            if cand >= value + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no ascent left at machine precision: judge by the Newton decrement
            residual = float(np.abs(d).max())
            if trace is not None:
                trace.append((it, value, 0.0))
            converged = residual < tolerance or slope <= 1e-12 * (1.0 + abs(value))
            break
        residual = float(np.abs(step * d).max())
        p, pm, value = cand_p, cand_pm, cand
        if trace is not None:
            trace.append((it, value, residual))
        if residual < tolerance:
            converged = True
            break
    if not converged:
        log.warning("cbp_solve stopped after %d iterations (residual %.3g)", it, residual)
    single, pair = _beliefs_from(prep, p, pm)
    return BeliefState(single, pair, value, converged, it, residual)


def stationarity_residual(mrf: BinaryMRF, beliefs: BeliefState) -> float:
    """Largest gradient entry of the reduced objective at ``beliefs``."""
    prep = _prepare(mrf)
    grad, _ = _gradient_hessian(prep, beliefs.singleton[:, 1], beliefs.singleton[:, 0])
    return float(np.abs(grad).max()) if len(grad) else 0.0


def marginalization_residual(beliefs: BeliefState, edges) -> float:
    edges = np.asarray(edges, np.int64).reshape(-1, 2)
    if not len(edges):
        return 0.0
    row = beliefs.pairwise.sum(axis=2) - beliefs.singleton[edges[:, 0]]
    col = beliefs.pairwise.sum(axis=1) - beliefs.singleton[edges[:, 1]]
    return float(max(np.abs(row).max(), np.abs(col).max()))


# ---------------------------------------------------------------------------
# exact inference

def exact_marginals(mrf, coupling: CouplingGraph | None = None) -> np.ndarray:
    """Gibbs marginals by enumeration; with ``coupling``, ``mrf`` is a list of MRFs
    joined by extra potentials w_ij * y_i * y_j."""
    if coupling is not None:
        mrf = union_mrf(mrf, coupling)
    n = mrf.n_nodes
    if n > MAX_EXACT_NODES:
        raise InferenceError(f"exact enumeration limited to {MAX_EXACT_NODES} nodes, got {n}")
    if n == 0:
        return np.zeros((0, 2))
    configs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    score = mrf.unary[np.arange(n), configs].sum(axis=1)
    if mrf.n_edges:
        ei, ej = mrf.edges[:, 0], mrf.edges[:, 1]
        score = score + mrf.pairwise[np.arange(mrf.n_edges), configs[:, ei], configs[:, ej]].sum(axis=1)
    prob = np.exp(score - logsumexp(score))
    fg = prob @ configs
    return np.column_stack([1.0 - fg, fg])


# ---------------------------------------------------------------------------
# cross-image coupling

@dataclass(frozen=True, eq=False)
class CouplingGraph:
    """Weighted edges between nodes of different images.

    ``edges`` rows are ``(image_a, node_a, image_b, node_b)``; ``sizes`` gives
    the node count of each image.
    """
    sizes: tuple[int, ...]
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, np.int64).reshape(-1, 4)
        weights = np.asarray(self.weights, float).reshape(-1)
        if len(edges) != len(weights):
            raise InferenceError("one weight per coupling edge required")
        if (weights < 0).any():
            raise InferenceError("coupling weights must be nonnegative")
        if (edges[:, 0] == edges[:, 2]).any():
            raise InferenceError("coupling edges must join different images")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    def global_endpoints(self):
        off = self.offsets
        return off[self.edges[:, 0]] + self.edges[:, 1], off[self.edges[:, 2]] + self.edges[:, 3]

    def adjacency(self) -> sp.csr_matrix:
        n = int(sum(self.sizes))
        u, v = self.global_endpoints()
        mat = sp.coo_matrix((np.concatenate([self.weights, self.weights]),
                             (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n))
        return mat.tocsr()

    def weighted_degree(self) -> np.ndarray:
        n = int(sum(self.sizes))
        u, v = self.global_endpoints()
        return np.bincount(u, self.weights, n) + np.bincount(v, self.weights, n)


def spectral_radius(adjacency, max_iters: int = 50, rtol: float = 1e-10) -> float:
    """Largest eigenvalue of a symmetric nonnegative matrix by shifted power iteration.

    The shift keeps bipartite spectra (+-lambda) from oscillating.
    """
    mat = sp.csr_matrix(adjacency)
    n = mat.shape[0]
    if n == 0 or mat.nnz == 0:
        return 0.0
    shift = 0.5 * float(np.abs(mat).sum(axis=1).max())
    x = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(max_iters):
        y = mat @ x + shift * x
        new = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
        if abs(new - lam) <= rtol * abs(new):
            lam = new
            break
        lam = new
    return lam - shift


@dataclass(frozen=True)
class Certificate:
    ok: bool
    bound_used: str
    bound: float
    lambda_max: float
    max_degree: float


def concavity_certificate(coupling: CouplingGraph, node_counting, edge_counting=1.0,
                          bound: str = "degree") -> Certificate:
    """Check c_e > 0 and c_i > bound for the extended program.

    ``bound`` selects the maximal weighted degree ("degree") or the power
    iteration estimate of the spectral radius ("eigen").
    """
    lam = spectral_radius(coupling.adjacency())
    deg = coupling.weighted_degree()
    max_deg = float(deg.max()) if len(deg) else 0.0
    if bound == "degree":
        value = max_deg
    elif bound == "eigen":
        value = lam
    else:
        raise InferenceError(f"unknown bound {bound!r}")
    c_i = np.atleast_1d(np.asarray(node_counting, float))
    c_e = np.atleast_1d(np.asarray(edge_counting, float))
    ok = bool((c_i > value).all() and (c_e > 0).all())
    return Certificate(ok, bound, value, lam, max_deg)


def union_mrf(mrfs, coupling: CouplingGraph) -> BinaryMRF:
    """Single MRF over all images with couplings as w * y_i * y_j edges."""
    off = coupling.offsets
    unary = np.concatenate([m.unary for m in mrfs])
    edges = [m.edges + off[k] for k, m in enumerate(mrfs)]
    pair = [m.pairwise for m in mrfs]
    u, v = coupling.global_endpoints()
    edges.append(np.stack([u, v], axis=1))
    pair.append(coupling.weights[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]]))
    c_n = np.concatenate([m.node_counting for m in mrfs])
    c_e = np.concatenate([m.edge_counting for m in mrfs] + [np.ones(len(u))])
    return BinaryMRF(unary, np.concatenate(edges), np.concatenate(pair), c_n, c_e)


def coupling_term(beliefs, coupling: CouplingGraph) -> float:
    """sum over cross edges of w_ij * sum_y b_i(y) b_j(y)."""
    if not len(coupling.weights):
        return 0.0
    e = coupling.edges
    bi = np.stack([beliefs[a].singleton[i] for a, i in zip(e[:, 0], e[:, 1])])
    bj = np.stack([beliefs[b].singleton[j] for b, j in zip(e[:, 2], e[:, 3])])
    return float((coupling.weights * (bi * bj).sum(axis=1)).sum())


def extended_objective(mrfs, beliefs, coupling: CouplingGraph) -> float:
    return (sum(variational_objective(m, b) for m, b in zip(mrfs, beliefs))
            + coupling_term(beliefs, coupling))


def lift_counting(mrfs, coupling: CouplingGraph, bound: str = "degree", eps: float = 0.01):
    """Raise every c_i to at least (1 + eps) * bound so the certificate holds."""
    cert = concavity_certificate(coupling, np.inf, 1.0, bound)
    floor = (1.0 + eps) * cert.bound
    return [m.with_counting(np.maximum(m.node_counting, floor)) for m in mrfs]


@dataclass(frozen=True, eq=False)
class ExtendedResult:
    beliefs: list
    objective: float
    rounds: int
    converged: bool
    history: list = field(default_factory=list)
    certificate: Certificate | None = None
    mrfs: list = field(default_factory=list)


def extended_solve(mrfs, coupling: CouplingGraph, tolerance: float = 1e-8,
                   max_rounds: int = 100, lift: bool = True, bound: str = "degree",
                   enforce: bool = True, init=None, inner_tolerance: float | None = None,
                   max_iters: int = 2000) -> ExtendedResult:
    """Block coordinate ascent over per-image beliefs of the coupled program.

    Each block update solves one image with local potentials shifted by
    w_ij * b_j(y) from its coupled neighbors' current beliefs.  Rounds stop
    once the extended objective changes by less than ``tolerance``.
    """
    mrfs = list(mrfs)
    if tuple(m.n_nodes for m in mrfs) != coupling.sizes:
        raise InferenceError("coupling sizes do not match the MRFs")
    if lift:
        mrfs = lift_counting(mrfs, coupling, bound)
    all_c = np.concatenate([m.node_counting for m in mrfs]) if mrfs else np.zeros(0)
    all_ce = np.concatenate([m.edge_counting for m in mrfs] + [np.ones(1)])
    cert = concavity_certificate(coupling, all_c, all_ce, bound)
    if enforce and not cert.ok:
        raise ConcavityError(
            f"counting numbers do not exceed the {bound} bound {cert.bound:.4g}")
    inner_tol = tolerance if inner_tolerance is None else inner_tolerance

    if init is None:
        p = [np.full(m.n_nodes, 0.5) for m in mrfs]
    else:
        p = [np.asarray(v, float).copy() for v in init]
    beliefs = []
    for m, pk in zip(mrfs, p):
        prep = _prepare(m)
        beliefs.append(BeliefState(*_beliefs_from(prep, pk, 1.0 - pk)))

    e = coupling.edges
    w = coupling.weights
    history = [extended_objective(mrfs, beliefs, coupling)]
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        for k, m in enumerate(mrfs):
            shift = np.zeros((m.n_nodes, 2))
            on_a = e[:, 0] == k
            on_b = e[:, 2] == k
            for mask, own, other_img, other_node in ((on_a, 1, 2, 3), (on_b, 3, 0, 1)):
                if not mask.any():
                    continue
                nb = np.stack([beliefs[oi].singleton[oj]
                               for oi, oj in zip(e[mask, other_img], e[mask, other_node])])
                np.add.at(shift, e[mask, own], w[mask, None] * nb)
            block = replace(m, unary=m.unary + shift)
            beliefs[k] = cbp_solve(block, "concave", inner_tol, max_iters,
                                   init=beliefs[k].singleton[:, 1])
        history.append(extended_objective(mrfs, beliefs, coupling))
        if abs(history[-1] - history[-2]) < tolerance:
            converged = True
            break
    beliefs = [replace(b, objective=variational_objective(m, b)) for m, b in zip(mrfs, beliefs)]
    return ExtendedResult(beliefs, history[-1], rounds, converged, history, cert, mrfs)

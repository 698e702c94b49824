"""Independent reference computations used by the test suite."""
from __future__ import annotations

import itertools

import numpy as np


def xlogx(x):
    x = np.asarray(x, float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def brute_marginals(unary, edges, pairwise):
    """Foreground marginals of exp(sum unary + sum pairwise) by enumeration."""
    n = len(unary)
    total = 0.0
    fg = np.zeros(n)
    for config in itertools.product((0, 1), repeat=n):
        s = sum(unary[i][config[i]] for i in range(n))
        s += sum(pairwise[e][config[a]][config[b]] for e, (a, b) in enumerate(edges))
        w = np.exp(s)
        total += w
        fg += w * np.array(config)
    return fg / total


def program_value(unary, edges, pairwise, c_node, c_edge, p, q, coupling=()):
    """Objective of the (optionally coupled) program at node marginals p and
    edge entries q = b_e(+1, +1).  ``coupling`` holds (i, j, w) over global nodes."""
    unary = np.asarray(unary, float)
    value = float((unary[:, 1] * p + unary[:, 0] * (1 - p)).sum())
    value -= float((np.asarray(c_node) * (xlogx(p) + xlogx(1 - p))).sum())
    for e, (i, j) in enumerate(edges):
        b = np.array([[1 - p[i] - p[j] + q[e], p[j] - q[e]], [p[i] - q[e], q[e]]])
        value += float((np.asarray(pairwise[e]) * b).sum())
        value -= float(np.asarray(c_edge)[e] * xlogx(b).sum())
    for i, j, w in coupling:
        value += w * (p[i] * p[j] + (1 - p[i]) * (1 - p[j]))
    return value


def projected_gradient_ascent(unary, edges, pairwise, c_node, c_edge, coupling=(),
                              p0=None, iters=200000, eps=1e-12, tol=1e-14, seed=0):
    """Maximize the program over (p, q) by projected gradient ascent with a
    backtracking, self-enlarging step.  Returns (value, p)."""
    unary = np.asarray(unary, float)
    edges = np.asarray(edges, np.int64).reshape(-1, 2)
    pairwise = np.asarray(pairwise, float).reshape(-1, 2, 2)
    n, m = len(unary), len(edges)
    c_node = np.broadcast_to(np.asarray(c_node, float), (n,))
    c_edge = np.broadcast_to(np.asarray(c_edge, float), (m,))
    ei, ej = edges[:, 0], edges[:, 1]
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.2, 0.8, n) if p0 is None else np.asarray(p0, float).copy()
    q = np.minimum(p[ei], p[ej]) * 0.5 + np.maximum(0, p[ei] + p[ej] - 1) * 0.5

    def project(p, q):
        # p kept 2*eps inside the box so the q interval below is never empty
        p = np.clip(p, 2 * eps, 1 - 2 * eps)
        lo = np.maximum(eps, p[ei] + p[ej] - 1 + eps)
        hi = np.minimum(p[ei], p[ej]) - eps
        return p, np.clip(q, lo, np.maximum(lo, hi))

    def value(p, q):
        return program_value(unary, edges, pairwise, c_node, c_edge, p, q, coupling)

    def grad(p, q):
        gp = unary[:, 1] - unary[:, 0] + c_node * (np.log(1 - p) - np.log(p))
        b11, b10, b01 = q, p[ei] - q, p[ej] - q
        b00 = 1 - p[ei] - p[ej] + q
        gp = gp + np.bincount(ei, pairwise[:, 1, 0] - pairwise[:, 0, 0]
                              + c_edge * (np.log(b00) - np.log(b10)), n)
        gp = gp + np.bincount(ej, pairwise[:, 0, 1] - pairwise[:, 0, 0]
                              + c_edge * (np.log(b00) - np.log(b01)), n)
        gq = (pairwise[:, 1, 1] - pairwise[:, 1, 0] - pairwise[:, 0, 1] + pairwise[:, 0, 0]
              - c_edge * (np.log(b11) - np.log(b10) - np.log(b01) + np.log(b00)))
        for i, j, w in coupling:
            gp[i] += w * (2 * p[j] - 1)
            gp[j] += w * (2 * p[i] - 1)
        return gp, gq

    p, q = project(p, q)
    f = value(p, q)
    step = 1e-2
    for _ in range(iters):
        gp, gq = grad(p, q)
        while True:
            np_, nq = project(p + step * gp, q + step * gq)
            nf = value(np_, nq)
            moved = np.concatenate([np_ - p, nq - q])
            if np.isfinite(nf) and nf >= f + 1e-4 * float(moved @ np.concatenate([gp, gq])):
                break
            step *= 0.5
            if step < 1e-20:
                return f, p
        done = abs(nf - f) <= tol * (1 + abs(f)) and np.abs(moved).max() < 1e-11
        p, q, f = np_, nq, nf
        step *= 2.0
        if done:
            break
    return f, p


def brute_min_energy(cost_f, cost_b, edges, weights):
    """Exhaustive minimum of sum unary + sum_{cut edges} weight (True = foreground)."""
    n = len(cost_f)
    best, arg = np.inf, None
    configs = np.array(list(itertools.product((False, True), repeat=n)), dtype=bool)
    unary = np.where(configs, np.asarray(cost_f), np.asarray(cost_b)).sum(axis=1)
    edges = np.asarray(edges, np.int64).reshape(-1, 2)
    if len(edges):
        cut = configs[:, edges[:, 0]] != configs[:, edges[:, 1]]
        unary = unary + (cut * np.asarray(weights)).sum(axis=1)
    k = int(np.argmin(unary))
    best, arg = unary[k], configs[k]
    return float(best), arg

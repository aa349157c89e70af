"""Shared generators for the test suite."""
from __future__ import annotations

import numpy as np

from spncf.circuit import Circuit, CircuitBuilder, GaussianLeaf, ProductNode, SumNode


def random_nodes(rng: np.random.Generator, dim: int, num_classes: int = 2,
                 max_nodes: int = 20, sigma_range=(0.6, 1.5), mean_range=(-2.0, 2.0)):
    """Random valid class-partitioned circuit as a mutable (nodes, root) pair."""
    while True:
        b = CircuitBuilder(dim)

        def leaf(v):
            return b.leaf(v, rng.uniform(*mean_range), rng.uniform(*sigma_range))

        def sub(scope, depth):
            if len(scope) == 1:
                if depth < 2 and rng.random() < 0.4:
                    kids = [leaf(scope[0]) for _ in range(2)]
                    return b.sum(kids, rng.dirichlet(np.ones(2)))
                return leaf(scope[0])
            if depth < 2 and rng.random() < 0.3:
                kids = [sub(scope, depth + 1) for _ in range(2)]
                return b.sum(kids, rng.dirichlet(np.ones(2)))
            perm = list(rng.permutation(scope))
            k = int(rng.integers(2, len(perm) + 1))
            cuts = sorted(rng.choice(np.arange(1, len(perm)), size=k - 1, replace=False))
            parts = [sorted(int(v) for v in p) for p in np.split(np.array(perm), cuts)]
            return b.product([sub(p, depth + 1) for p in parts])

        kids = [sub(list(range(dim)), 0) for _ in range(num_classes)]
        root = b.sum(kids, rng.dirichlet(np.ones(num_classes)))
        if len(b.nodes) <= max_nodes:
            return list(b.nodes), root


def random_circuit(rng: np.random.Generator, dim: int, **kw) -> Circuit:
    nodes, root = random_nodes(rng, dim, **kw)
    return Circuit(nodes, root, dim)


def mirror_circuit(sigma: float = 1.0, priors=(0.5, 0.5)) -> Circuit:
    """One variable; class 0 is N(-1, sigma^2), class 1 is N(+1, sigma^2)."""
    b = CircuitBuilder(1)
    a, c = b.leaf(0, -1.0, sigma), b.leaf(0, 1.0, sigma)
    return b.build(b.sum([a, c], list(priors)))


def reachable(nodes, root):
    seen, stack = set(), [root]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        n = nodes[i]
        if not isinstance(n, GaussianLeaf):
            stack.extend(n.children)
    return seen


def grid_log_marginal(circuit: Circuit, h: float = 0.5, lo: float = -10.0, hi: float = 10.0,
                      chunk: int = 200_000) -> float:
    """Trapezoid quadrature of exp(log p) over [lo, hi]^N; returns the integral."""
    axis = np.arange(lo, hi + h / 2, h)
    w1 = np.full(len(axis), h)
    w1[[0, -1]] = h / 2
    N = circuit.dimension
    mesh = np.stack(np.meshgrid(*([axis] * N), indexing="ij"), axis=-1).reshape(-1, N)
    wts = np.ones(1)
    for _ in range(N):
        wts = np.multiply.outer(wts, w1).ravel()
    total = 0.0
    for s in range(0, len(mesh), chunk):
        lp = circuit.log_marginal_batch(mesh[s:s + chunk])
        total += float(np.sum(np.exp(lp) * wts[s:s + chunk]))
    return total


__all__ = ["random_nodes", "random_circuit", "mirror_circuit", "reachable",
           "grid_log_marginal", "SumNode", "ProductNode", "GaussianLeaf"]

"""Gaussian expectations by deterministic quadrature.

Two rule families are provided: fully symmetric sigma-point rules (degree 9,
and degree 5 for high dimensions) and tensor-product Gauss-Hermite rules,
which serve as the accuracy reference.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .exceptions import ConfigurationError, DivergenceError

MAX_TENSOR_NODES = 20**4


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes (K, N) for the standard normal and weights summing to one."""

    nodes: np.ndarray
    weights: np.ndarray
    degree: int
    name: str = ""

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def size(self) -> int:
        return self.nodes.shape[0]


def _gaussian_moment(k: int) -> float:
    if k % 2:
        return 0.0
    return float(math.prod(range(k - 1, 0, -2))) if k else 1.0


def _orbit(radii, N):
    """All sign changes and placements of ``radii`` into ``N`` coordinates."""
    pts = set()
    k = len(radii)
    for pos in itertools.permutations(range(N), k):
        for signs in itertools.product((1.0, -1.0), repeat=k):
            x = [0.0] * N
            for p, r, s in zip(pos, radii, signs):
                x[p] = s * r
            pts.add(tuple(x))
    return np.array(sorted(pts), dtype=float).reshape(-1, N)


def _even_partitions(max_degree, max_parts):
    """Exponent patterns (even parts, nonincreasing) up to ``max_degree``."""
    out = [()]

    def extend(prefix, remaining, cap):
        for e in range(min(cap, remaining), 1, -1):
            if e % 2:
                continue
            p = prefix + (e,)
            if len(p) <= max_parts:
                out.append(p)
                extend(p, remaining - e, e)

    extend((), max_degree - (max_degree % 2), max_degree)
    return out


def _fully_symmetric(N, radii, generators, degree, name):
    orbits = [_orbit(tuple(radii[i] for i in g), N) if g else np.zeros((1, N)) for g in generators]
    patterns = _even_partitions(degree - 1 if degree % 2 else degree, N)
    M = np.empty((len(patterns), len(orbits)))
    t = np.empty(len(patterns))
    for i, p in enumerate(patterns):
        t[i] = math.prod(_gaussian_moment(e) for e in p)
        for j, o in enumerate(orbits):
            mon = np.ones(o.shape[0])
            for c, e in enumerate(p):
                mon = mon * o[:, c] ** e
            M[i, j] = mon.sum()
    w, *_ = np.linalg.lstsq(M, t, rcond=None)
    if np.max(np.abs(M @ w - t)) > 1e-9:
        raise ConfigurationError(f"no exact {name} rule for N={N}")
    nodes = np.vstack(orbits)
    weights = np.concatenate([np.full(o.shape[0], wj) for o, wj in zip(orbits, w)])
    return QuadratureRule(nodes=nodes, weights=weights, degree=degree, name=name)


@functools.lru_cache(maxsize=None)
def degree9_rule(N: int) -> QuadratureRule:
    """Fully symmetric degree-9 rule for N(0, I_N), 1 <= N <= 6.

    Generators place the two positive 5-point Gauss-Hermite abscissae on up to
    four axes; weights solve the symmetric moment equations.  Node counts are
    5, 25, 77, 193, 421, 825 for N = 1..6.  Some weights are negative for N >= 4.
    """
    if not 1 <= int(N) <= 6:
        raise ConfigurationError(f"degree9_rule supports 1 <= N <= 6, got {N}")
    N = int(N)
    radii = (math.sqrt(5 - math.sqrt(10)), math.sqrt(5 + math.sqrt(10)))
    gens = [(), (0,), (1,), (0, 0), (1, 1), (0, 1), (0, 0, 0), (1, 1, 1), (0, 0, 0, 0)]
    gens = [g for g in gens if len(g) <= N]
    return _fully_symmetric(N, radii, gens, 9, f"degree9-N{N}")


@functools.lru_cache(maxsize=None)
def degree5_rule(N: int) -> QuadratureRule:
    """Fully symmetric degree-5 rule with ``2 N^2 + 1`` nodes, any N >= 1."""
    N = int(N)
    if N < 1:
        raise ConfigurationError("dimension must be >= 1")
    gens = [(), (0,)] + ([(0, 0)] if N > 1 else [])
    if N == 1:
        return gauss_hermite_tensor(1, 3)
    return _fully_symmetric(N, (math.sqrt(3.0),), gens, 5, f"degree5-N{N}")


@functools.lru_cache(maxsize=None)
def gauss_hermite_tensor(N: int, order: int) -> QuadratureRule:
    """Tensor product of ``order``-point probabilists' Gauss-Hermite rules."""
    N, order = int(N), int(order)
    if N < 1 or order < 1:
        raise ConfigurationError("dimension and order must be >= 1")
    if order > 20 or order**N > MAX_TENSOR_NODES:
        raise ConfigurationError(f"tensor rule with {order}^{N} nodes exceeds the node budget")
    x, w = hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * N), indexing="ij")
    wgrids = np.meshgrid(*([w] * N), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return QuadratureRule(nodes=nodes, weights=weights, degree=2 * order - 1, name=f"gh{order}-N{N}")


def default_rule(N: int) -> QuadratureRule:
    """Rule used by inference: order-10 tensor GH for N <= 2, degree 9 up to 6, degree 5 beyond."""
    if N <= 2:
        return gauss_hermite_tensor(N, 10)
    if N <= 6:
        return degree9_rule(N)
    return degree5_rule(N)


def gaussian_expectation(f, mean, var, rule: QuadratureRule):
    """``E[f(g)]`` for ``g ~ N(mean, diag(var))``.

    ``f`` receives an array of shape (K, N) of evaluation points and must return
    K values (or K x ... arrays, which are reduced over the first axis).
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    if mean.shape != (rule.dim,) or var.shape != (rule.dim,):
        raise ConfigurationError("mean/var dimensions do not match the rule")
    if np.any(var <= 0):
        raise ConfigurationError("variances must be positive")
    pts = mean + np.sqrt(var) * rule.nodes
    vals = np.asarray(f(pts), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DivergenceError("integrand is not finite at a quadrature node")
    return np.tensordot(rule.weights, vals, axes=(0, 0))

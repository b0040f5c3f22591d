"""Binomial scenario tree for the driving Brownian motion.

Level k holds 2^k nodes; node (k, j) branches to (k+1, 2j) with increment
+sqrt(dt) and (k+1, 2j+1) with -sqrt(dt), each with probability 1/2, so
E[dB | node] = 0 and E[dB^2 | node] = dt hold exactly and conditional
expectations are two-point averages.  Adapted processes are stored level-major
(one contiguous array per level), which is also what makes adaptedness
structural: a node's value cannot reference anything off its own path.

A Monte Carlo path bundle (Gaussian increments, fixed seed, antithetic
pairs) exists for forward-only decay sweeps; everything involving duality or
conditional expectations runs on the tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import mesh as msh


@dataclass(frozen=True)
class ScenarioTree:
    """Binomial discretization of one Brownian motion on [0, T] with K steps.

    K = 8 (255 interior nodes) keeps tree solves at N = 31, n = 1 well under
    a million unknowns.
    """

    K: int = 8
    T: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need at least one time step")
        if self.T <= 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    def n_nodes(self, level: int) -> int:
        if not 0 <= level <= self.K:
            raise ValueError(f"level {level} outside 0..{self.K}")
        return 1 << level

    @property
    def total_nodes(self) -> int:
        return (1 << (self.K + 1)) - 1

    def t(self, level: int) -> float:
        return level * self.dt

    def increments(self, level: int) -> np.ndarray:
        """dB on the edges leaving level `level`, indexed like level+1 nodes."""
        out = np.empty(self.n_nodes(level + 1))
        out[0::2] = self.sqrt_dt
        out[1::2] = -self.sqrt_dt
        return out

    def manifest(self) -> dict:
        return {
            "mode": "binomial-tree",
            "K": self.K,
            "T": self.T,
            "dt": self.dt,
            "node_count": self.total_nodes,
        }


class AdaptedField:
    """One grid function per node, level-major; adapted by construction."""

    def __init__(self, tree: ScenarioTree, levels: Sequence[np.ndarray],
                 mesh: msh.MeshSpec, extents: tuple[str, ...]):
        self.tree = tree
        self.mesh = mesh
        self.extents = tuple(extents)
        shape = mesh.shape(self.extents)
        self.levels = []
        for k, arr in enumerate(levels):
            arr = np.asarray(arr, dtype=float)
            want = (tree.n_nodes(k),) + shape
            if arr.shape != want:
                raise ValueError(f"level {k} has shape {arr.shape}, expected {want}")
            self.levels.append(arr)

    @classmethod
    def zeros(cls, tree: ScenarioTree, mesh: msh.MeshSpec, extents,
              n_levels: int | None = None) -> "AdaptedField":
        n_levels = tree.K + 1 if n_levels is None else n_levels
        shape = mesh.shape(tuple(extents))
        levels = [np.zeros((tree.n_nodes(k),) + shape) for k in range(n_levels)]
        return cls(tree, levels, mesh, tuple(extents))

    @classmethod
    def from_random(cls, tree: ScenarioTree, mesh: msh.MeshSpec, extents,
                    rng: np.random.Generator, n_levels: int | None = None,
                    scale: float = 1.0) -> "AdaptedField":
        n_levels = tree.K + 1 if n_levels is None else n_levels
        shape = mesh.shape(tuple(extents))
        levels = [
            scale * rng.standard_normal((tree.n_nodes(k),) + shape)
            for k in range(n_levels)
        ]
        return cls(tree, levels, mesh, tuple(extents))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def copy(self) -> "AdaptedField":
        return AdaptedField(
            self.tree, [a.copy() for a in self.levels], self.mesh, self.extents
        )

    def node(self, level: int, j: int) -> np.ndarray:
        return self.levels[level][j]


def cond_expectation(f: AdaptedField, level: int) -> np.ndarray:
    """E[f_{level+1} | nodes at `level`]: exact two-child average."""
    if level + 1 >= f.n_levels:
        raise ValueError(f"field has no level {level + 1}; leaves have no children")
    child = f.levels[level + 1]
    return 0.5 * (child[0::2] + child[1::2])


def martingale_part(f: AdaptedField, level: int) -> np.ndarray:
    """Z with f_{level+1} = E[f_{level+1}|.] + Z dB, exact on the binomial tree."""
    child = f.levels[level + 1]
    return (child[0::2] - child[1::2]) / (2.0 * f.tree.sqrt_dt)


def expectation_at(f: AdaptedField, level: int) -> np.ndarray:
    """Probability-weighted (uniform 2^{-level}) average over level nodes."""
    return f.levels[level].mean(axis=0)


def expect_inner_at(f: AdaptedField, g: AdaptedField, level: int,
                    weight: np.ndarray | float = 1.0) -> float:
    """E <w f, g>_{L2h} at one level."""
    hn = f.mesh.h ** f.mesh.n
    prod = weight * f.levels[level] * g.levels[level]
    return float(hn * prod.sum() / f.tree.n_nodes(level))


def expect_norm_sq_at(f: AdaptedField, level: int,
                      weight: np.ndarray | float = 1.0) -> float:
    hn = f.mesh.h ** f.mesh.n
    prod = weight * f.levels[level] ** 2
    return float(hn * prod.sum() / f.tree.n_nodes(level))


def space_time_expectation(
    f: AdaptedField,
    weight_at: Callable[[float], np.ndarray | float] | None = None,
    other: AdaptedField | None = None,
) -> float:
    """E int_Q w(t) f g dt with weights at left endpoints t_k, k = 0..K-1.

    States carry K+1 levels but only levels 0..K-1 enter the time integral
    (the adaptedness convention); control-like fields carry exactly K levels.
    """
    tree = f.tree
    hn = f.mesh.h ** f.mesh.n
    upto = min(f.n_levels, tree.K)
    g = other if other is not None else f
    total = 0.0
    for k in range(upto):
        w = 1.0 if weight_at is None else weight_at(tree.t(k))
        prod = w * f.levels[k] * g.levels[k]
        total += tree.dt * hn * float(prod.sum()) / tree.n_nodes(k)
    return total


def path_values(f: AdaptedField, leaf: int) -> list[np.ndarray]:
    """Values along the root-to-leaf path (for enumeration oracles)."""
    out = []
    j = leaf
    for level in range(f.n_levels - 1, -1, -1):
        out.append(f.levels[level][j])
        j >>= 1
    return out[::-1]


@dataclass(frozen=True)
class PathBundle:
    """Gaussian-increment Monte Carlo paths with antithetic pairing."""

    K: int
    T: float
    n_paths: int
    seed: int
    antithetic: bool = True

    @property
    def dt(self) -> float:
        return self.T / self.K

    def increments(self) -> np.ndarray:
        """(n_paths, K) array of Brownian increments; fixed by the seed."""
        rng = np.random.default_rng(self.seed)
        if self.antithetic:
            half = (self.n_paths + 1) // 2
            base = rng.standard_normal((half, self.K)) * math.sqrt(self.dt)
            full = np.concatenate([base, -base], axis=0)[: self.n_paths]
            return full
        return rng.standard_normal((self.n_paths, self.K)) * math.sqrt(self.dt)

    def manifest(self) -> dict:
        return {
            "mode": "monte-carlo",
            "K": self.K,
            "T": self.T,
            "dt": self.dt,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "antithetic": self.antithetic,
        }

"""Bootstrap weight samplers, stratified block assignment and weight expansion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; every random draw in the package flows through one."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class BootstrapAlpha:
    """Block weights: ``S x Dirichlet(1, ..., 1)`` or ``Multinomial(S; 1/S, ...)``."""

    alpha: np.ndarray
    kind: str = "dirichlet"

    @property
    def S(self) -> int:
        return self.alpha.shape[-1]

    def __array__(self, dtype=None, copy=None):
        return self.alpha if dtype is None else self.alpha.astype(dtype)


@dataclass(frozen=True)
class BlockAssignment:
    """Map ``u`` from sample index to block index in ``[0, S)``."""

    u: np.ndarray
    S: int

    def __post_init__(self):
        u = np.asarray(self.u)
        if u.ndim != 1 or (u.size and (u.min() < 0 or u.max() >= self.S)):
            raise ShapeError(f"block indices must lie in [0, {self.S})")

    @property
    def n(self) -> int:
        return self.u.size

    @property
    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.u, minlength=self.S)

    def blocks(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.u == s) for s in range(self.S)]


def sample_dirichlet_alpha(S: int, rng: np.random.Generator, size: int | None = None) -> BootstrapAlpha:
    """Exact ``S x Dirichlet(1,...,1)`` via normalized unit exponentials.

    With ``size`` the result holds ``size`` independent draws as rows.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    shape = (S,) if size is None else (size, S)
    z = rng.standard_exponential(shape)
    return BootstrapAlpha(S * z / z.sum(axis=-1, keepdims=True), "dirichlet")


def sample_multinomial_alpha(S: int, rng: np.random.Generator, size: int | None = None) -> BootstrapAlpha:
    """Block nonparametric bootstrap counts: S draws over S equiprobable cells."""
    if S < 1:
        raise ValueError("S must be at least 1")
    counts = rng.multinomial(S, np.full(S, 1.0 / S), size=size)
    return BootstrapAlpha(counts.astype(float), "multinomial")


def assign_blocks(labels, S: int, rng: np.random.Generator, n: int | None = None) -> BlockAssignment:
    """Stratified round-robin assignment of ``n`` samples to ``S`` blocks.

    Samples are shuffled within each class and the classes are laid end to
    end; position ``j`` of that sequence goes to block ``order[j % S]`` for a
    shuffled block ``order``. Each class is then a contiguous run of the cycle,
    so its per-block counts differ by at most one, and so do total block sizes.
    Without labels (regression) this is a plain shuffled round-robin.
    """
    if labels is None:
        if n is None:
            raise ValueError("n is required when no labels are given")
        labels = np.zeros(n, dtype=int)
    labels = np.asarray(labels)
    n = labels.size
    if not 1 <= S <= n:
        raise ValueError(f"need 1 <= S <= n for non-empty blocks, got S={S}, n={n}")
    sequence = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    order = rng.permutation(S)
    u = np.empty(n, dtype=np.int64)
    u[sequence] = order[np.arange(n) % S]
    return BlockAssignment(u, S)


def expand_weights(alpha, assignment: BlockAssignment) -> np.ndarray:
    """Per-sample weights ``w_i = alpha[u(i)]``."""
    a = np.asarray(alpha, dtype=float)
    if a.shape[-1] != assignment.S:
        raise ShapeError(f"alpha has {a.shape[-1]} entries but the assignment has {assignment.S} blocks")
    return a[..., assignment.u]


def sample_resample_indices(n: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Indices of an i.i.d. with-replacement resample of size ``n``."""
    return rng.integers(0, n, size=(n,) if size is None else (size, n))


def sample_rwb_weights(n: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Per-sample random weights ``n x Dirichlet(1,...,1)`` (non-block RWB)."""
    return sample_dirichlet_alpha(n, rng, size).alpha

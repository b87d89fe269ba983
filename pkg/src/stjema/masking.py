"""Contiguous block masks over nodes and adjacency submatrices.

Masks are stored as index ranges and expanded to binary arrays only when
applied. Convention: a mask value of 1 keeps an entry for the context, 0 hides
it (the hidden block is the reconstruction target).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class NodeBlockMask:
    lo: int
    hi: int
    n: int
    ratio: float = 0.0

    @property
    def size(self) -> int:
        return self.hi - self.lo

    def block(self) -> np.ndarray:
        """Boolean ``(N,)`` indicator of the hidden block."""
        out = np.zeros(self.n, dtype=bool)
        out[self.lo:self.hi] = True
        return out

    def keep(self) -> np.ndarray:
        """Binary keep-vector: the row pattern of the ``N x d`` node mask."""
        return (~self.block()).astype(np.float64)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(~self.block())


@dataclass(frozen=True)
class AdjBlockMask:
    rows: tuple[int, int]
    cols: tuple[int, int]
    n: int
    ratio: float = 0.0

    def block(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=bool)
        out[self.rows[0]:self.rows[1], self.cols[0]:self.cols[1]] = True
        return out

    def keep(self) -> np.ndarray:
        return (~self.block()).astype(np.float64)


@dataclass(frozen=True)
class BlockMaskSet:
    node_masks: tuple
    adj_masks: tuple
    t: int = 0

    @property
    def k(self) -> int:
        return len(self.node_masks)

    def node_blocks(self) -> np.ndarray:
        """``(K, N)`` boolean block indicators."""
        return np.stack([m.block() for m in self.node_masks])

    def adj_blocks(self) -> np.ndarray:
        return np.stack([m.block() for m in self.adj_masks])

    def node_keep(self) -> np.ndarray:
        """Intersection of all node masks as a ``(N,)`` 0/1 vector."""
        return (~self.node_blocks().any(axis=0)).astype(np.float64)

    def adj_keep(self) -> np.ndarray:
        return (~self.adj_blocks().any(axis=0)).astype(np.float64)


def block_length(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 1e-9))


def _check_ratios(n: int, alpha_min: float, alpha_max: float) -> None:
    if not 0.0 < alpha_min < alpha_max < 1.0:
        raise ConfigError(f"need 0 < alpha_min < alpha_max < 1, got ({alpha_min}, {alpha_max})")
    if block_length(alpha_min, n) < 1:
        raise ConfigError(f"floor(alpha_min * N) = 0 for N={n}, alpha_min={alpha_min}")


def _draw_block(n: int, alpha_min: float, alpha_max: float, rng) -> tuple[int, int, float]:
    ratio = float(rng.uniform(alpha_min, alpha_max))
    length = block_length(ratio, n)
    lo = int(rng.integers(0, n - length + 1))
    return lo, lo + length, ratio


def sample_mask_set(
    n: int,
    k: int,
    alpha_min: float = 0.10,
    alpha_max: float = 0.30,
    rng: np.random.Generator | None = None,
    t: int = 0,
) -> BlockMaskSet:
    """Draw ``k`` node blocks and ``k`` adjacency blocks, each with a fresh ratio.

    The whole set is redrawn if the node blocks cover every node or the
    adjacency blocks cover every entry.
    """
    if k < 1:
        raise ConfigError("K must be >= 1")
    _check_ratios(n, alpha_min, alpha_max)
    rng = rng if rng is not None else np.random.default_rng()
    for _ in range(MAX_ATTEMPTS):
        nodes, adjs = [], []
        for _ in range(k):
            lo, hi, ratio = _draw_block(n, alpha_min, alpha_max, rng)
            nodes.append(NodeBlockMask(lo, hi, n, ratio))
        for _ in range(k):
            ratio = float(rng.uniform(alpha_min, alpha_max))
            length = block_length(ratio, n)
            r0 = int(rng.integers(0, n - length + 1))
            c0 = int(rng.integers(0, n - length + 1))
            adjs.append(AdjBlockMask((r0, r0 + length), (c0, c0 + length), n, ratio))
        masks = BlockMaskSet(tuple(nodes), tuple(adjs), t)
        if masks.node_keep().any() and masks.adj_keep().any():
            return masks
    raise ConfigError(f"impossible-context: no valid mask set after {MAX_ATTEMPTS} attempts")


def _node_masks(masks) -> Sequence[NodeBlockMask]:
    return masks.node_masks if isinstance(masks, BlockMaskSet) else masks


def _adj_masks(masks) -> Sequence[AdjBlockMask]:
    return masks.adj_masks if isinstance(masks, BlockMaskSet) else masks


def apply_node_context(x: np.ndarray, masks) -> np.ndarray:
    """``X ⊙ ∩_k M_X^(k)``: zero every row that lies in any block."""
    ms = _node_masks(masks)
    x = np.asarray(x)
    for m in ms:
        if m.n != x.shape[-2]:
            raise ValueError(f"mask built for N={m.n}, features have {x.shape[-2]} rows")
    keep = np.ones(x.shape[-2])
    for m in ms:
        keep = keep * m.keep()
    return x * keep[:, None]


def apply_adj_context(a: np.ndarray, masks) -> np.ndarray:
    """``A ⊙ ∩_k M_A^(k)``: zero every entry inside any submatrix block."""
    ms = _adj_masks(masks)
    a = np.asarray(a)
    for m in ms:
        if m.n != a.shape[-1] or a.shape[-1] != a.shape[-2]:
            raise ValueError(f"mask built for N={m.n}, adjacency is {a.shape}")
    keep = np.ones(a.shape[-2:])
    for m in ms:
        keep = keep * m.keep()
    return a * keep


def target_rows(z: np.ndarray, mask: NodeBlockMask) -> np.ndarray:
    """``Z ⊙ (1 - M^(k))``: rows of block ``k`` survive, the rest are zeroed."""
    z = np.asarray(z)
    if mask.n != z.shape[-2]:
        raise ValueError(f"mask built for N={mask.n}, representation has {z.shape[-2]} rows")
    return z * mask.block()[:, None]


def context_rows(z: np.ndarray, mask: NodeBlockMask) -> np.ndarray:
    """``Z ⊙ M^(k)``, the complement of :func:`target_rows`."""
    z = np.asarray(z)
    if mask.n != z.shape[-2]:
        raise ValueError(f"mask built for N={mask.n}, representation has {z.shape[-2]} rows")
    return z * mask.keep()[:, None]


def sample_mask_arrays(
    batch_shape: tuple,
    n: int,
    k: int,
    alpha_min: float,
    alpha_max: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Independent mask sets for every ``(subject, timestep)`` cell.

    Returns boolean node blocks ``batch_shape + (K, N)`` and adjacency blocks
    ``batch_shape + (K, N, N)``.
    """
    node = np.zeros(batch_shape + (k, n), dtype=bool)
    adj = np.zeros(batch_shape + (k, n, n), dtype=bool)
    for idx in np.ndindex(*batch_shape):
        ms = sample_mask_set(n, k, alpha_min, alpha_max, rng, t=idx[-1] if idx else 0)
        for j, m in enumerate(ms.node_masks):
            node[idx + (j, slice(m.lo, m.hi))] = True
        for j, m in enumerate(ms.adj_masks):
            adj[idx + (j, slice(*m.rows), slice(*m.cols))] = True
    return node, adj

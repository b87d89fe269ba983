"""Spatial and temporal latent reconstruction losses and the EMA target update.

All loss functions accept arbitrary leading batch axes. Node blocks are
boolean ``(..., K, N)`` arrays and adjacency blocks ``(..., K, N, N)``; ``True``
marks an entry hidden from the context (the reconstruction target). Per-cell
losses are averaged over the K masks; within a block, MSE is normalized by
``rows * d`` and BCE by the block's entry count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .model import ENC, TGT, ModelConfig, encode, make_decoder
from .nn.autograd import Tensor, as_tensor, concat, grad_enabled, linear, no_grad
from .nn.layers import neighbor_matrix
from .nn.params import ParamStore

PROB_CLIP = 1e-7
Decoder = Callable[[Tensor], Tensor]


# -- reconstruction criteria -----------------------------------------------------

def block_mse(pred: Tensor, target, node_blocks: np.ndarray) -> Tensor:
    """Mean over K of the squared error restricted to each node block.

    ``pred`` is ``(..., K, N, D)``; ``target`` is ``(..., N, D)`` and is
    compared against every mask's decoding.
    """
    blocks = np.asarray(node_blocks, dtype=np.float64)
    d = pred.shape[-1]
    rows = blocks.sum(axis=-1)
    diff = (pred - as_tensor(target).expand_dims(-3)) * blocks[..., None]
    per_mask = (diff * diff).sum(axis=(-2, -1)) * (1.0 / (np.maximum(rows, 1.0) * d))
    return per_mask.mean(axis=-1)


def block_bce(prob: Tensor, adj, adj_blocks: np.ndarray) -> Tensor:
    """Mean over K of binary cross-entropy restricted to each adjacency block."""
    blocks = np.asarray(adj_blocks, dtype=np.float64)
    y = np.asarray(adj, dtype=np.float64)
    p = as_tensor(prob).clip(PROB_CLIP, 1.0 - PROB_CLIP)
    bce = -(p.log() * y + (1.0 - p).log() * (1.0 - y))
    count = np.maximum(blocks.sum(axis=(-2, -1)), 1.0)
    per_mask = (bce.expand_dims(-3) * blocks).sum(axis=(-2, -1)) * (1.0 / count)
    return per_mask.mean(axis=-1)


def context_keep(node_blocks: np.ndarray) -> np.ndarray:
    """Intersection of the K node masks as a 0/1 array ``(..., N)``."""
    return (~np.asarray(node_blocks, dtype=bool).any(axis=-2)).astype(np.float64)


# -- spatial reconstruction --------------------------------------------------------------

def fill_targets(z_cxt: Tensor, fill, node_blocks: np.ndarray) -> Tensor:
    """``Z_cxt + fill ⊙ (1 - M^(k))`` for every k: shape ``(..., K, N, D)``.

    ``fill`` is the mask token ``(D,)`` or per-node values ``(..., N, D)``.
    """
    blocks = np.asarray(node_blocks, dtype=np.float64)[..., None]
    fill = as_tensor(fill)
    if fill.ndim >= 2:
        fill = fill.expand_dims(-3)
    return as_tensor(z_cxt).expand_dims(-3) + fill * blocks


def spatial_node_loss(z, z_tar, node_blocks, mask_token, ws_v, decoder: Decoder) -> Tensor:
    """Per-cell spatial node loss from the context encoding ``z``."""
    z_proj = linear(as_tensor(z), as_tensor(ws_v))
    z_cxt = z_proj * context_keep(node_blocks)[..., None]
    decoded = decoder(fill_targets(z_cxt, mask_token, node_blocks))
    return block_mse(decoded, z_tar, node_blocks)


def edge_embedding(z, ws_e, decoder: Decoder) -> Tensor:
    """``H = g_edge(W_S^E Z)``."""
    return decoder(linear(as_tensor(z), as_tensor(ws_e)))


def spatial_adj_prob(h: Tensor) -> Tensor:
    return (h @ h.T).sigmoid()


def spatial_adj_loss(z, adj, adj_blocks, ws_e, decoder: Decoder) -> Tensor:
    return block_bce(spatial_adj_prob(edge_embedding(z, ws_e, decoder)), adj, adj_blocks)


# -- temporal reconstruction ----------------------------------------------------------------

@dataclass(frozen=True)
class TemporalPair:
    t_a: int
    t_b: int
    t: int


def min_gap(window: int, stride: int) -> float:
    """``d_min = (window / stride + 1) / 2``."""
    return 0.5 * (window / stride + 1.0)


def temporal_range(t: int, n_windows: int, window: int, stride: int) -> tuple[int, int] | None:
    """``(max t_a, min t_b)`` for 1-based target ``t``; ``None`` if infeasible."""
    d = min_gap(window, stride)
    lo_max = math.floor(t - d)
    hi_min = math.ceil(t + d)
    if lo_max < 1 or hi_min > n_windows:
        return None
    return lo_max, hi_min


def sample_temporal_pair(t: int, n_windows: int, window: int, stride: int, rng) -> TemporalPair:
    """``t_a ~ U{1..floor(t - d_min)}``, ``t_b ~ U{ceil(t + d_min)..T_G}`` (1-based)."""
    rng_ = temporal_range(t, n_windows, window, stride)
    if rng_ is None:
        raise ConfigError(f"timestep {t} has no admissible (t_a, t_b) for T_G={n_windows}")
    lo_max, hi_min = rng_
    t_a = int(rng.integers(1, lo_max + 1))
    t_b = int(rng.integers(hi_min, n_windows + 1))
    return TemporalPair(t_a, t_b, t)


def sample_temporal_indices(batch: int, n_windows: int, window: int, stride: int, rng):
    """0-based ``t_a``, ``t_b`` arrays ``(B, T_G)`` plus the feasibility mask ``(T_G,)``."""
    ta = np.zeros((batch, n_windows), dtype=np.int64)
    tb = np.zeros((batch, n_windows), dtype=np.int64)
    valid = np.zeros(n_windows, dtype=bool)
    for t in range(1, n_windows + 1):
        rng_ = temporal_range(t, n_windows, window, stride)
        if rng_ is None:
            continue
        valid[t - 1] = True
        lo_max, hi_min = rng_
        ta[:, t - 1] = rng.integers(1, lo_max + 1, size=batch) - 1
        tb[:, t - 1] = rng.integers(hi_min, n_windows + 1, size=batch) - 1
    return ta, tb, valid


def temporal_fill(zt_a, zt_b, w_t) -> Tensor:
    """``W_T [Z~(t_a) || Z~(t_b)]``."""
    return linear(concat([as_tensor(zt_a), as_tensor(zt_b)], axis=-1), as_tensor(w_t))


def temporal_node_loss(zt_a, zt_b, zt_cxt, z_tar, node_blocks, w_t, decoder: Decoder) -> Tensor:
    """Per-cell temporal node loss.

    ``zt_a``/``zt_b`` are projected context encodings at ``t_a``/``t_b``;
    ``zt_cxt`` is the masked projected context at ``t``.
    """
    fill = temporal_fill(zt_a, zt_b, w_t)
    decoded = decoder(fill_targets(zt_cxt, fill, node_blocks))
    return block_mse(decoded, z_tar, node_blocks)


def temporal_adj_prob(h_a, h_b) -> Tensor:
    """``(sig(H_a H_b^T) + sig(H_b H_a^T)) / 2``; symmetric by construction."""
    h_a, h_b = as_tensor(h_a), as_tensor(h_b)
    return ((h_a @ h_b.T).sigmoid() + (h_b @ h_a.T).sigmoid()) * 0.5


def temporal_adj_loss(h_a, h_b, adj, adj_blocks) -> Tensor:
    return block_bce(temporal_adj_prob(h_a, h_b), adj, adj_blocks)


# -- combined objective --------------------------------------------------------------------

@dataclass
class LossWeights:
    gamma: float = 0.5
    lambda_node: float = 1.0
    lambda_adj: float = 1e-4
    use_node: bool = True
    use_edge: bool = True
    use_spatial: bool = True
    use_temporal: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not (self.use_node or self.use_edge) or not (self.use_spatial or self.use_temporal):
            raise ConfigError("empty objective: every loss term is switched off")


@dataclass
class LossBreakdown:
    node_spat: float
    adj_spat: float
    node_temp: float
    adj_temp: float
    total: float
    weights: dict = field(default_factory=dict)
    target_std: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "node_spat": self.node_spat,
            "adj_spat": self.adj_spat,
            "node_temp": self.node_temp,
            "adj_temp": self.adj_temp,
            "total": self.total,
            "target_std": self.target_std,
        }


def combined_loss(l_spat, l_temp, gamma: float):
    """``gamma * L_spat + (1 - gamma) * L_temp``."""
    if not (np.all(np.isfinite(np.asarray(getattr(l_spat, "data", l_spat))))
            and np.all(np.isfinite(np.asarray(getattr(l_temp, "data", l_temp))))):
        raise NumericError("non-finite loss component")
    return l_spat * gamma + l_temp * (1.0 - gamma)


def combine_breakdown(parts: dict, w: LossWeights) -> float:
    spat = w.lambda_node * parts["node_spat"] * w.use_node + w.lambda_adj * parts["adj_spat"] * w.use_edge
    temp = w.lambda_node * parts["node_temp"] * w.use_node + w.lambda_adj * parts["adj_temp"] * w.use_edge
    return w.gamma * spat * w.use_spatial + (1.0 - w.gamma) * temp * w.use_temporal


@dataclass
class Batch:
    """One pre-training step's inputs for ``B`` subjects with ``T`` windows."""

    u: np.ndarray  # (B, T, N)
    adj: np.ndarray  # (B, T, N, N)
    node_blocks: np.ndarray  # (B, T, K, N) bool
    adj_blocks: np.ndarray  # (B, T, K, N, N) bool
    t_a: np.ndarray  # (B, T) 0-based
    t_b: np.ndarray  # (B, T) 0-based
    temporal_valid: np.ndarray  # (T,) bool
    timesteps: np.ndarray | None = None  # subset of 0-based t summed over; None = all


def _cell_mean(per_cell: Tensor, weights: np.ndarray) -> Tensor:
    total = weights.sum()
    if total == 0:
        return Tensor(np.zeros(()))
    return (per_cell * (weights / total)).sum()


def stjema_loss(p, batch: Batch, cfg: ModelConfig, w: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Full objective for one batch.

    The target branch runs under :func:`no_grad`, so ``tgt.*`` never
    receives gradient. Timestep sums are taken as means over the selected
    cells; the temporal terms average over feasible timesteps only.
    """
    w.validate()
    b, t = batch.u.shape[:2]
    sel = np.zeros(t, dtype=bool)
    sel[slice(None) if batch.timesteps is None else batch.timesteps] = True
    w_spat = np.broadcast_to(sel, (b, t)).astype(np.float64)
    w_temp = np.broadcast_to(sel & batch.temporal_valid, (b, t)).astype(np.float64)

    adj = np.asarray(batch.adj, dtype=np.float64)
    keep = context_keep(batch.node_blocks)
    adj_keep = (~batch.adj_blocks.any(axis=-3)).astype(np.float64)
    nbr_cxt = neighbor_matrix(adj * adj_keep)

    z = encode(p, ENC, cfg, batch.u, nbr_cxt, keep)
    with no_grad():
        z_tar = encode(p, TGT, cfg, batch.u, neighbor_matrix(adj)).data
    target_std = float(z_tar.std())

    node_nbr = nbr_cxt[..., None, :, :]
    dec_node = make_decoder(p, "dec_node.", cfg, node_nbr if cfg.decoder == "gin" else None)
    dec_edge = make_decoder(p, "dec_edge.", cfg, nbr_cxt if cfg.decoder == "gin" else None)

    zt = linear(z, p["proj.ws_v"])
    zt_cxt = zt * keep[..., None]
    bidx = np.arange(b)[:, None]

    def node_spat():
        decoded = dec_node(fill_targets(zt_cxt, p["mask_token"], batch.node_blocks))
        return _cell_mean(block_mse(decoded, z_tar, batch.node_blocks), w_spat)

    h_cache = {}

    def edge_h():
        # keyed by grad mode: a copy computed for reporting only must not feed an active term
        mode = grad_enabled()
        if mode not in h_cache:
            h_cache[mode] = edge_embedding(z, p["proj.ws_e"], dec_edge)
        return h_cache[mode]

    def adj_spat():
        return _cell_mean(block_bce(spatial_adj_prob(edge_h()), adj, batch.adj_blocks), w_spat)

    def node_temp():
        fill = temporal_fill(zt[bidx, batch.t_a], zt[bidx, batch.t_b], p["proj.w_t"])
        decoded = dec_node(fill_targets(zt_cxt, fill, batch.node_blocks))
        return _cell_mean(block_mse(decoded, z_tar, batch.node_blocks), w_temp)

    def adj_temp():
        h = edge_h()
        prob = temporal_adj_prob(h[bidx, batch.t_a], h[bidx, batch.t_b])
        return _cell_mean(block_bce(prob, adj, batch.adj_blocks), w_temp)

    terms = {
        "node_spat": (node_spat, w.use_node and w.use_spatial, w.gamma * w.lambda_node),
        "adj_spat": (adj_spat, w.use_edge and w.use_spatial, w.gamma * w.lambda_adj),
        "node_temp": (node_temp, w.use_node and w.use_temporal, (1 - w.gamma) * w.lambda_node),
        "adj_temp": (adj_temp, w.use_edge and w.use_temporal, (1 - w.gamma) * w.lambda_adj),
    }
    total = Tensor(np.zeros(()))
    values = {}
    for name, (fn, active, coef) in terms.items():
        if active and coef != 0.0:
            val = fn()
            total = total + val * coef
        else:
            with no_grad():
                val = fn()
        values[name] = float(val.data)
    if not np.isfinite(float(total.data)):
        raise NumericError(f"non-finite loss: {values}")
    breakdown = LossBreakdown(
        total=float(total.data),
        weights={"gamma": w.gamma, "lambda_node": w.lambda_node, "lambda_adj": w.lambda_adj},
        target_std=target_std,
        **values,
    )
    return total, breakdown


# -- EMA ------------------------------------------------------------------------------

@dataclass
class EmaState:
    beta: float = 0.996

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("EMA decay must lie in [0, 1]")


def ema_update(store: ParamStore, ema: EmaState | float) -> None:
    """``tgt <- beta * tgt + (1 - beta) * enc`` for every encoder tensor, in place."""
    beta = ema.beta if isinstance(ema, EmaState) else float(ema)
    if not 0.0 <= beta <= 1.0:
        raise ConfigError("EMA decay must lie in [0, 1]")
    enc = store.names(["encoder"])
    tgt = store.names(["target"])
    if sorted(n[len(ENC):] for n in enc) != sorted(n[len(TGT):] for n in tgt):
        raise ConfigError("context and target encoders have different parameter names")
    for name in enc:
        tname = TGT + name[len(ENC):]
        src, dst = store.arrays[name], store.arrays[tname]
        if src.shape != dst.shape:
            raise ConfigError(f"shape mismatch between {name} and {tname}")
        if beta == 1.0:
            continue
        if beta == 0.0:
            store.arrays[tname] = src.copy()
        else:
            store.arrays[tname] = beta * dst + (1.0 - beta) * src

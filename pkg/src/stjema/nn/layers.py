"""Forward primitives: feature construction, GRU, GIN, MLP-Mixer and SERO.

Every function takes a mapping ``p`` of named :class:`Tensor` parameters and a
name prefix, so the same code serves the context encoder (``enc.``), its EMA
target copy (``tgt.``) and the decoders. Node representations are stored
row-per-node, ``(..., N, d)``; SERO transposes at its boundary.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autograd import Tensor, as_tensor, layer_norm, linear, stack
from .params import ParamStore, uniform_init

Params = Mapping[str, Tensor]

LN_EPS = 1e-5


def sigmoid(x):
    return as_tensor(x).sigmoid()


def relu(x):
    return as_tensor(x).relu()


def gelu(x):
    return as_tensor(x).gelu()


# -- node features ---------------------------------------------------------

def node_features(eta: Tensor, weight: Tensor, n_nodes: int) -> Tensor:
    """``x_i(t) = W [e_i || eta(t)]`` for every node at once.

    ``eta`` has shape ``(..., d_eta)``; returns ``(..., N, d_v)``. With a one-hot
    ``e_i`` the spatial part is just column ``i`` of ``W``.
    """
    eta = as_tensor(eta)
    weight = as_tensor(weight)
    if weight.shape[1] != n_nodes + eta.shape[-1]:
        raise ValueError(
            f"W has {weight.shape[1]} columns, expected N + d_eta = {n_nodes + eta.shape[-1]}"
        )
    spatial = weight[:, :n_nodes].T
    temporal = linear(eta, weight[:, n_nodes:])
    return spatial + temporal.expand_dims(-2)


# -- GRU ---------------------------------------------------------------------

GRU_NAMES = ("w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_r", "b_z", "b_in", "b_hn")


def init_gru(store: ParamStore, prefix: str, n_in: int, d_hidden: int, role: str, rng) -> None:
    for gate in "rzn":
        store.add(f"{prefix}w_i{gate}", uniform_init(rng, (d_hidden, n_in), d_hidden), role)
    for gate in "rzn":
        store.add(f"{prefix}w_h{gate}", uniform_init(rng, (d_hidden, d_hidden), d_hidden), role)
    for b in ("b_r", "b_z", "b_in", "b_hn"):
        store.add(f"{prefix}{b}", uniform_init(rng, (d_hidden,), d_hidden), role)


def gru_step(h: Tensor, u: Tensor, p: Params, prefix: str = "") -> Tensor:
    """One GRU cell update (reset/update gates, tanh candidate)."""
    return _gru_cell(
        h,
        linear(u, p[prefix + "w_ir"]),
        linear(u, p[prefix + "w_iz"]),
        linear(u, p[prefix + "w_in"]),
        p,
        prefix,
    )


def _gru_cell(h, xr, xz, xn, p, prefix):
    r = (xr + linear(h, p[prefix + "w_hr"]) + p[prefix + "b_r"]).sigmoid()
    z = (xz + linear(h, p[prefix + "w_hz"]) + p[prefix + "b_z"]).sigmoid()
    n = (xn + p[prefix + "b_in"] + r * (linear(h, p[prefix + "w_hn"]) + p[prefix + "b_hn"])).tanh()
    return (1.0 - z) * n + z * h


def gru_sequence(u: Tensor, p: Params, prefix: str = "") -> Tensor:
    """Run the GRU over ``u`` of shape ``(B, T, N)`` from ``h(0) = 0``.

    Returns the stacked hidden states ``eta`` with shape ``(B, T, d_eta)``.
    """
    u = as_tensor(u)
    d = p[prefix + "w_hr"].shape[0]
    xr = linear(u, p[prefix + "w_ir"])
    xz = linear(u, p[prefix + "w_iz"])
    xn = linear(u, p[prefix + "w_in"])
    h = Tensor(np.zeros(u.shape[:-2] + (d,)))
    states = []
    for t in range(u.shape[-2]):
        h = _gru_cell(h, xr[..., t, :], xz[..., t, :], xn[..., t, :], p, prefix)
        states.append(h)
    return stack(states, axis=-2)


# -- GIN ---------------------------------------------------------------------

def init_mlp(store, prefix, d_in, d_hidden, d_out, role, rng) -> None:
    store.add(prefix + "w1", uniform_init(rng, (d_hidden, d_in), d_in), role)
    store.add(prefix + "b1", uniform_init(rng, (d_hidden,), d_in), role)
    store.add(prefix + "w2", uniform_init(rng, (d_out, d_hidden), d_hidden), role)
    store.add(prefix + "b2", uniform_init(rng, (d_out,), d_hidden), role)


def mlp(x: Tensor, p: Params, prefix: str) -> Tensor:
    h = linear(x, p[prefix + "w1"], p[prefix + "b1"]).relu()
    return linear(h, p[prefix + "w2"], p[prefix + "b2"])


def neighbor_matrix(adj: np.ndarray) -> np.ndarray:
    """Drop self-loops; the GIN self term is carried by ``(1 + eps)`` alone."""
    out = np.array(adj, dtype=np.float64)
    idx = np.arange(out.shape[-1])
    out[..., idx, idx] = 0.0
    return out


def gin_layer(z: Tensor, nbr, eps, update: Callable[[Tensor], Tensor]) -> Tensor:
    """``z_i' = update((1 + eps) z_i + sum_{j in N(i)} z_j)``.

    ``nbr`` is the neighbor matrix (no self-loops, see :func:`neighbor_matrix`).
    """
    z = as_tensor(z)
    return update(z * (1.0 + as_tensor(eps)) + as_tensor(nbr) @ z)


def init_gin_stack(store, prefix, dims, d_hidden, role, rng) -> None:
    for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f"{prefix}gin{layer}.eps", np.zeros(()), role)
        init_mlp(store, f"{prefix}gin{layer}.", d_in, d_hidden, d_out, role, rng)


def gin_stack(x: Tensor, nbr, p: Params, prefix: str, n_layers: int) -> Tensor:
    """Stacked GIN layers; ReLU between layers, linear output on the last."""
    z = x
    for layer in range(n_layers):
        pre = f"{prefix}gin{layer}."
        z = gin_layer(z, nbr, p[pre + "eps"], lambda h, pre=pre: mlp(h, p, pre))
        if layer < n_layers - 1:
            z = z.relu()
    return z


# -- MLP-Mixer -------------------------------------------------------------------

def init_mixer(store, prefix, n_tokens, d, n_hidden, d_hidden, role, rng) -> None:
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}{ln}.scale", np.ones(d), role)
        store.add(f"{prefix}{ln}.shift", np.zeros(d), role)
    store.add(prefix + "w1", uniform_init(rng, (n_hidden, n_tokens), n_tokens), role)
    store.add(prefix + "w2", uniform_init(rng, (n_tokens, n_hidden), n_hidden), role)
    store.add(prefix + "w3", uniform_init(rng, (d_hidden, d), d), role)
    store.add(prefix + "w4", uniform_init(rng, (d, d_hidden), d_hidden), role)


def mixer_block(z: Tensor, p: Params, prefix: str) -> Tensor:
    """Token mixing across nodes, then channel mixing across features.

    ``z`` has shape ``(..., N, D)``. Both sub-blocks are residual and
    bias-free; layer norms act over the feature axis.
    """
    z = as_tensor(z)
    ln = layer_norm(z, p[prefix + "ln1.scale"], p[prefix + "ln1.shift"], LN_EPS)
    cols = ln.swapaxes(-1, -2)
    mixed = linear(linear(cols, p[prefix + "w1"]).gelu(), p[prefix + "w2"])
    y = z + mixed.swapaxes(-1, -2)
    ln2 = layer_norm(y, p[prefix + "ln2.scale"], p[prefix + "ln2.shift"], LN_EPS)
    return y + linear(linear(ln2, p[prefix + "w3"]).gelu(), p[prefix + "w4"])


def init_channel_mlp(store, prefix, d, d_hidden, role, rng) -> None:
    store.add(f"{prefix}ln.scale", np.ones(d), role)
    store.add(f"{prefix}ln.shift", np.zeros(d), role)
    store.add(prefix + "w3", uniform_init(rng, (d_hidden, d), d), role)
    store.add(prefix + "w4", uniform_init(rng, (d, d_hidden), d_hidden), role)


def channel_mlp(z: Tensor, p: Params, prefix: str) -> Tensor:
    """Per-node residual MLP: the decoder ablation without any node interaction."""
    z = as_tensor(z)
    ln = layer_norm(z, p[prefix + "ln.scale"], p[prefix + "ln.shift"], LN_EPS)
    return z + linear(linear(ln, p[prefix + "w3"]).gelu(), p[prefix + "w4"])


# -- SERO readout ------------------------------------------------------------------

def init_sero(store, prefix, n_nodes, d, rng, role="readout") -> None:
    store.add(prefix + "w1", uniform_init(rng, (d, d), d), role)
    store.add(prefix + "w2", uniform_init(rng, (n_nodes, d), d), role)


def sero_readout(z_cols: Tensor, w1, w2) -> tuple[Tensor, Tensor]:
    """Squeeze-excitation readout over nodes.

    ``z_cols`` holds one node per column, shape ``(..., d, N)``. Returns the
    graph vector ``Z a`` of shape ``(..., d)`` and the node attention ``a``
    of shape ``(..., N)``.
    """
    z_cols = as_tensor(z_cols)
    n = z_cols.shape[-1]
    squeeze = z_cols @ Tensor(np.full(n, 1.0 / n))
    attn = linear(linear(squeeze, as_tensor(w1)).relu(), as_tensor(w2)).sigmoid()
    pooled = (z_cols * attn.expand_dims(-2)).sum(axis=-1)
    return pooled, attn

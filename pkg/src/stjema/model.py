"""Network topology: context/target encoders, node/edge decoders, projections."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError
from .nn.autograd import Tensor
from .nn.layers import (
    channel_mlp,
    gin_layer,
    gin_stack,
    gru_sequence,
    init_channel_mlp,
    init_gin_stack,
    init_gru,
    init_mixer,
    init_mlp,
    init_sero,
    mixer_block,
    mlp,
    node_features,
)
from .nn.params import ParamStore, uniform_init

DECODERS = ("mixer", "mlp", "gin")
ENC, TGT = "enc.", "tgt."


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    d_eta: int = 8
    d_v: int = 16
    d_enc: int = 16
    d_dec: int = 16
    gin_layers: int = 4
    gin_hidden: int = 32
    token_hidden: int = 16
    channel_hidden: int = 32
    decoder: str = "mixer"

    def validate(self) -> None:
        if self.d_dec != self.d_enc:
            raise ConfigError("decoder outputs are compared with target encodings, so d_dec must equal d_enc")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.n_nodes < 2 or self.gin_layers < 1:
            raise ConfigError("need n_nodes >= 2 and gin_layers >= 1")


def init_encoder(store: ParamStore, cfg: ModelConfig, prefix: str, role: str, rng) -> None:
    d_in = cfg.n_nodes + cfg.d_eta
    store.add(prefix + "feat.w", uniform_init(rng, (cfg.d_v, d_in), d_in), role)
    init_gru(store, prefix + "gru.", cfg.n_nodes, cfg.d_eta, role, rng)
    dims = [cfg.d_v] + [cfg.d_enc] * cfg.gin_layers
    init_gin_stack(store, prefix, dims, cfg.gin_hidden, role, rng)


def _init_decoder(store, cfg: ModelConfig, prefix: str, role: str, rng) -> None:
    d = cfg.d_dec
    if cfg.decoder == "mixer":
        init_mixer(store, prefix, cfg.n_nodes, d, cfg.token_hidden, cfg.channel_hidden, role, rng)
    elif cfg.decoder == "mlp":
        init_channel_mlp(store, prefix, d, cfg.channel_hidden, role, rng)
    else:
        store.add(prefix + "gin.eps", np.zeros(()), role)
        init_mlp(store, prefix + "gin.", d, cfg.channel_hidden, d, role, rng)


def init_pretrain_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """Fresh parameters for pre-training; the target encoder starts as a copy."""
    cfg.validate()
    store = ParamStore()
    init_encoder(store, cfg, ENC, "encoder", rng)
    for name in store.names(["encoder"]):
        store.add(TGT + name[len(ENC):], store[name], "target")
    _init_decoder(store, cfg, "dec_node.", "decoder_node", rng)
    _init_decoder(store, cfg, "dec_edge.", "decoder_edge", rng)
    store.add("proj.ws_v", uniform_init(rng, (cfg.d_dec, cfg.d_enc), cfg.d_enc), "projection")
    store.add("proj.ws_e", uniform_init(rng, (cfg.d_dec, cfg.d_enc), cfg.d_enc), "projection")
    store.add("proj.w_t", uniform_init(rng, (cfg.d_dec, 2 * cfg.d_dec), 2 * cfg.d_dec), "projection")
    store.add("mask_token", rng.normal(0.0, 0.02, size=cfg.d_dec), "mask_token")
    return store


def init_downstream_params(
    cfg: ModelConfig, n_outputs: int, rng: np.random.Generator, encoder: Mapping[str, np.ndarray] | None = None
) -> ParamStore:
    """Encoder (``enc.*``), SERO readout, feature standardizer and affine head.

    ``encoder`` maps ``enc.*`` names to pretrained arrays; ``None`` keeps the
    random initialization.
    """
    cfg.validate()
    store = ParamStore()
    init_encoder(store, cfg, ENC, "encoder", rng)
    if encoder is not None:
        store.update(encoder)
    init_sero(store, "readout.", cfg.n_nodes, cfg.d_enc, rng)
    store.add("head.w", uniform_init(rng, (n_outputs, cfg.d_enc), cfg.d_enc), "head")
    store.add("head.b", np.zeros(n_outputs), "head")
    # fixed train-split statistics of the pooled graph vector, filled in before training
    store.add("norm.mu", np.zeros(cfg.d_enc), "feature_norm")
    store.add("norm.sd", np.ones(cfg.d_enc), "feature_norm")
    return store


def target_encoder_arrays(store: ParamStore) -> dict[str, np.ndarray]:
    """The EMA encoder renamed to ``enc.*``; this is what downstream tasks load."""
    return {ENC + n[len(TGT):]: store[n].copy() for n in store.names(["target"])}


def encode(p: Mapping[str, Tensor], prefix: str, cfg: ModelConfig, u, nbr, node_keep=None) -> Tensor:
    """Node representations ``(B, T, N, d_enc)`` for a batch of dynamic graphs.

    ``u`` is the GRU input ``(B, T, N)``, ``nbr`` the neighbor matrices
    ``(B, T, N, N)`` and ``node_keep`` an optional ``(B, T, N)`` 0/1 context
    mask applied to the node features.
    """
    eta = gru_sequence(u, p, prefix + "gru.")
    x = node_features(eta, p[prefix + "feat.w"], cfg.n_nodes)
    if node_keep is not None:
        x = x * np.asarray(node_keep, dtype=np.float64)[..., None]
    return gin_stack(x, nbr, p, prefix, cfg.gin_layers)


def make_decoder(p: Mapping[str, Tensor], prefix: str, cfg: ModelConfig, nbr=None) -> Callable[[Tensor], Tensor]:
    """Bind decoder parameters; ``nbr`` is only used by the GIN decoder.

    For the GIN decoder ``nbr`` must broadcast against the decoder input's
    leading axes (callers insert the mask axis).
    """
    if cfg.decoder == "mixer":
        return lambda z: mixer_block(z, p, prefix)
    if cfg.decoder == "mlp":
        return lambda z: channel_mlp(z, p, prefix)
    if nbr is None:
        raise ConfigError("GIN decoder needs the context adjacency")
    return lambda z: gin_layer(z, nbr, p[prefix + "gin.eps"], lambda h: mlp(h, p, prefix + "gin."))

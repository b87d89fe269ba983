import math

import numpy as np
import pytest

from stjema.errors import ConfigError, NumericError
from stjema.model import ENC, TGT, ModelConfig, encode, init_pretrain_params
from stjema.nn import ParamStore, Tensor, grad_check, value_and_grad
from stjema.nn.layers import neighbor_matrix
from stjema.objective import (
    EmaState,
    LossWeights,
    block_bce,
    block_mse,
    combine_breakdown,
    combined_loss,
    ema_update,
    min_gap,
    sample_temporal_indices,
    sample_temporal_pair,
    spatial_adj_loss,
    spatial_adj_prob,
    spatial_node_loss,
    stjema_loss,
    temporal_adj_loss,
    temporal_adj_prob,
    temporal_node_loss,
    temporal_range,
)
from stjema.optim import AdamW

from support import tiny_problem

ident = lambda z: z


def one_block(n, lo, hi, k=1):
    b = np.zeros((k, n), dtype=bool)
    b[:, lo:hi] = True
    return b


# -- spatial node loss -------------------------------------------------------------------

def test_node_loss_zero_when_decoder_hits_targets(rng):
    z_tar = rng.normal(size=(6, 3))
    blocks = one_block(6, 1, 4, k=2)
    loss = spatial_node_loss(rng.normal(size=(6, 3)), z_tar, blocks, np.zeros(3), np.eye(3),
                             lambda z: Tensor(np.broadcast_to(z_tar, z.shape)))
    assert float(loss.data) == 0.0


def test_node_loss_constant_output(rng):
    c = 0.7
    blocks = one_block(6, 2, 5)
    loss = spatial_node_loss(rng.normal(size=(6, 3)), np.zeros((6, 3)), blocks, np.zeros(3), np.eye(3),
                             lambda z: Tensor(np.full(z.shape, c)))
    assert float(loss.data) == pytest.approx(c * c, abs=1e-15)


def test_zero_decoder_anchors(rng):
    """Zero projections, zero mask token and identity decoder: node loss 0, BCE ln 2."""
    n, d = 7, 3
    z = rng.normal(size=(n, d))
    blocks = one_block(n, 2, 5, k=2)
    node = spatial_node_loss(z, np.zeros((n, d)), blocks, np.zeros(d), np.zeros((d, d)), ident)
    assert float(node.data) == 0.0
    adj = (rng.uniform(size=(n, n)) < 0.5).astype(float)
    adj_blocks = np.zeros((2, n, n), dtype=bool)
    adj_blocks[0, 1:4, 2:5] = True
    adj_blocks[1, 0:2, 0:2] = True
    edge = spatial_adj_loss(z, adj, adj_blocks, np.zeros((d, d)), ident)
    assert abs(float(edge.data) - math.log(2)) < 1e-9
    h = np.zeros((n, d))
    assert abs(float(temporal_adj_loss(h, h, adj, adj_blocks).data) - math.log(2)) < 1e-9
    tnode = temporal_node_loss(z, z, np.zeros((n, d)), np.zeros((n, d)), blocks, np.zeros((d, 2 * d)), ident)
    assert float(tnode.data) == 0.0


def test_block_normalization():
    pred = Tensor(np.ones((2, 4, 3)))
    blocks = np.array([[1, 1, 0, 0], [0, 0, 0, 1]], dtype=bool)
    # block 0: 2 rows * 3 dims of error 1; block 1: 1 row; both per-element means are 1
    assert float(block_mse(pred, np.zeros((4, 3)), blocks).data) == pytest.approx(1.0)
    target = np.zeros((4, 3))
    target[3] = 2.0
    assert float(block_mse(pred, target, blocks).data) == pytest.approx(1.0)


def test_bce_matches_targets_after_clip():
    adj = np.array([[1.0, 0.0], [0.0, 1.0]])
    blocks = np.ones((1, 2, 2), dtype=bool)
    assert float(block_bce(Tensor(adj), adj, blocks).data) <= 1e-6


def test_spatial_prob_diagonal_at_least_half(rng):
    p = spatial_adj_prob(Tensor(rng.normal(size=(9, 4)))).data
    assert np.all(np.diag(p) >= 0.5)


def test_mask_order_invariance(rng):
    z, z_tar = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    blocks = np.zeros((3, 8), dtype=bool)
    blocks[0, 0:2], blocks[1, 3:6], blocks[2, 5:8] = True, True, True
    dec = lambda x: x * 0.5 + 0.1
    a = spatial_node_loss(z, z_tar, blocks, np.ones(3), np.eye(3), dec)
    b = spatial_node_loss(z, z_tar, blocks[::-1], np.ones(3), np.eye(3), dec)
    assert float(a.data) == pytest.approx(float(b.data), abs=1e-15)


# -- temporal -------------------------------------------------------------------------

def test_min_gap_and_ranges():
    assert min_gap(50, 16) == 2.0625
    assert temporal_range(10, 21, 50, 16) == (7, 13)
    assert temporal_range(1, 21, 50, 16) is None
    assert temporal_range(21, 21, 50, 16) is None


def test_temporal_pair_support(rng):
    seen_a, seen_b = set(), set()
    for _ in range(2000):
        pair = sample_temporal_pair(10, 21, 50, 16, rng)
        seen_a.add(pair.t_a)
        seen_b.add(pair.t_b)
    assert seen_a == set(range(1, 8)) and seen_b == set(range(13, 22))
    with pytest.raises(ConfigError):
        sample_temporal_pair(1, 21, 50, 16, rng)


def test_temporal_pair_windows_disjoint(rng):
    """The two reference windows never share a sample."""
    w, s, t_g = 50, 16, 21
    for _ in range(1000):
        t = int(rng.integers(4, t_g - 2))
        pair = sample_temporal_pair(t, t_g, w, s, rng)
        a = set(range((pair.t_a - 1) * s, (pair.t_a - 1) * s + w))
        b = set(range((pair.t_b - 1) * s, (pair.t_b - 1) * s + w))
        assert not a & b


def test_temporal_indices_batch(rng):
    ta, tb, valid = sample_temporal_indices(5, 21, 50, 16, rng)
    assert valid.tolist() == [temporal_range(t, 21, 50, 16) is not None for t in range(1, 22)]
    for t in np.flatnonzero(valid):
        lo_max, hi_min = temporal_range(t + 1, 21, 50, 16)
        assert np.all(ta[:, t] + 1 <= lo_max) and np.all(ta[:, t] >= 0)
        assert np.all(tb[:, t] + 1 >= hi_min) and np.all(tb[:, t] <= 20)


def test_temporal_fill_exact(rng):
    n, d = 6, 3
    z_tar = rng.normal(size=(n, d))
    blocks = one_block(n, 1, 4, k=2)
    w_t = np.hstack([0.5 * np.eye(d), 0.5 * np.eye(d)])
    cxt = z_tar * (~blocks.any(axis=0))[:, None]
    loss = temporal_node_loss(z_tar, z_tar, cxt, z_tar, blocks, w_t, ident)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-30)


def test_temporal_zero_projection_equals_zero_token(rng):
    n, d = 6, 3
    z, z_tar = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    blocks = one_block(n, 2, 5, k=1)
    dec = lambda x: x.tanh() * 2.0
    cxt = z * (~blocks.any(axis=0))[:, None]
    temporal = temporal_node_loss(rng.normal(size=(n, d)), rng.normal(size=(n, d)), cxt, z_tar, blocks,
                                  np.zeros((d, 2 * d)), dec)
    spatial = spatial_node_loss(z, z_tar, blocks, np.zeros(d), np.eye(d), dec)
    assert float(temporal.data) == pytest.approx(float(spatial.data), abs=1e-14)


def test_temporal_adjacency_symmetry(rng):
    for _ in range(100):
        n = int(rng.integers(2, 17))
        h_a, h_b = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        p = temporal_adj_prob(h_a, h_b).data
        assert np.max(np.abs(p - p.T)) <= 1e-12
    h = rng.normal(size=(5, 3))
    np.testing.assert_allclose(temporal_adj_prob(h, h).data, spatial_adj_prob(Tensor(h)).data, atol=1e-15)


# -- combined --------------------------------------------------------------------------

def test_combined_examples():
    assert combined_loss(2.0, 4.0, 1.0) == 2.0
    assert combined_loss(2.0, 4.0, 0.0) == 4.0
    assert combined_loss(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(NumericError):
        combined_loss(float("nan"), 1.0, 0.5)


def test_empty_objective_rejected():
    with pytest.raises(ConfigError):
        LossWeights(use_node=False, use_edge=False).validate()
    with pytest.raises(ConfigError):
        LossWeights(use_spatial=False, use_temporal=False).validate()
    with pytest.raises(ConfigError):
        LossWeights(gamma=1.5).validate()


@pytest.mark.parametrize("toggles", [{}, {"use_node": False}, {"use_edge": False},
                                     {"use_spatial": False}, {"use_temporal": False}])
def test_breakdown_total_identity(toggles):
    store, batch, cfg = tiny_problem(seed=3)
    w = LossWeights(gamma=0.3, lambda_node=1.0, lambda_adj=0.2, **toggles)
    total, parts = stjema_loss(store.leaves(), batch, cfg, w)
    assert parts.total == pytest.approx(combine_breakdown(parts.as_dict(), w), rel=1e-12)
    assert min(parts.node_spat, parts.adj_spat, parts.node_temp, parts.adj_temp) >= 0


def test_full_loss_gradient_and_stop_gradient():
    store, batch, cfg = tiny_problem(seed=1)
    w = LossWeights(lambda_adj=0.5)
    trainable = store.names(["encoder", "decoder_node", "decoder_edge", "projection", "mask_token"])
    loss_fn = lambda p: stjema_loss(p, batch, cfg, w)[0]
    assert grad_check(loss_fn, store, trainable, max_coords=150, rng=np.random.default_rng(0)) < 1e-4
    _, grads, _ = value_and_grad(loss_fn, store, store.names())
    for name in store.names(["target"]):
        assert not np.any(grads[name])
    for name in ("proj.w_t", "proj.ws_v", "proj.ws_e", "mask_token"):
        assert np.any(grads[name])


def test_gin_decoder_variant_gradient():
    store, batch, cfg = tiny_problem(seed=2, decoder="gin")
    w = LossWeights(lambda_adj=0.5)
    loss_fn = lambda p: stjema_loss(p, batch, cfg, w)[0]
    assert grad_check(loss_fn, store, store.names(["decoder_node", "decoder_edge"])) < 1e-4


def test_overfit_single_batch():
    store, batch, cfg = tiny_problem(seed=4)
    w = LossWeights(use_edge=False, use_temporal=False, gamma=1.0)
    names = store.names(["decoder_node", "projection", "mask_token"])
    opt = AdamW(lr=1e-2)
    first = None
    for _ in range(200):
        value, grads, _ = value_and_grad(lambda p: stjema_loss(p, batch, cfg, w)[0], store, names)
        first = value if first is None else first
        opt.step(store.arrays, grads)
    final = float(stjema_loss(store.leaves(), batch, cfg, w)[0].data)
    assert final <= 0.1 * first


# -- encoders -------------------------------------------------------------------------

def _graph(rng, n=6, t=3):
    a = (rng.uniform(size=(1, t, n, n)) < 0.4).astype(float)
    a = np.maximum(a, np.swapaxes(a, -1, -2))
    return rng.normal(size=(1, t, n)), neighbor_matrix(a)


def test_context_equals_target_when_unmasked(rng):
    cfg = ModelConfig(n_nodes=6, d_eta=3, d_v=4, d_enc=4, d_dec=4, gin_layers=4)
    store = init_pretrain_params(cfg, rng)
    u, nbr = _graph(rng)
    p = store.leaves()
    np.testing.assert_array_equal(encode(p, ENC, cfg, u, nbr).data, encode(p, TGT, cfg, u, nbr).data)


def test_masked_row_value_is_irrelevant(rng):
    cfg = ModelConfig(n_nodes=6, d_eta=3, d_v=4, d_enc=4, d_dec=4, gin_layers=4)
    store = init_pretrain_params(cfg, rng)
    u, nbr = _graph(rng)
    keep = np.ones((1, 3, 6))
    keep[..., 2] = 0.0
    p = store.leaves()
    base = encode(p, ENC, cfg, u, nbr, keep).data
    # perturb the feature weights that build row 2's spatial embedding only
    store.arrays["enc.feat.w"][:, 2] += 5.0
    again = encode(store.leaves(), ENC, cfg, u, nbr, keep).data
    np.testing.assert_array_equal(base, again)


def test_ema_small_step_moves_targets_proportionally(rng):
    cfg = ModelConfig(n_nodes=6, d_eta=3, d_v=4, d_enc=4, d_dec=4, gin_layers=4)
    store = init_pretrain_params(cfg, rng)
    for name in store.names(["encoder"]):
        store.arrays[name] = store.arrays[name] + rng.normal(scale=0.05, size=store.arrays[name].shape)
    u, nbr = _graph(rng)
    base = encode(store.leaves(), TGT, cfg, u, nbr).data
    shifts = []
    for beta in (0.99, 0.98):
        s = store.copy()
        ema_update(s, beta)
        shifts.append(np.linalg.norm(encode(s.leaves(), TGT, cfg, u, nbr).data - base))
    assert shifts[0] > 0
    assert shifts[1] / shifts[0] == pytest.approx(2.0, rel=0.05)


# -- EMA ------------------------------------------------------------------------------

def _pair_store(theta, theta_bar):
    s = ParamStore()
    s.add("enc.w", np.array(theta, dtype=float), "encoder")
    s.add("tgt.w", np.array(theta_bar, dtype=float), "target")
    return s


def test_ema_examples():
    s = _pair_store([0.0, 2.0], [1.0, -1.0])
    ema_update(s, EmaState(1.0))
    np.testing.assert_array_equal(s["tgt.w"], [1.0, -1.0])
    ema_update(s, EmaState(0.0))
    np.testing.assert_array_equal(s["tgt.w"], [0.0, 2.0])
    s = _pair_store(0.0, 1.0)
    ema_update(s, 0.996)
    assert float(s["tgt.w"]) == pytest.approx(0.996, abs=1e-15)
    with pytest.raises(ConfigError):
        ema_update(s, 1.5)


def test_ema_rejects_mismatched_stores():
    s = ParamStore()
    s.add("enc.w", np.zeros(2), "encoder")
    s.add("tgt.v", np.zeros(2), "target")
    with pytest.raises(ConfigError):
        ema_update(s, 0.9)
    s = ParamStore()
    s.add("enc.w", np.zeros(2), "encoder")
    s.add("tgt.w", np.zeros(3), "target")
    with pytest.raises(ConfigError):
        ema_update(s, 0.9)


def test_ema_stays_in_hull(rng):
    s = _pair_store(rng.normal(size=4), rng.normal(size=4))
    lo, hi = s["tgt.w"].copy(), s["tgt.w"].copy()
    for _ in range(200):
        s.arrays["enc.w"] = rng.normal(size=4) * 3
        lo, hi = np.minimum(lo, s["enc.w"]), np.maximum(hi, s["enc.w"])
        ema_update(s, 0.9)
        assert np.all(s["tgt.w"] >= lo - 1e-12) and np.all(s["tgt.w"] <= hi + 1e-12)


@pytest.mark.parametrize("toggles", [{"use_spatial": False}, {"use_temporal": False}, {"use_node": False}])
def test_single_side_objectives_still_train_edge_decoder(toggles):
    store, batch, cfg = tiny_problem(seed=6)
    w = LossWeights(lambda_adj=0.5, **toggles)
    loss_fn = lambda p: stjema_loss(p, batch, cfg, w)[0]
    _, grads, _ = value_and_grad(loss_fn, store, store.names(["decoder_edge"]))
    assert all(np.any(g) for g in grads.values())
    assert grad_check(loss_fn, store, store.names(["decoder_edge"]), max_coords=20) < 1e-4

"""Block masks, the four reconstruction terms, and a finite-difference check.

Everything here runs on a tiny random instance in a few seconds.
"""
import numpy as np

from stjema.masking import apply_node_context, sample_mask_arrays, sample_mask_set
from stjema.model import ModelConfig, init_pretrain_params
from stjema.nn import grad_check
from stjema.objective import Batch, LossWeights, min_gap, sample_temporal_indices, stjema_loss

rng = np.random.default_rng(0)

# four contiguous node blocks; the context encoder sees only rows outside all of them
masks = sample_mask_set(16, 4, 0.1, 0.3, rng)
for m in masks.node_masks:
    print(f"block rows {m.lo:2d}..{m.hi - 1:2d}  (ratio {m.ratio:.2f})")
x = np.arange(16.0)[:, None] + 1
print("visible rows:", np.flatnonzero(apply_node_context(x, masks)[:, 0]))

# temporal pairs sit at least d_min windows away on either side
print("d_min for window 50, stride 16:", min_gap(50, 16))

n, t_g, b = 8, 6, 2
cfg = ModelConfig(n_nodes=n, d_eta=3, d_v=4, d_enc=4, d_dec=4, gin_layers=2, gin_hidden=5,
                  token_hidden=3, channel_hidden=5)
store = init_pretrain_params(cfg, rng)
adj = (rng.uniform(size=(b, t_g, n, n)) < 0.3).astype(float)
adj = np.maximum(adj, np.swapaxes(adj, -1, -2))
node_blocks, adj_blocks = sample_mask_arrays((b, t_g), n, 2, 0.2, 0.4, rng)
t_a, t_b, valid = sample_temporal_indices(b, t_g, 2, 2, rng)
batch = Batch(rng.normal(size=(b, t_g, n)), adj, node_blocks, adj_blocks, t_a, t_b, valid)

weights = LossWeights(gamma=0.5, lambda_adj=0.5)
total, parts = stjema_loss(store.leaves(), batch, cfg, weights)
for key, value in parts.as_dict().items():
    print(f"{key:>10}: {value:.5f}")

trainable = store.names(["encoder", "decoder_node", "decoder_edge", "projection", "mask_token"])
err = grad_check(lambda p: stjema_loss(p, batch, cfg, weights)[0], store, trainable, max_coords=20)
print(f"worst gradient mismatch vs central differences: {err:.2e}")

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stjema.config import TrainConfig
from stjema.container import MAGIC, decode_container, encode_container, read_container, write_container
from stjema.errors import ConfigError, DataError, FormatError, NumericError
from stjema.metrics import auroc, mae
from stjema.model import init_pretrain_params
from stjema.nn import Tensor
from stjema.optim import AdamW, schedule_multiplier
from stjema.signal import RoiTimeSeries, SynthConfig, synth_dataset
from stjema import trainer
from stjema.trainer import (
    Checkpoint,
    GraphCache,
    finetune,
    linear_probe,
    orthogonal_penalty,
    predict,
    pretrain,
    split_indices,
)


# -- optimizer ------------------------------------------------------------------------

def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    opt = AdamW(lr=0.1, weight_decay=0.0)
    for _ in range(5):
        opt.step(p, {"w": np.zeros(3)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])


def test_decoupled_decay_alone():
    p = {"w": np.array([2.0])}
    AdamW(lr=0.1, weight_decay=0.5).step(p, {"w": np.zeros(1)})
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_adam_matches_scalar_reference(rng):
    grads = rng.normal(size=10)
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    p = {"x": np.array([0.5])}
    opt = AdamW(lr=lr, weight_decay=wd)
    for g in grads:
        opt.step(p, {"x": np.array([g])})
    assert p["x"][0] == pytest.approx(x, abs=1e-14)


def test_schedule_endpoints():
    assert schedule_multiplier("cosine", 0, 100) == 1.0
    assert schedule_multiplier("cosine", 100, 100) == pytest.approx(0.0, abs=1e-15)
    assert schedule_multiplier("cosine", 50, 100) == pytest.approx(0.5)
    assert schedule_multiplier("constant", 77, 100) == 1.0
    assert schedule_multiplier("one-cycle", 0, 100) == pytest.approx(1 / 25)
    assert schedule_multiplier("one-cycle", 30, 100) == pytest.approx(1.0)
    assert schedule_multiplier("one-cycle", 100, 100) == pytest.approx(1 / 25 / 1e4)
    with pytest.raises(ConfigError):
        schedule_multiplier("step", 0, 10)


def test_quadratic_converges():
    p = {"x": np.array([1.0])}
    opt = AdamW(lr=0.05, schedule="cosine", total_steps=200)
    for _ in range(200):
        opt.step(p, {"x": 2 * p["x"]})
    assert abs(p["x"][0]) < 1e-3


def test_non_finite_gradient_rejected():
    with pytest.raises(NumericError):
        AdamW().step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])})


# -- metrics --------------------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.1, 0.9], [1, 0]) == 0.0
    assert auroc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    assert auroc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(DataError):
        auroc([0.1, 0.2], [1, 1])


def test_mae_examples():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([2.0, 3.0], [1.0, 2.0]) == 1.0
    assert mae([1.0, 3.0], [2.0, 5.0]) == 1.5
    with pytest.raises(DataError):
        mae([], [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auroc_matches_pair_count(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [int(b) for _, b in pairs]
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    value = auroc(scores, labels)
    assert value == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)
    assert 0.0 <= value <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(-10, 10))
def test_mae_shift(targets, shift):
    assert mae(np.array(targets) + shift, targets) == pytest.approx(abs(shift), abs=1e-9)


# -- container ------------------------------------------------------------------------

def _tensors():
    return {
        "a": np.arange(6, dtype=np.float64).reshape(2, 3) / 7,
        "b": np.array([1.5, -2.5], dtype=np.float32),
        "c": np.array([[1, -2]], dtype=np.int64),
        "d": np.array([0, 255], dtype=np.uint8),
        "scalar": np.array(3.25),
    }


def test_container_round_trip(tmp_path):
    write_container(tmp_path / "x.bin", {"kind": "t", "step": 3}, _tensors())
    header, tensors = read_container(tmp_path / "x.bin")
    assert header["step"] == 3 and header["schema_version"] == 1
    for name, arr in _tensors().items():
        assert tensors[name].dtype == arr.dtype
        np.testing.assert_array_equal(tensors[name], arr)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.bin"]


def test_container_big_endian_input_stored_little_endian():
    arr = np.array([1.0, 2.0], dtype=">f8")
    _, t = decode_container(encode_container({}, {"x": arr}))
    np.testing.assert_array_equal(t["x"], [1.0, 2.0])


def _kind(blob):
    with pytest.raises(FormatError) as info:
        decode_container(blob)
    return info.value.kind


def _rechecksum(payload):
    import hashlib
    return MAGIC + payload + hashlib.sha256(payload).digest()


def test_container_corruption_detected():
    blob = encode_container({"step": 1}, _tensors())
    assert _kind(b"NOTMAGIC" + blob[8:]) == "bad-magic"
    flipped = bytearray(blob)
    flipped[40] ^= 0xFF
    assert _kind(bytes(flipped)) == "checksum-mismatch"
    payload = blob[8:-32]
    assert _kind(_rechecksum(payload[:-5])) == "truncated"
    assert _kind(_rechecksum(payload + b"\x00")) == "trailing-bytes"
    with pytest.raises(FormatError):
        encode_container({}, {"z": np.zeros(2, dtype=np.complex128)})


def test_container_schema_version_checked():
    import json
    import struct
    hbytes = json.dumps({"schema_version": 99}).encode()
    payload = struct.pack("<I", len(hbytes)) + hbytes + struct.pack("<I", 0)
    assert _kind(_rechecksum(payload)) == "schema-version"


# -- checkpoints ----------------------------------------------------------------------

def _forward_value(store, cfg, dataset):
    from stjema.trainer import make_batch, step_rng
    from stjema.objective import stjema_loss
    batch = make_batch(cfg, dataset, GraphCache(), step_rng(99, 0))
    return stjema_loss(store.leaves(), batch, cfg.model_config(), cfg.loss_weights())[1].as_dict()


def test_checkpoint_round_trip_bitwise(tmp_path, tiny_cfg, tiny_corpus):
    ckpt, _ = pretrain(tiny_cfg.replace(steps=2), tiny_corpus)
    ckpt.save(tmp_path / "c.bin")
    expected = init_pretrain_params(tiny_cfg.model_config(), np.random.default_rng(0))
    back = Checkpoint.load(tmp_path / "c.bin", expected)
    assert back.params.equal(ckpt.params)
    assert back.step == 2 and back.config_hash == tiny_cfg.replace(steps=2).config_hash()
    assert set(back.opt_state) == set(ckpt.opt_state)
    assert _forward_value(back.params, tiny_cfg, tiny_corpus) == _forward_value(ckpt.params, tiny_cfg, tiny_corpus)


def test_checkpoint_topology_mismatch(tmp_path, tiny_cfg, tiny_corpus):
    ckpt, _ = pretrain(tiny_cfg.replace(steps=1), tiny_corpus)
    ckpt.save(tmp_path / "c.bin")
    wrong = init_pretrain_params(tiny_cfg.replace(d_enc=7).model_config(), np.random.default_rng(0))
    with pytest.raises(FormatError) as info:
        Checkpoint.load(tmp_path / "c.bin", wrong)
    assert info.value.kind == "topology-mismatch"
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "missing.bin")


# -- pretraining ----------------------------------------------------------------------

def test_pretrain_deterministic(tiny_cfg, tiny_corpus):
    a, ra = pretrain(tiny_cfg, tiny_corpus)
    b, rb = pretrain(tiny_cfg, tiny_corpus)
    assert ra.records == rb.records
    assert a.params.equal(b.params)
    c, rc = pretrain(tiny_cfg.replace(seed=1), tiny_corpus)
    assert rc.records != ra.records


def test_pretrain_ignores_labels(tiny_cfg, tiny_corpus):
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(tiny_corpus))
    relabeled = [RoiTimeSeries(ts.subject_id, ts.data, dict(tiny_corpus[j].labels))
                 for ts, j in zip(tiny_corpus, perm)]
    stripped = [RoiTimeSeries(ts.subject_id, ts.data, {}) for ts in tiny_corpus]
    base = pretrain(tiny_cfg, tiny_corpus)[1].records
    assert pretrain(tiny_cfg, relabeled)[1].records == base
    assert pretrain(tiny_cfg, stripped)[1].records == base


def test_empty_objective_rejected(tiny_cfg, tiny_corpus):
    with pytest.raises(ConfigError):
        pretrain(tiny_cfg.replace(use_spatial=False, use_temporal=False), tiny_corpus)


def test_hook_order(tiny_cfg, tiny_corpus):
    events = []
    pretrain(tiny_cfg.replace(steps=3), tiny_corpus, hook=lambda e, s: events.append((e, s)))
    assert events == [(e, s) for s in range(3) for e in ("loss", "optimizer", "ema")]


def test_ema_uses_post_step_weights(tiny_cfg, tiny_corpus):
    cfg = tiny_cfg.replace(steps=1, ema_beta=0.9)
    init = init_pretrain_params(cfg.model_config(), np.random.default_rng([cfg.seed, 1]))
    ckpt, _ = pretrain(cfg, tiny_corpus)
    for name in ckpt.params.names(["target"]):
        ctx = "enc." + name.split(".", 1)[1]
        expected = 0.9 * init[name] + 0.1 * ckpt.params[ctx]
        np.testing.assert_allclose(ckpt.params[name], expected, rtol=0, atol=1e-15)
        assert not np.array_equal(ckpt.params[ctx], init[ctx])


def test_resume_matches_uninterrupted(tmp_path, tiny_cfg, tiny_corpus):
    cfg = tiny_cfg.replace(steps=5, checkpoint_every=2)
    full_ckpt, full = pretrain(cfg, tiny_corpus)

    def crash(event, step):
        if step == 3 and event == "loss":
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        pretrain(cfg, tiny_corpus, hook=crash, checkpoint_path=tmp_path / "c.bin")
    saved = Checkpoint.load(tmp_path / "c.bin")
    assert saved.step == 2
    resumed_ckpt, resumed = pretrain(cfg, tiny_corpus, resume=saved)
    assert resumed.records == full.records[2:]
    assert resumed_ckpt.params.equal(full_ckpt.params)


def test_non_finite_loss_snapshot(tmp_path, tiny_cfg, tiny_corpus, monkeypatch):
    monkeypatch.setattr(trainer, "stjema_loss", lambda *a: (Tensor(np.array(np.nan)), None))
    with pytest.raises(NumericError):
        pretrain(tiny_cfg, tiny_corpus, snapshot_path=tmp_path / "diag.bin")
    assert Checkpoint.load(tmp_path / "diag.bin").kind == "diagnostic"


def test_node_count_mismatch(tiny_cfg, tiny_corpus):
    with pytest.raises(DataError):
        pretrain(tiny_cfg.replace(n_nodes=10), tiny_corpus)


def test_graph_cache_disk_round_trip(tmp_path, tiny_corpus):
    first = GraphCache(tmp_path).get(tiny_corpus[0], 12, 4, 0.3)
    again = GraphCache(tmp_path).get(tiny_corpus[0], 12, 4, 0.3)
    np.testing.assert_array_equal(first.adjacency, again.adjacency)
    np.testing.assert_array_equal(first.window_summary, again.window_summary)
    assert len(list(tmp_path.glob("graph-*.bin"))) == 1


# -- downstream -----------------------------------------------------------------------

def _probe_cfg(tiny_cfg, **kw):
    keep = {k: v for k, v in tiny_cfg.to_dict().items()
            if k not in ("phase", "steps", "epochs", "batch_size", "lr", "weight_decay", "schedule")}
    return TrainConfig.for_phase("probe", **{**keep, "epochs": 20, **kw})


def test_label_fraction_subsets_train_only():
    labels = np.array([0] * 50 + [1] * 50)
    cfg = TrainConfig.for_phase("probe", test_fraction=0.3)
    full = split_indices(labels, cfg)
    part = split_indices(labels, cfg.replace(label_fraction=0.2))
    assert len(part.train) == math.floor(0.2 * len(full.train))
    assert set(part.train) <= set(full.train)
    np.testing.assert_array_equal(part.test, full.test)
    assert not set(full.train) & set(full.test)
    with pytest.raises(ConfigError):
        split_indices(labels, cfg.replace(label_fraction=0.001))


def test_missing_labels_and_task_mismatch(tiny_cfg, tiny_corpus):
    cfg = _probe_cfg(tiny_cfg)
    with pytest.raises(DataError):
        linear_probe(None, cfg.replace(label_key="age"), tiny_corpus)
    with pytest.raises(DataError):
        linear_probe(None, cfg.replace(label_key="switch_rate"), tiny_corpus)


def test_probe_cached_equals_uncached(tiny_cfg, tiny_corpus):
    ckpt, _ = pretrain(tiny_cfg, tiny_corpus)
    cfg = _probe_cfg(tiny_cfg, epochs=5)
    cached = linear_probe(ckpt, cfg, tiny_corpus)
    fresh = linear_probe(ckpt, cfg.replace(cache_features=False), tiny_corpus)
    assert cached.records == fresh.records and cached.metrics == fresh.metrics


def test_probe_leaves_checkpoint_untouched(tiny_cfg, tiny_corpus):
    ckpt, _ = pretrain(tiny_cfg, tiny_corpus)
    before = ckpt.params.copy()
    linear_probe(ckpt, _probe_cfg(tiny_cfg, epochs=3), tiny_corpus)
    linear_probe(ckpt, _probe_cfg(tiny_cfg, epochs=3, probe_train_readout=True), tiny_corpus)
    assert ckpt.params.equal(before)


def test_probe_random_labels_near_chance():
    corpus = synth_dataset(SynthConfig(n_subjects=200, N=8, T_max=60, seed=5))
    rng = np.random.default_rng(0)
    labels = rng.permutation(np.repeat([0, 1], 100))
    shuffled = [RoiTimeSeries(ts.subject_id, ts.data, {"class": int(y)}) for ts, y in zip(corpus, labels)]
    base = TrainConfig.for_phase("probe", n_nodes=8, window=12, stride=4, d_eta=4, d_v=6, d_enc=6,
                                 gin_layers=2, gin_hidden=8, token_hidden=4, channel_hidden=8,
                                 test_fraction=0.5, epochs=30)
    cache = GraphCache()
    scores = [linear_probe(None, base.replace(seed=s), shuffled, cache).metrics["auroc"] for s in range(5)]
    assert 0.4 <= np.mean(scores) <= 0.6


def test_orthogonal_penalty_values():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 3)))
    p = {"a": Tensor(q), "b": Tensor(q.T), "c": Tensor(2 * np.eye(2))}
    assert float(orthogonal_penalty(p, ["a", "b"]).data) == pytest.approx(0.0, abs=1e-24)
    assert float(orthogonal_penalty(p, ["c"]).data) == pytest.approx(18.0)


def test_finetune_regression_beats_label_sd():
    from stjema.experiments import DESK, desk_dataset
    corpus = desk_dataset()
    cfg = TrainConfig.for_phase("finetune", task="regress", label_key="switch_rate", test_fraction=0.5, **DESK)
    store, report = finetune(None, cfg, corpus)
    y = np.array([ts.labels["switch_rate"] for ts in corpus])
    assert report.metrics["mae"] < y.std()
    metrics, test_idx, pred = predict(store, cfg, corpus, report.info)
    assert metrics == {"mae": report.metrics["mae"]}
    assert len(pred) == len(test_idx) == report.metrics["n_test"]


def test_finetune_classification_with_checkpoint(tiny_cfg, tiny_corpus):
    ckpt, _ = pretrain(tiny_cfg, tiny_corpus)
    keep = {k: v for k, v in tiny_cfg.to_dict().items()
            if k not in ("phase", "steps", "epochs", "batch_size", "lr", "weight_decay", "schedule")}
    cfg = TrainConfig.for_phase("finetune", **{**keep, "epochs": 2})
    store, report = finetune(ckpt, cfg, tiny_corpus)
    assert 0.0 <= report.metrics["auroc"] <= 1.0
    assert len(report.records) == 2
    for name in store.names(["encoder"]):
        assert name.startswith("enc.")
    with pytest.raises(FormatError):
        finetune(ckpt, cfg.replace(d_enc=5), tiny_corpus)

"""Pre-training, fine-tuning and linear probing."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .container import read_container, write_container
from .errors import ConfigError, DataError, FormatError, NumericError
from .graphbuild import DynamicGraph, build_dynamic_graph
from .masking import sample_mask_arrays
from .metrics import auroc, mae
from .model import ENC, encode, init_downstream_params, init_pretrain_params, target_encoder_arrays
from .nn.autograd import Tensor, linear, no_grad
from .nn.grad import value_and_grad
from .nn.layers import neighbor_matrix, sero_readout
from .nn.params import ParamStore
from .objective import Batch, EmaState, LossBreakdown, ema_update, sample_temporal_indices, stjema_loss
from .optim import AdamW
from .signal import RoiTimeSeries, mask_timesteps, random_time_slice

PRETRAIN_ROLES = ("encoder", "decoder_node", "decoder_edge", "projection", "mask_token")
Hook = Callable[[str, int], None]


# -- checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ParamStore
    step: int
    config: dict
    config_hash: str
    opt_state: dict = field(default_factory=dict)
    kind: str = "pretrain"
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        header = {
            "kind": self.kind,
            "step": self.step,
            "config_hash": self.config_hash,
            "config": self.config,
            "roles": dict(self.params.roles),
            "extra": self.extra,
        }
        tensors = {f"param/{n}": self.params[n] for n in self.params.names()}
        tensors.update({f"opt/{n}": v for n, v in self.opt_state.items()})
        write_container(path, header, tensors)

    @classmethod
    def load(cls, path, expected: ParamStore | None = None) -> "Checkpoint":
        """Read a checkpoint; with ``expected`` the names and shapes must match it exactly."""
        try:
            header, tensors = read_container(path)
        except FileNotFoundError as exc:
            raise DataError(f"checkpoint not found: {path}") from exc
        roles = header.get("roles", {})
        store = ParamStore()
        opt = {}
        for name, arr in tensors.items():
            if name.startswith("param/"):
                pname = name[len("param/"):]
                if pname not in roles:
                    raise FormatError("unknown-tensor", f"no role recorded for {pname}")
                store.add(pname, arr, roles[pname])
            elif name.startswith("opt/"):
                opt[name[len("opt/"):]] = arr
            else:
                raise FormatError("unknown-tensor", f"unexpected tensor {name}")
        if expected is not None:
            check_topology(store, expected)
        return cls(store, int(header["step"]), header.get("config", {}), header["config_hash"], opt,
                   header["kind"], header.get("extra", {}))


def check_topology(store: ParamStore, expected: ParamStore) -> None:
    got, want = store.shapes(), expected.shapes()
    missing = sorted(set(want) - set(got))
    extra = sorted(set(got) - set(want))
    if missing or extra:
        raise FormatError("topology-mismatch", f"missing {missing[:5]}, unexpected {extra[:5]}")
    bad = [n for n in want if got[n] != want[n]]
    if bad:
        raise FormatError("topology-mismatch", f"shape mismatch for {bad[:5]}")


# -- metrics report -------------------------------------------------------------------

@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    target_std: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def log(self, **record) -> None:
        self.records.append(record)

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([r[key] for r in self.records if key in r])


# -- dynamic graphs -------------------------------------------------------------------

def subject_digest(ts: RoiTimeSeries) -> str:
    return hashlib.sha256(np.ascontiguousarray(ts.data, dtype="<f8").tobytes()).hexdigest()


class GraphCache:
    """Memoizes dynamic graphs by ``(data hash, window, stride, density)``.

    With a directory the graphs are also stored as binary containers, so
    later runs skip the construction.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._mem: dict = {}

    def key(self, ts: RoiTimeSeries, window: int, stride: int, density: float) -> tuple:
        return (subject_digest(ts), window, stride, float(density))

    def get(self, ts: RoiTimeSeries, window: int, stride: int, density: float) -> DynamicGraph:
        key = self.key(ts, window, stride, density)
        if key in self._mem:
            return self._mem[key]
        graph = None
        path = None
        if self.directory is not None:
            tag = hashlib.sha256(repr(key).encode()).hexdigest()[:24]
            path = self.directory / f"graph-{tag}.bin"
            if path.exists():
                header, t = read_container(path)
                graph = DynamicGraph(t["adjacency"], t["window_summary"], header.get("meta", {}))
        if graph is None:
            graph = build_dynamic_graph(ts, window, stride, density)
            if path is not None:
                write_container(path, {"kind": "dynamic-graph", "step": 0, "config_hash": key[0][:16],
                                       "meta": graph.meta},
                                {"adjacency": graph.adjacency, "window_summary": graph.window_summary})
        self._mem[key] = graph
        return graph


def stack_graphs(graphs: Sequence[DynamicGraph]) -> tuple[np.ndarray, np.ndarray]:
    lengths = {g.n_windows for g in graphs}
    if len(lengths) != 1:
        raise DataError(f"subjects yield different window counts {sorted(lengths)}; set slice_length")
    return np.stack([g.window_summary for g in graphs]), np.stack([g.adjacency for g in graphs])


def _check_nodes(dataset: Sequence[RoiTimeSeries], cfg: TrainConfig) -> None:
    if not dataset:
        raise DataError("empty dataset")
    for ts in dataset:
        if ts.n_rois != cfg.n_nodes:
            raise DataError(f"{ts.subject_id}: {ts.n_rois} ROIs but the model expects {cfg.n_nodes}")


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one step, so a resumed run replays the same draws."""
    return np.random.default_rng([seed, stream, step])


# -- pre-training ---------------------------------------------------------------------

def make_batch(cfg: TrainConfig, dataset, cache: GraphCache, rng: np.random.Generator) -> Batch:
    n = len(dataset)
    idx = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
    graphs = []
    for i in idx:
        ts = dataset[i]
        if cfg.slice_length:
            graphs.append(build_dynamic_graph(random_time_slice(ts, cfg.slice_length, rng),
                                              cfg.window, cfg.stride, cfg.density))
        else:
            graphs.append(cache.get(ts, cfg.window, cfg.stride, cfg.density))
    u, adj = stack_graphs(graphs)
    b, t_g = u.shape[:2]
    node_blocks, adj_blocks = sample_mask_arrays((b, t_g), cfg.n_nodes, cfg.n_masks,
                                                 cfg.alpha_min, cfg.alpha_max, rng)
    t_a, t_b, valid = sample_temporal_indices(b, t_g, cfg.window, cfg.stride, rng)
    return Batch(u, adj, node_blocks, adj_blocks, t_a, t_b, valid)


def pretrain(
    cfg: TrainConfig,
    dataset: Sequence[RoiTimeSeries],
    resume: Checkpoint | None = None,
    hook: Hook | None = None,
    cache: GraphCache | None = None,
    snapshot_path=None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
    checkpoint_path=None,
) -> tuple[Checkpoint, MetricsReport]:
    """Run the self-supervised objective for ``cfg.steps`` optimizer steps.

    Each step builds (or looks up) the batch's dynamic graphs, samples block
    masks and temporal pairs, takes a gradient step on everything except the
    target encoder and then moves the target encoder by EMA. ``hook`` is
    called with ``("loss" | "optimizer" | "ema", step)`` in that order.
    With ``cfg.checkpoint_every`` and ``checkpoint_path`` a resumable
    checkpoint is rewritten every that many steps. Labels are never read.
    """
    cfg.validate()
    _check_nodes(dataset, cfg)
    mcfg, weights = cfg.model_config(), cfg.loss_weights()
    ema = EmaState(cfg.ema_beta)
    cache = cache or GraphCache()
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, schedule=cfg.schedule, total_steps=cfg.steps)
    store = init_pretrain_params(mcfg, np.random.default_rng([cfg.seed, 1]))
    start = 0
    if resume is not None:
        check_topology(resume.params, store)
        store = resume.params.copy()
        opt.load_state_arrays(resume.opt_state, resume.step)
        start = resume.step
        if start > cfg.steps:
            raise ConfigError(f"checkpoint is at step {start}, beyond the configured {cfg.steps} steps")
    trainable = store.names(PRETRAIN_ROLES)
    report = MetricsReport()
    notify = hook or (lambda event, step: None)

    for step in range(start, cfg.steps):
        batch = make_batch(cfg, dataset, cache, step_rng(cfg.seed, step))

        def loss_fn(p):
            return stjema_loss(p, batch, mcfg, weights)

        try:
            _, grads, parts = value_and_grad(loss_fn, store, trainable)
        except FloatingPointError as exc:
            if snapshot_path is not None:
                Checkpoint(store, step, cfg.to_dict(), cfg.config_hash(), opt.state_arrays(),
                           kind="diagnostic").save(snapshot_path)
            raise NumericError(f"step {step}: {exc}") from exc
        notify("loss", step)
        lr = opt.current_lr()
        opt.step(store.arrays, grads)
        notify("optimizer", step)
        ema_update(store, ema)
        notify("ema", step)
        report.log(step=step + 1, lr=lr, **parts.as_dict())
        report.target_std.append(parts.target_std)
        if on_step is not None:
            on_step(step + 1, parts)
        if checkpoint_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            Checkpoint(store, step + 1, cfg.to_dict(), cfg.config_hash(), opt.state_arrays()).save(checkpoint_path)

    ckpt = Checkpoint(store, cfg.steps, cfg.to_dict(), cfg.config_hash(), opt.state_arrays())
    return ckpt, report


# -- downstream -----------------------------------------------------------------------

@dataclass
class DownstreamData:
    u: np.ndarray  # (S, T_G, N)
    nbr: np.ndarray  # (S, T_G, N, N)
    y: np.ndarray
    ids: list


@dataclass
class Split:
    train: np.ndarray
    test: np.ndarray


def split_indices(labels: np.ndarray, cfg: TrainConfig) -> Split:
    """Seeded train/test split (stratified for classification), then label-fraction subsetting of train."""
    rng = np.random.default_rng([cfg.seed, 7])
    n = len(labels)
    if cfg.task == "classify":
        train, test = [], []
        for c in np.unique(labels):
            members = rng.permutation(np.flatnonzero(labels == c))
            k = int(round(len(members) * cfg.test_fraction))
            test.extend(members[:k])
            train.extend(members[k:])
        train, test = np.array(sorted(train)), np.array(sorted(test))
    else:
        perm = rng.permutation(n)
        k = int(round(n * cfg.test_fraction))
        train, test = np.sort(perm[k:]), np.sort(perm[:k])
    keep = int(math.floor(cfg.label_fraction * len(train) + 1e-9))
    if keep < 1:
        raise ConfigError(f"label_fraction {cfg.label_fraction} leaves no training subjects")
    if keep < len(train):
        train = np.sort(rng.choice(train, size=keep, replace=False))
    if len(test) == 0:
        raise DataError("test split is empty")
    return Split(train, test)


def read_labels(dataset: Sequence[RoiTimeSeries], cfg: TrainConfig) -> np.ndarray:
    values = []
    for ts in dataset:
        if cfg.label_key not in ts.labels:
            raise DataError(f"{ts.subject_id} has no label {cfg.label_key!r}")
        values.append(ts.labels[cfg.label_key])
    y = np.asarray(values, dtype=np.float64)
    if cfg.task == "classify":
        if not np.all(y == np.round(y)) or y.min() < 0:
            raise DataError(f"label {cfg.label_key!r} is not a class index; use task=regress")
        y = y.astype(np.int64)
        if len(np.unique(y)) < 2:
            raise DataError("classification needs at least two classes")
    return y


def prepare_downstream(cfg: TrainConfig, dataset: Sequence[RoiTimeSeries], cache: GraphCache | None = None):
    """Labels, dynamic graphs (after optional missing-timestep masking) and the split."""
    cfg.validate()
    _check_nodes(dataset, cfg)
    y = read_labels(dataset, cfg)
    cache = cache or GraphCache()
    rng = np.random.default_rng([cfg.seed, 11])
    graphs = []
    for ts in dataset:
        if cfg.missing_ratio > 0:
            ts = mask_timesteps(ts, cfg.missing_ratio, rng)
        graphs.append(cache.get(ts, cfg.window, cfg.stride, cfg.density))
    u, adj = stack_graphs(graphs)
    data = DownstreamData(u, neighbor_matrix(adj), y, [ts.subject_id for ts in dataset])
    return data, split_indices(y, cfg)


def encoder_representation(p, cfg: TrainConfig, u, nbr) -> Tensor:
    """Node representations arranged one node per column, ``(S, T_G, d, N)``."""
    return encode(p, ENC, cfg.model_config(), u, nbr).swapaxes(-1, -2)


def pool(p, z_cols: Tensor) -> Tensor:
    """SERO readout per timestep, then the mean over timesteps."""
    pooled, _ = sero_readout(z_cols, p["readout.w1"], p["readout.w2"])
    return pooled.mean(axis=-2)


def head(p, g: Tensor) -> Tensor:
    """Standardize the graph vector with the stored statistics, then the affine map."""
    return linear((g - p["norm.mu"]) / p["norm.sd"], p["head.w"], p["head.b"])


def set_feature_norm(store: ParamStore, feats: np.ndarray) -> None:
    """Store per-feature mean and std of ``feats`` (zero spread maps to 1)."""
    sd = feats.std(axis=0)
    store.update({"norm.mu": feats.mean(axis=0), "norm.sd": np.where(sd > 0, sd, 1.0)})


def log_softmax(logits: Tensor) -> Tensor:
    shift = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    return shift - shift.exp().sum(axis=-1, keepdims=True).log()


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    logp = log_softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    return -(logp * onehot).sum() / len(y)


def orthogonal_penalty(p, names: Sequence[str]) -> Tensor:
    """Sum of ``||W^T W - I||_F^2`` using the smaller Gram matrix of each weight."""
    total = Tensor(np.zeros(()))
    for name in names:
        w = p[name]
        rows, cols = w.shape
        gram = w @ w.T if rows <= cols else w.T @ w
        diff = gram - np.eye(min(rows, cols))
        total = total + (diff * diff).sum()
    return total


class Task:
    """Loss, predictions and evaluation for the configured task."""

    def __init__(self, cfg: TrainConfig, y: np.ndarray, train: np.ndarray, info: dict | None = None):
        self.kind = cfg.task
        if info:
            self.n_outputs, self.mu, self.sd = info["n_outputs"], info["mu"], info["sd"]
            return
        if self.kind == "classify":
            self.n_outputs = int(y.max()) + 1
            self.mu, self.sd = 0.0, 1.0
        else:
            self.n_outputs = 1
            self.mu = float(y[train].mean())
            self.sd = float(y[train].std()) or 1.0

    def info(self) -> dict:
        return {"task": self.kind, "n_outputs": self.n_outputs, "mu": self.mu, "sd": self.sd}

    def loss(self, out: Tensor, y: np.ndarray) -> Tensor:
        if self.kind == "classify":
            return cross_entropy(out, y)
        diff = out[:, 0] - (y - self.mu) / self.sd
        return (diff * diff).mean()

    def predict(self, out: np.ndarray) -> np.ndarray:
        if self.kind == "classify":
            e = np.exp(out - out.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        return out[:, 0] * self.sd + self.mu

    def evaluate(self, pred: np.ndarray, y: np.ndarray) -> dict:
        if self.kind == "classify":
            if self.n_outputs == 2:
                return {"auroc": auroc(pred[:, 1], y)}
            return {"accuracy": float((pred.argmax(axis=-1) == y).mean())}
        return {"mae": mae(pred, y)}


def _downstream_store(cfg: TrainConfig, n_outputs: int, ckpt: Checkpoint | None) -> ParamStore:
    encoder = None
    if ckpt is not None:
        encoder = target_encoder_arrays(ckpt.params)
        if not encoder:
            encoder = {n: ckpt.params[n] for n in ckpt.params.names(["encoder"])}
        fresh = init_downstream_params(cfg.model_config(), n_outputs, np.random.default_rng(0))
        want = {n: s for n, s in fresh.shapes().items() if fresh.roles[n] == "encoder"}
        got = {n: a.shape for n, a in encoder.items()}
        if got != want:
            raise FormatError("topology-mismatch", "checkpoint encoder does not match the configured model")
    return init_downstream_params(cfg.model_config(), n_outputs, np.random.default_rng([cfg.seed, 3]), encoder)


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _forward(p, cfg: TrainConfig, data: DownstreamData, idx) -> Tensor:
    return head(p, pool(p, encoder_representation(p, cfg, data.u[idx], data.nbr[idx])))


def finetune(
    ckpt: Checkpoint | None, cfg: TrainConfig, dataset: Sequence[RoiTimeSeries], cache: GraphCache | None = None
) -> tuple[ParamStore, MetricsReport]:
    """Train encoder, SERO readout and head jointly; ``ckpt=None`` starts from random weights."""
    data, split = prepare_downstream(cfg, dataset, cache)
    task = Task(cfg, data.y, split.train)
    store = _downstream_store(cfg, task.n_outputs, ckpt)
    # the pooled vector has a large subject-independent offset; standardizing makes the
    # between-subject spread visible to the head from the first step
    set_feature_norm(store, probe_features(store, cfg, data)[split.train])
    names = store.names(["encoder", "readout", "head"])
    ortho = ["readout.w1", "readout.w2", "head.w"]
    n_batches = math.ceil(len(split.train) / cfg.batch_size)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, schedule=cfg.schedule,
                total_steps=cfg.epochs * n_batches)
    rng = np.random.default_rng([cfg.seed, 5])
    report = MetricsReport()
    for epoch in range(cfg.epochs):
        losses = []
        for bidx in _batches(len(split.train), cfg.batch_size, rng):
            idx = split.train[bidx]

            def loss_fn(p):
                out = _forward(p, cfg, data, idx)
                return task.loss(out, data.y[idx]) + orthogonal_penalty(p, ortho) * cfg.ortho_coef

            value, grads, _ = value_and_grad(loss_fn, store, names)
            opt.step(store.arrays, grads)
            losses.append(value)
        report.log(epoch=epoch + 1, loss=float(np.mean(losses)))
    report.info = task.info()
    report.metrics = {**_evaluate(store, cfg, data, split.test, task),
                      "n_train": int(len(split.train)), "n_test": int(len(split.test))}
    return store, report


def _evaluate(store: ParamStore, cfg: TrainConfig, data: DownstreamData, idx, task: Task) -> dict:
    with no_grad():
        out = _forward(store.leaves(), cfg, data, idx).data
    return task.evaluate(task.predict(out), data.y[idx])


def predict(store: ParamStore, cfg: TrainConfig, dataset: Sequence[RoiTimeSeries], info: dict,
            cache: GraphCache | None = None) -> tuple[dict, np.ndarray, np.ndarray]:
    """Score a fine-tuned model on the configured test split.

    Returns the metrics plus test indices and predictions (class
    probabilities, or de-normalized values for regression).
    """
    data, split = prepare_downstream(cfg, dataset, cache)
    check_topology(store, init_downstream_params(cfg.model_config(), info["n_outputs"], np.random.default_rng(0)))
    task = Task(cfg, data.y, split.train, info)
    with no_grad():
        out = _forward(store.leaves(), cfg, data, split.test).data
    pred = task.predict(out)
    return task.evaluate(pred, data.y[split.test]), split.test, pred


def probe_features(store: ParamStore, cfg: TrainConfig, data: DownstreamData, batch: int = 64) -> np.ndarray:
    """Frozen graph vectors (mean-pooled SERO readout) for every subject."""
    p = store.leaves()
    out = []
    with no_grad():
        for i in range(0, len(data.y), batch):
            idx = np.arange(i, min(i + batch, len(data.y)))
            out.append(pool(p, encoder_representation(p, cfg, data.u[idx], data.nbr[idx])).data)
    return np.concatenate(out)


def linear_probe(
    ckpt: Checkpoint | None, cfg: TrainConfig, dataset: Sequence[RoiTimeSeries], cache: GraphCache | None = None
) -> MetricsReport:
    """Train only the affine head on frozen representations.

    The encoder and (unless ``probe_train_readout``) the SERO readout stay
    fixed. With ``cache_features`` the frozen features are computed once;
    otherwise they are recomputed every epoch, which must give the same result.
    """
    data, split = prepare_downstream(cfg, dataset, cache)
    task = Task(cfg, data.y, split.train)
    store = _downstream_store(cfg, task.n_outputs, ckpt)
    frozen_roles = ["encoder"] if cfg.probe_train_readout else ["encoder", "readout"]
    frozen = {n: store[n].copy() for n in store.names(frozen_roles)}
    trainable = store.names(["readout", "head"] if cfg.probe_train_readout else ["head"])
    n_batches = math.ceil(len(split.train) / cfg.batch_size)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, schedule=cfg.schedule,
                total_steps=cfg.epochs * n_batches)
    rng = np.random.default_rng([cfg.seed, 5])
    report = MetricsReport()

    z_cols = None
    if cfg.probe_train_readout:
        with no_grad():
            z_cols = encoder_representation(store.leaves(), cfg, data.u, data.nbr).data

    def features() -> np.ndarray:
        return probe_features(store, cfg, data)

    cached = features()
    set_feature_norm(store, cached[split.train])
    if not cfg.cache_features:
        cached = None

    for epoch in range(cfg.epochs):
        if not cfg.probe_train_readout:
            feats = cached if cached is not None else features()
        losses = []
        for bidx in _batches(len(split.train), cfg.batch_size, rng):
            idx = split.train[bidx]

            def loss_fn(p):
                g = pool(p, Tensor(z_cols[idx])) if cfg.probe_train_readout else Tensor(feats[idx])
                return task.loss(head(p, g), data.y[idx])

            value, grads, _ = value_and_grad(loss_fn, store, trainable)
            opt.step(store.arrays, grads)
            losses.append(value)
        report.log(epoch=epoch + 1, loss=float(np.mean(losses)))

    for name, arr in frozen.items():
        if not np.array_equal(arr, store[name]):
            raise RuntimeError(f"linear probe modified frozen tensor {name}")
    with no_grad():
        p = store.leaves()
        if cfg.probe_train_readout:
            g = pool(p, Tensor(z_cols[split.test]))
        else:
            g = Tensor(feats[split.test])
        out = head(p, g).data
    report.info = task.info()
    report.metrics = {**task.evaluate(task.predict(out), data.y[split.test]),
                      "n_train": int(len(split.train)), "n_test": int(len(split.test))}
    return report

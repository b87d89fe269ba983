"""ROI time series: data model, text I/O, manifests, synthetic corpora, slicing.

ROI file layout (UTF-8)::

    N T_max
    p_11 p_12 ... p_1T
    ...
    p_N1 p_N2 ... p_NT

Manifests are JSON: ``{"schema_version": 1, "entries": [{"subject_id", "path",
"labels"}, ...]}`` with paths relative to the manifest's directory.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MANIFEST_SCHEMA_VERSION = 1


@dataclass
class RoiTimeSeries:
    subject_id: str
    data: np.ndarray
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError(f"{self.subject_id}: expected an N x T matrix, got shape {self.data.shape}")
        n, t = self.data.shape
        if n < 2 or t < 2:
            raise DataError(f"{self.subject_id}: need N >= 2 and T_max >= 2, got {n} x {t}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"{self.subject_id}: non-finite BOLD values")

    @property
    def n_rois(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]

    def replace(self, data: np.ndarray) -> "RoiTimeSeries":
        return RoiTimeSeries(self.subject_id, data, dict(self.labels))


# -- text format ------------------------------------------------------------------

def format_roi_timeseries(ts: RoiTimeSeries) -> str:
    """Canonical text form: ``repr`` floats, single spaces, trailing newline."""
    n, t = ts.data.shape
    lines = [f"{n} {t}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in ts.data]
    return "\n".join(lines) + "\n"


def parse_roi_timeseries(text: str, subject_id: str = "") -> RoiTimeSeries:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("malformed-header", "empty file")
    header = lines[0].split()
    if len(header) != 2:
        raise FormatError("malformed-header", f"expected 'N T_max', got {lines[0]!r}")
    try:
        n, t = int(header[0]), int(header[1])
    except ValueError:
        raise FormatError("malformed-header", f"non-integer header {lines[0]!r}") from None
    if n < 2 or t < 2:
        raise FormatError("too-small", f"need N >= 2 and T_max >= 2, got {n} x {t}")
    rows = lines[1:]
    if len(rows) != n:
        raise FormatError("row-count-mismatch", f"header declares {n} rows, found {len(rows)}")
    data = np.empty((n, t))
    for i, row in enumerate(rows):
        tokens = row.split()
        if len(tokens) != t:
            raise FormatError(
                "row-length-mismatch", f"row {i + 1} has {len(tokens)} values, expected {t}"
            )
        try:
            data[i] = [float(tok) for tok in tokens]
        except ValueError as exc:
            raise FormatError("non-numeric", f"row {i + 1}: {exc}") from None
    if not np.all(np.isfinite(data)):
        raise FormatError("non-finite", "file contains nan or inf")
    return RoiTimeSeries(subject_id, data)


def load_roi_timeseries(path, subject_id: str | None = None, labels: dict | None = None) -> RoiTimeSeries:
    path = Path(path)
    ts = parse_roi_timeseries(path.read_text(encoding="utf-8"), subject_id or path.stem)
    if labels:
        ts.labels = dict(labels)
    return ts


def write_roi_timeseries(ts: RoiTimeSeries, path) -> None:
    Path(path).write_text(format_roi_timeseries(ts), encoding="utf-8")


# -- manifests -----------------------------------------------------------------------

@dataclass
class ManifestEntry:
    subject_id: str
    path: str
    labels: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    entries: list
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest subject_ids are not unique")


def write_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "schema_version": manifest.schema_version,
        "entries": [
            {"subject_id": e.subject_id, "path": e.path, "labels": e.labels} for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"unsupported manifest schema {doc.get('schema_version')!r}")
    try:
        entries = [ManifestEntry(e["subject_id"], e["path"], dict(e.get("labels", {}))) for e in doc["entries"]]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest entry: {exc}") from None
    return DatasetManifest(entries, doc["schema_version"])


def load_dataset(manifest_path) -> list[RoiTimeSeries]:
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    out = []
    for e in manifest.entries:
        p = Path(e.path)
        if not p.is_absolute():
            p = manifest_path.parent / p
        if not p.exists():
            raise DataError(f"manifest references missing file {p}")
        out.append(load_roi_timeseries(p, e.subject_id, e.labels))
    return out


def save_dataset(subjects: list[RoiTimeSeries], out_dir, manifest_name: str = "manifest.json") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ts in subjects:
        rel = f"{ts.subject_id}.txt"
        write_roi_timeseries(ts, out_dir / rel)
        entries.append(ManifestEntry(ts.subject_id, rel, dict(ts.labels)))
    path = out_dir / manifest_name
    write_manifest(DatasetManifest(entries), path)
    return path


# -- synthetic corpus ---------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_subjects: int = 200
    N: int = 16
    T_max: int = 200
    n_states: int = 4
    switch_rates: tuple = (0.05, 0.45)
    ar_coeff: float = 0.5
    noise_sd: float = 0.1
    seed: int = 0
    within_corr: float = 0.6

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.N < 2 or self.T_max < 2:
            raise ConfigError("N and T_max must be >= 2")
        if self.n_states < 2:
            raise ConfigError("n_states must be >= 2")
        if len(self.switch_rates) < 2:
            raise ConfigError("need a switch rate per class (>= 2 classes)")
        if any(not 0.0 <= r <= 1.0 for r in self.switch_rates):
            raise ConfigError("switch rates must lie in [0, 1]")
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ConfigError("ar_coeff must lie in [0, 1)")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be positive")


def state_templates(n: int, n_states: int, within_corr: float, rng: np.random.Generator) -> np.ndarray:
    """Per-state covariance: two equicorrelated blocks under a random ROI permutation."""
    out = np.empty((n_states, n, n))
    for s in range(n_states):
        perm = rng.permutation(n)
        block = np.zeros(n, dtype=int)
        block[perm[n // 2:]] = 1
        same = block[:, None] == block[None, :]
        cov = np.where(same, within_corr, 0.0)
        np.fill_diagonal(cov, 1.0)
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise DataError(f"state template {s} is not positive semi-definite")
        out[s] = cov
    return out


def _cholesky_psd(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_state_sequence(length: int, n_states: int, rate: float, rng) -> np.ndarray:
    """Markov chain that jumps to a uniformly chosen *other* state with prob ``rate``.

    The uniform distribution is stationary for every rate, so classes that
    differ only in rate share state occupancy.
    """
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.integers(n_states)
    switches = rng.random(length) < rate
    hops = rng.integers(1, n_states, size=length)
    for tau in range(1, length):
        states[tau] = (states[tau - 1] + hops[tau]) % n_states if switches[tau] else states[tau - 1]
    return states


def synth_dataset(cfg: SynthConfig, return_states: bool = False):
    """Generate a labelled corpus whose class signal lives in state-switching speed.

    Labels per subject: ``class`` (index into ``cfg.switch_rates``) and
    ``switch_rate`` (the realized switch frequency of its latent trace).
    With ``return_states`` also returns the list of latent state sequences.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    templates = state_templates(cfg.N, cfg.n_states, cfg.within_corr, rng)
    factors = np.stack([_cholesky_psd(c) for c in templates])
    n_classes = len(cfg.switch_rates)
    classes = rng.permutation(np.arange(cfg.n_subjects) % n_classes)
    a = cfg.ar_coeff
    innov = math.sqrt(1.0 - a * a)
    width = len(str(cfg.n_subjects - 1))
    subjects, traces = [], []
    for i, c in enumerate(classes):
        states = sample_state_sequence(cfg.T_max, cfg.n_states, cfg.switch_rates[c], rng)
        eps = rng.standard_normal((cfg.T_max, cfg.N))
        drive = np.einsum("tij,tj->ti", factors[states], eps)
        x = np.empty_like(drive)
        x[0] = drive[0]
        for tau in range(1, cfg.T_max):
            x[tau] = a * x[tau - 1] + innov * drive[tau]
        x += cfg.noise_sd * rng.standard_normal(x.shape)
        n_switch = int(np.count_nonzero(np.diff(states)))
        labels = {"class": int(c), "switch_rate": n_switch / (cfg.T_max - 1)}
        subjects.append(RoiTimeSeries(f"sub-{i:0{width}d}", x.T.copy(), labels))
        traces.append(states)
    return (subjects, traces) if return_states else subjects


def static_fc(ts: RoiTimeSeries) -> np.ndarray:
    """Whole-scan Pearson FC."""
    return np.corrcoef(ts.data)


# -- time-axis operations ------------------------------------------------------------------

def random_time_slice(ts: RoiTimeSeries, length: int, rng: np.random.Generator) -> RoiTimeSeries:
    """Contiguous slice of ``length`` timepoints with a uniformly drawn start."""
    t = ts.n_timepoints
    if length > t:
        raise DataError(f"slice length {length} exceeds T_max = {t}")
    if length < 2:
        raise DataError("slice length must be >= 2")
    start = int(rng.integers(0, t - length + 1))
    return ts.replace(ts.data[:, start:start + length].copy())


def n_missing(ratio: float, t: int) -> int:
    # guard against 0.29 * 100 = 28.999...
    return int(math.floor(ratio * t + 1e-9))


def mask_timesteps(ts: RoiTimeSeries, ratio: float, rng: np.random.Generator) -> RoiTimeSeries:
    """Zero ``floor(ratio * T_max)`` distinct, uniformly chosen columns."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"missing ratio must lie in [0, 1), got {ratio}")
    t = ts.n_timepoints
    k = n_missing(ratio, t)
    data = ts.data.copy()
    if k:
        cols = rng.choice(t, size=k, replace=False)
        data[:, cols] = 0.0
    return ts.replace(data)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


__all__ = [
    "DatasetManifest",
    "ManifestEntry",
    "RoiTimeSeries",
    "SynthConfig",
    "format_roi_timeseries",
    "load_dataset",
    "load_roi_timeseries",
    "mask_timesteps",
    "parse_roi_timeseries",
    "random_time_slice",
    "read_manifest",
    "save_dataset",
    "synth_dataset",
    "write_manifest",
    "write_roi_timeseries",
]

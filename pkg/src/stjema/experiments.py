"""Desk-scale study: pretrain each loss variant, then probe its frozen encoder.

Shared by the acceptance tests and the demo scripts so both measure the
same thing.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .signal import synth_dataset
from .trainer import GraphCache, linear_probe, pretrain

# 200 subjects, 16 ROIs, 200 samples; windows of 24 with stride 8 give 22 graphs
DESK = {"n_nodes": 16, "n_subjects": 200, "n_timepoints": 200, "window": 24, "stride": 8}
VARIANTS = {
    "full": {},
    "no_node": {"use_node": False},
    "no_edge": {"use_edge": False},
    "no_spatial": {"use_spatial": False},
    "no_temporal": {"use_temporal": False},
}


def desk_dataset(seed: int = 0):
    return synth_dataset(TrainConfig(seed=seed, **DESK).synth_config())


def desk_pretrain_config(seed: int, steps: int = 500, **change) -> TrainConfig:
    return TrainConfig.for_phase("pretrain", seed=seed, steps=steps, lr=1e-3, **DESK, **change)


def desk_probe_config(seed: int, missing_ratio: float = 0.0) -> TrainConfig:
    # half the subjects held out keeps the AUROC estimate from being too noisy
    return TrainConfig.for_phase("probe", seed=seed, test_fraction=0.5, missing_ratio=missing_ratio, **DESK)


@dataclass
class StudyResult:
    # scores[variant][missing_ratio] -> one probe AUROC per seed; variant "random" is an untrained encoder
    scores: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)  # variant -> pretrain MetricsReport per seed
    pretrain_seconds: dict = field(default_factory=dict)
    seconds: float = 0.0

    def add(self, variant: str, ratio: float, value: float) -> None:
        self.scores.setdefault(variant, {}).setdefault(ratio, []).append(value)

    def mean(self, variant: str, ratio: float = 0.0) -> float:
        return float(np.mean(self.scores[variant][ratio]))


def run_study(seeds, variants=tuple(VARIANTS), missing_ratios=(0.0,), sweep_variants=("full",),
              steps: int = 500, dataset=None, log=None) -> StudyResult:
    """Probe AUROC for every (variant, seed); ``sweep_variants`` are also probed at each missing ratio."""
    dataset = dataset if dataset is not None else desk_dataset()
    cache = GraphCache()
    result = StudyResult()
    start = time.perf_counter()
    for seed in seeds:
        result.add("random", 0.0, linear_probe(None, desk_probe_config(seed), dataset, cache).metrics["auroc"])
        for name in variants:
            tic = time.perf_counter()
            ckpt, report = pretrain(desk_pretrain_config(seed, steps, **VARIANTS[name]), dataset, cache=cache)
            result.pretrain_seconds.setdefault(name, []).append(time.perf_counter() - tic)
            result.reports.setdefault(name, []).append(report)
            ratios = missing_ratios if name in sweep_variants else (0.0,)
            for ratio in ratios:
                res = linear_probe(ckpt, desk_probe_config(seed, ratio), dataset, cache).metrics
                result.add(name, ratio, res["auroc"])
                if log:
                    log(f"seed={seed} variant={name} missing={ratio} auroc={res['auroc']:.4f}")
    result.seconds = time.perf_counter() - start
    return result

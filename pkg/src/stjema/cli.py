"""Command-line entry points: ``stjema {synth,pretrain,finetune,probe,ablate,eval}``.

Every command takes an optional JSON config file plus ``--set key=value``
overrides, writes the fully resolved config as ``config.json`` in its output
directory, and exits with 0 (success), 2 (config error), 3 (data error) or
4 (numeric failure).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config, write_config
from .errors import ConfigError, DataError, NumericError
from .model import init_pretrain_params
from .signal import load_dataset, save_dataset, synth_dataset
from .trainer import Checkpoint, GraphCache, finetune, linear_probe, predict, pretrain

OUTPUT_ROOT_ENV = "STJEMA_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

VARIANTS = {
    "full": {},
    "no_node": {"use_node": False},
    "no_edge": {"use_edge": False},
    "no_spatial": {"use_spatial": False},
    "no_temporal": {"use_temporal": False},
}


def output_dir(cfg: TrainConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    return out


def write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        raise DataError("nothing to summarize")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _dataset(cfg: TrainConfig):
    if not cfg.manifest:
        raise ConfigError("manifest path is required")
    return load_dataset(cfg.manifest)


def _cache(out: Path) -> GraphCache:
    return GraphCache(out / "graph_cache")


def _load_pretrained(cfg: TrainConfig, required: bool) -> Checkpoint | None:
    if not cfg.checkpoint:
        if required:
            raise ConfigError("a checkpoint path is required")
        return None
    expected = init_pretrain_params(cfg.model_config(), np.random.default_rng(0))
    return Checkpoint.load(cfg.checkpoint, expected)


def _seeds(cfg: TrainConfig) -> list[int]:
    return [int(s) for s in cfg.seeds] or [cfg.seed]


# -- commands -------------------------------------------------------------------------

def cmd_synth(cfg: TrainConfig) -> dict:
    out = output_dir(cfg)
    subjects = synth_dataset(cfg.synth_config())
    manifest = save_dataset(subjects, out)
    write_config(cfg.replace(manifest=str(manifest)), out / "config.json")
    return {"manifest": str(manifest), "n_subjects": len(subjects)}


def _truncate_log(path: Path, step: int) -> None:
    """Drop loss records past ``step`` left behind by an interrupted run."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in keep))


def cmd_pretrain(cfg: TrainConfig) -> dict:
    out = output_dir(cfg)
    write_config(cfg, out / "config.json")
    dataset = _dataset(cfg)
    resume = None
    if cfg.resume:
        resume = Checkpoint.load(cfg.resume, init_pretrain_params(cfg.model_config(), np.random.default_rng(0)))
    if resume:
        _truncate_log(out / "losses.jsonl", resume.step)
    log = open(out / "losses.jsonl", "a" if resume else "w")
    try:
        ckpt, report = pretrain(
            cfg, dataset, resume=resume, cache=_cache(out), snapshot_path=out / "diagnostic.bin",
            on_step=lambda step, parts: log.write(json.dumps({"step": step, **parts.as_dict()}) + "\n"),
            checkpoint_path=out / "checkpoint.bin",
        )
    finally:
        log.close()
    ckpt.save(out / "checkpoint.bin")
    losses = report.losses()
    summary = {
        "steps": ckpt.step,
        "start_step": resume.step if resume else 0,
        "first_loss": float(losses[0]) if len(losses) else float("nan"),
        "final_loss": float(losses[-1]) if len(losses) else float("nan"),
        "min_target_std": float(min(report.target_std)) if report.target_std else float("nan"),
        "checkpoint": str(out / "checkpoint.bin"),
    }
    write_csv(out / "summary.csv", [summary])
    return summary


def _downstream(cfg: TrainConfig, probe: bool) -> dict:
    out = output_dir(cfg)
    write_config(cfg, out / "config.json")
    dataset = _dataset(cfg)
    ckpt = _load_pretrained(cfg, required=probe)
    cache = _cache(out)
    rows, records = [], []
    for seed in _seeds(cfg):
        run = cfg.replace(seed=seed)
        if probe:
            report = linear_probe(ckpt, run, dataset, cache)
        else:
            store, report = finetune(ckpt, run, dataset, cache)
            Checkpoint(store, run.epochs, run.to_dict(), run.config_hash(), kind="finetune",
                       extra=report.info).save(out / f"model-seed{seed}.bin")
        records += [{"seed": seed, **r} for r in report.records]
        records.append({"seed": seed, "final": True, **report.metrics})
        rows.append({"seed": seed, **report.metrics})
    write_jsonl(out / "metrics.jsonl", records)
    write_csv(out / "summary.csv", rows)
    return {"rows": rows}


def cmd_finetune(cfg: TrainConfig) -> dict:
    return _downstream(cfg, probe=False)


def cmd_probe(cfg: TrainConfig) -> dict:
    return _downstream(cfg, probe=True)


def ablation_runs(cfg: TrainConfig) -> list[tuple[str, dict]]:
    runs = []
    for name in cfg.ablate_variants:
        if name not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {name!r}; expected one of {sorted(VARIANTS)}")
        runs.append((name, VARIANTS[name]))
    for pair in cfg.mask_ratio_grid:
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ConfigError("mask_ratio_grid entries must be [alpha_min, alpha_max] pairs")
        runs.append((f"alpha_{pair[0]}_{pair[1]}", {"alpha_min": float(pair[0]), "alpha_max": float(pair[1])}))
    if not runs:
        raise ConfigError("no ablation variants selected")
    return runs


OPTIMIZER_KEYS = ("phase", "steps", "epochs", "batch_size", "lr", "weight_decay", "schedule")


def probe_config(cfg: TrainConfig) -> TrainConfig:
    """``cfg`` with the optimizer settings reset to the probe defaults."""
    shared = {k: v for k, v in cfg.to_dict().items() if k not in OPTIMIZER_KEYS}
    return TrainConfig.for_phase("probe").replace(**shared)


def cmd_ablate(cfg: TrainConfig) -> dict:
    """Pretrain then probe every variant for every seed; rank by mean probe score."""
    out = output_dir(cfg)
    write_config(cfg, out / "config.json")
    dataset = _dataset(cfg)
    cache = _cache(out)
    metric = "auroc" if cfg.task == "classify" else "mae"
    records, table = [], []
    for name, change in ablation_runs(cfg):
        scores = []
        for seed in _seeds(cfg):
            pre = cfg.replace(phase="pretrain", seed=seed, **change)
            ckpt, report = pretrain(pre, dataset, cache=cache)
            probe_cfg = probe_config(cfg).replace(seed=seed)
            res = linear_probe(ckpt, probe_cfg, dataset, cache).metrics
            scores.append(res[metric])
            records.append({"variant": name, "seed": seed, "final_loss": float(report.losses()[-1]), **res})
        table.append({"variant": name, metric: float(np.mean(scores)), f"{metric}_sd": float(np.std(scores)),
                      "n_seeds": len(scores)})
    table.sort(key=lambda r: r[metric], reverse=metric == "auroc")
    for rank, row in enumerate(table, start=1):
        row["rank"] = rank
    write_jsonl(out / "metrics.jsonl", records)
    write_csv(out / "summary.csv", table)
    return {"table": table}


def cmd_eval(cfg: TrainConfig) -> dict:
    """Score a fine-tuned model (``checkpoint``) on the configured test split."""
    out = output_dir(cfg)
    write_config(cfg, out / "config.json")
    if not cfg.checkpoint:
        raise ConfigError("a fine-tuned checkpoint path is required")
    ckpt = Checkpoint.load(cfg.checkpoint)
    if ckpt.kind != "finetune":
        raise DataError(f"eval needs a fine-tuned checkpoint, got kind {ckpt.kind!r}")
    info = ckpt.extra
    if info.get("task") != cfg.task:
        raise ConfigError(f"checkpoint was trained for task {info.get('task')!r}, config asks for {cfg.task!r}")
    dataset = _dataset(cfg)
    metrics, test_idx, pred = predict(ckpt.params, cfg, dataset, info, _cache(out))
    rows = []
    for i, p in zip(test_idx, pred):
        score = p[-1] if np.ndim(p) else p
        rows.append({"subject_id": dataset[i].subject_id, "prediction": float(score)})
    write_csv(out / "predictions.csv", rows)
    write_jsonl(out / "metrics.jsonl", [metrics])
    write_csv(out / "summary.csv", [metrics])
    return metrics


COMMANDS = {
    "synth": (cmd_synth, None),
    "pretrain": (cmd_pretrain, "pretrain"),
    "finetune": (cmd_finetune, "finetune"),
    "probe": (cmd_probe, "probe"),
    "ablate": (cmd_ablate, "pretrain"),
    "eval": (cmd_eval, "finetune"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stjema", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, phase = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.overrides, phase=phase)
        result = fn(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

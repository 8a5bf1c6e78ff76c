"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._alloc import tune_allocator
from .config import ExperimentConfig, load_config
from .data import AMCI, HC, read_dataset, write_dataset
from .errors import ConfigError, DataError, LeakageError, NumericalError
from .evaluation import (
    VARIANT_LABELS,
    VARIANTS,
    export_feature_projection,
    loso_cross_validate,
    run_ablation,
    write_metrics_csv,
    write_results,
)
from .features import build_fold_features, compute_band_moments, extract_features, fit_filter_bank
from .model import save_checkpoint
from .synth import generate_dataset, split_domains
from .training import train

logger = logging.getLogger("gfdann")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4


def _setup_logging() -> None:
    level = os.environ.get("GFDANN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        updates["jobs"] = args.jobs
    if getattr(args, "variant", None) is not None:
        updates["variant"] = args.variant
    if getattr(args, "out", None) is not None:
        updates["output_dir"] = args.out
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        updates["seeds"] = args.seeds
    return replace(cfg, **updates)


def _write_snapshot(cfg: ExperimentConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, **cfg.to_dict()}
    tmp = out / "config.json.tmp"
    tmp.write_text(json.dumps(snap, indent=2, sort_keys=True))
    os.replace(tmp, out / "config.json")


def _dataset_dir(cfg: ExperimentConfig) -> Path:
    if cfg.dataset_path is None:
        raise ConfigError("dataset_path is required")
    return Path(cfg.dataset_path)


def _load(cfg: ExperimentConfig):
    ds = read_dataset(_dataset_dir(cfg))
    counts = {g: sum(1 for v in ds.subject_groups().values() if v == g) for g in (AMCI, HC)}
    logger.info("loaded %d epochs from %d subjects", len(ds), len(ds.subjects()))
    return ds, counts


def _fmt_pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    if cfg.generator is None:
        raise ConfigError("generate needs a 'generator' section")
    gen = replace(cfg.generator, seed=cfg.seed) if args.seed is not None else cfg.generator
    out = Path(args.out) if args.out else _dataset_dir(cfg)
    ds = generate_dataset(gen)
    try:
        write_dataset(ds, out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    print(f"{len(ds.subjects())} subjects, {len(ds)} epochs -> {out}")
    return EXIT_OK


def cmd_features(cfg: ExperimentConfig, args) -> int:
    """Fit one bank on every subject and save the feature tensors.

    For inspection only; cross-validation refits per fold.
    """
    ds, _ = _load(cfg)
    out = Path(cfg.output_dir)
    _write_snapshot(cfg, out, "features")
    grid = cfg.features.grid(ds.epoch_length)
    moments = compute_band_moments(ds, grid, cfg.features)
    bank = fit_filter_bank(moments, cfg.features)
    feats = extract_features(moments, bank, cfg.features.log_power)
    tmp = out / "features.npz.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, features=feats, subject=ds.subject, group=ds.group, filters=bank.filters,
                 eigenvalues=bank.eigenvalues, frequency_bands=np.array(grid.frequency_bands),
                 time_bands=np.array(grid.time_bands))
    os.replace(tmp, out / "features.npz")
    print(f"features {feats.shape[1]}x{feats.shape[2]}x{feats.shape[3]} for {len(ds)} epochs, "
          f"{bank.n_filters} CSP filters -> {out / 'features.npz'}")
    return EXIT_OK


def cmd_crossval(cfg: ExperimentConfig, args) -> int:
    ds, _ = _load(cfg)
    out = Path(cfg.output_dir)
    _write_snapshot(cfg, out, "crossval")
    result = loso_cross_validate(ds, cfg.features, cfg.train, cfg.arch, master_seed=cfg.seed,
                                 domain_shift=cfg.effective_shift, jobs=cfg.jobs, out_dir=out,
                                 variant=cfg.variant)
    write_results(result, out)
    m = result.metrics
    print(f"{VARIANT_LABELS[cfg.variant]}: Acc {_fmt_pct(m['acc'])}  ACP {_fmt_pct(m['acp'])}  "
          f"Sen {_fmt_pct(m['sen'])}  Spe {_fmt_pct(m['spe'])}  refused {m['n_refused']}")
    return EXIT_OK


def cmd_ablation(cfg: ExperimentConfig, args) -> int:
    ds, _ = _load(cfg)
    out = Path(cfg.output_dir)
    _write_snapshot(cfg, out, "ablation")
    seeds = [cfg.seed + i for i in range(cfg.seeds)]
    rows = run_ablation(ds, cfg.features, cfg.train, cfg.arch, master_seeds=seeds,
                        domain_shift=cfg.effective_shift, jobs=cfg.jobs)
    extra = ["acc_sd", "acp_sd", "sen_sd", "spe_sd"]
    write_metrics_csv(rows, out / "metrics.csv", extra)
    tmp = out / "ablation.json.tmp"
    tmp.write_text(json.dumps({"seeds": seeds, "rows": rows}, indent=2, sort_keys=True, default=str))
    os.replace(tmp, out / "ablation.json")
    for s in seeds:
        logger.info("seed %d fold seeds %s", s, rows[0]["fold_seeds"][seeds.index(s)])
    print(f"{'variant':<10} {'GFE':<5} {'DBDA':<5} {'Acc':>14} {'ACP':>14} {'Sen':>14} {'Spe':>14}")
    for r in rows:
        cells = []
        for k in ("acc", "acp", "sen", "spe"):
            if r[k] is None:
                cells.append(f"{'n/a':>14}")
            elif len(seeds) > 1:
                cells.append(f"{100 * r[k]:7.2f} ± {100 * r[k + '_sd']:5.2f}")
            else:
                cells.append(f"{100 * r[k]:>14.2f}")
        print(f"{r['variant']:<10} {str(r['GFE']):<5} {str(r['DBDA']):<5} " + " ".join(cells))
    return EXIT_OK


def cmd_project(cfg: ExperimentConfig, args) -> int:
    """Train on every subject but one and export 2-D projections of both groups."""
    ds, _ = _load(cfg)
    out = Path(cfg.output_dir)
    _write_snapshot(cfg, out, "project")
    subjects = ds.subjects()
    target = cfg.projection_subject if cfg.projection_subject is not None else subjects[-1]
    if target not in subjects:
        raise DataError(f"projection_subject {target} is not in the dataset")
    source, tgt = split_domains(ds, target, cfg.effective_shift, seed=cfg.seed)
    grid = cfg.features.grid(ds.epoch_length)
    fold = build_fold_features(source, tgt, grid, cfg.features)
    gfe, dbda = VARIANTS[cfg.variant]
    tcfg = replace(cfg.train, seed=cfg.seed, gfe_enabled=gfe, dbda_enabled=dbda)
    arch = replace(cfg.arch, input_shape=fold.train.shape[1:])
    result = train(fold.train, fold.train_group, fold.train_subject, fold.test, tcfg, arch,
                   log_path=out / "training_log.csv")
    save_checkpoint(result.model, out / "model.ckpt")
    for label, name in ((AMCI, "c1"), (HC, "c2")):
        sel = fold.train_group == label
        ids = [f"{s}:{i}" for s, i in zip(source.subject[sel], source.epoch_index[sel])]
        export_feature_projection(result.model, fold.train[sel], out / f"projection_{name}.csv", ids)
    print(f"projections for {int((fold.train_group == AMCI).sum())} aMCI and "
          f"{int((fold.train_group == HC).sum())} HC samples -> {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "features": cmd_features,
    "crossval": cmd_crossval,
    "ablation": cmd_ablation,
    "project": cmd_project,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfdann", description="GF-DANN experiments on epoch datasets")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--jobs", type=int, help="parallel folds")
        p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation variant")
        p.add_argument("--out", help="output directory")
        if name == "ablation":
            p.add_argument("--seeds", type=int, help="number of consecutive master seeds to average")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        tune_allocator()
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LeakageError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``apc <subcommand> ...``.

Settings resolve as command-line flag > config file (``--config``, INI
sections ``[train]``, ``[correct]``, ``[synth]``) > built-in default.
Logs go to stderr; results go to files.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .correct import CorrectionConfig, correct_batch, in_batch_support
from .data import (
    ConfigError,
    ContractError,
    FORMATS,
    PAD,
    build_split_sequences,
    k_core_filter,
    load_dataset,
    load_events,
    save_dataset,
)
from .evaluate import run_experiment, sweep, to_csv
from .manifest import build_manifest, file_sha256, write_manifest
from .model import BACKBONES, load_checkpoint
from .train import TrainConfig, train_model, train_pair

logger = logging.getLogger("apc")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    return type(default)(value)


def resolve(cls, args: argparse.Namespace, section: str, flag_map: dict[str, str]):
    """Build a config dataclass from defaults, the config-file section and flags."""
    values = {f.name: f.default for f in dataclasses.fields(cls)}
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        if not parser.read(args.config, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {args.config}")
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in values:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _coerce(raw, values[key])
    for field, dest in flag_map.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[field] = v
    return cls(**values)


TRAIN_FLAGS = {"lr": "lr", "l2": "l2", "dropout": "dropout", "epochs": "epochs",
               "batch_size": "batch_size", "negatives": "negatives_per_positive",
               "seed": "seed", "patience": "patience", "eval_every": "eval_every",
               "dim": "dim", "heads": "heads", "exclude_history": "exclude_history"}
CORRECT_FLAGS = {"eta": "eta", "alpha": "alpha", "n_prime": "n_prime", "n": "n",
                 "max_iter": "max_iter", "tol": "tol", "window": "window",
                 "negatives": "negatives", "shortlist_guard": "shortlist_guard",
                 "info_gain_guard": "info_gain_guard", "eps": "eps", "batch_size": "batch_size"}


def _add_train_flags(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--negatives-per-positive", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--exclude-history", action=argparse.BooleanOptionalAction, default=None)


def _add_correct_flags(p, sweepable: bool = False):
    if sweepable:
        p.add_argument("--eta", type=_floats, help="comma-separated grid")
        p.add_argument("--alpha", type=_floats, help="comma-separated grid")
        p.add_argument("--n-prime", type=_ints, help="comma-separated grid")
        p.add_argument("--max-iter", type=_ints, help="comma-separated grid")
    else:
        p.add_argument("--eta", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--n-prime", type=int)
        p.add_argument("--max-iter", type=int)
    p.add_argument("--n", type=int, help="final list length")
    p.add_argument("--tol", type=float)
    p.add_argument("--window", choices=["all", "nearest"])
    p.add_argument("--negatives", choices=["in-batch", "full"])
    p.add_argument("--shortlist-guard", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--info-gain-guard", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--eps", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--split", choices=["test", "valid"], default=None)
    p.add_argument("--all-candidates", action="store_true",
                   help="rank every item, including ones already in the history")
    p.add_argument("--oracle-world", help="world JSON; replaces f_R with a noisy exact oracle")
    p.add_argument("--sigma", type=float, default=0.0, help="oracle noise scale")
    p.add_argument("--noise-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"apc {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--threads", type=int, default=1, help="torch worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="load, k-core filter, split and persist a log")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=FORMATS, default="ml")
    p.add_argument("--k-core", type=int, default=5)
    p.add_argument("--single-pass", action="store_true", help="one filtering pass instead of a fixed point")
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a Markov world and dataset")
    p.add_argument("--world", help="existing world JSON (K, P rows, seed)")
    p.add_argument("--K", type=int, default=100)
    p.add_argument("--clusters", type=int, default=4, help="1 gives a single chain")
    p.add_argument("--affinity", type=float, default=0.9)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train f_R and/or f_A")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", choices=BACKBONES, default="attention-mini")
    p.add_argument("--role", choices=["both", "recommender", "abductive"], default="both")
    _add_train_flags(p)

    for name, help_ in (("correct", "correct per-user recommendations"),
                        ("evaluate", "report original vs corrected metrics")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--models", required=True)
        p.add_argument("--out", required=True)
        if name == "correct":
            p.add_argument("--trace", action="store_true", help="write per-user diagnostics")
        _add_correct_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="grid over eta, alpha, N' and iterations")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    _add_correct_flags(p, sweepable=True)

    p = sub.add_parser("selftest", parents=[common], help="gradient-oracle and invariant suites")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- helpers -------------------------------------------------------------------


def _load_models(args, data_dir: Path, need_recommender: bool):
    models = Path(args.models)
    catalog_hash = file_sha256(data_dir / "catalog.json")
    loaded = {}
    for name in (["f_R"] if need_recommender else []) + ["f_A"]:
        model = load_checkpoint(models / f"{name}.bin")
        got = model.metadata.get("catalog_sha256")
        if got != catalog_hash:
            raise ContractError(f"{name} was trained on a different catalog "
                                f"({got} != {catalog_hash})")
        loaded[name] = model
    return loaded


def _recommender(args, loaded):
    if args.oracle_world:
        from .synth import NoisyOracleScorer, load_world

        return NoisyOracleScorer(load_world(args.oracle_world), args.sigma, args.noise_seed)
    return loaded["f_R"]


def _split(ds, split: str):
    return ds.test_inputs() if split == "test" else ds.valid_inputs()


def _inputs(args, data_dir) -> dict:
    inputs = {"data": data_dir, "models": args.models}
    if getattr(args, "oracle_world", None):
        inputs["oracle_world"] = args.oracle_world
    return inputs


def _summary_table(rows: list[tuple[str, float, float]], n: int) -> str:
    lines = [f"{'method':<10} {'R@' + str(n):>10} {'N@' + str(n):>10}"]
    lines += [f"{name:<10} {r:>10.4f} {g:>10.4f}" for name, r, g in rows]
    return "\n".join(lines)


# -- subcommands ---------------------------------------------------------------


def cmd_prepare(args) -> int:
    log = load_events(args.input, args.format)
    filtered = k_core_filter(log, args.k_core, iterate=not args.single_pass)
    ds, catalog = build_split_sequences(filtered, args.max_len)
    out = save_dataset(ds, catalog, args.out)
    config = {"format": args.format, "k_core": args.k_core, "max_len": args.max_len,
              "single_pass": args.single_pass}
    manifest = build_manifest("prepare", config, {}, {"input": args.input})
    manifest["stats"] = {"records": len(log), "skipped": log.skipped, "kept": len(filtered),
                         "users": catalog.n_users, "items": catalog.n_items}
    write_manifest(out, manifest)
    logger.info("prepared %d users, %d items -> %s", catalog.n_users, catalog.n_items, out)
    return 0


def cmd_synth(args) -> int:
    from .synth import clustered_world, gen_markov_dataset, load_world, random_world, save_world

    if args.world:
        world = load_world(args.world)
    elif args.clusters > 1:
        world = clustered_world(args.K, args.clusters, args.seed, affinity=args.affinity)
    else:
        world = random_world(args.K, args.seed)
    ds = gen_markov_dataset(world, args.users, args.T, seed=args.seed)
    out = save_dataset(ds, None, args.out)
    save_world(world, out / "world.json")
    config = {k: getattr(args, k) for k in ("K", "clusters", "affinity", "users", "T")}
    inputs = {"world": args.world} if args.world else {}
    write_manifest(out, build_manifest("synth", config, {"seed": args.seed}, inputs))
    return 0


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    ds, _ = load_dataset(data_dir)
    cfg = resolve(TrainConfig, args, "train", TRAIN_FLAGS)
    meta = {"catalog_sha256": file_sha256(data_dir / "catalog.json")}
    out = Path(args.out)
    if args.role == "both":
        train_pair(ds, cfg, cfg, args.backbone, out_dir=out, metadata=meta)
    else:
        from .data import reverse_dataset
        from .model import save_checkpoint

        data = ds if args.role == "recommender" else reverse_dataset(ds)
        model = train_model(data, cfg, args.backbone, role=args.role)
        name = "f_R" if args.role == "recommender" else "f_A"
        save_checkpoint(model, out / f"{name}.bin",
                        {**meta, "train_config": cfg.to_dict(), "fit_log": model.fit_log})
    config = {"train": cfg.to_dict(), "backbone": args.backbone, "role": args.role}
    write_manifest(out, build_manifest("train", config, {"seed": cfg.seed}, {"data": data_dir}))
    return 0


def cmd_correct(args) -> int:
    data_dir = Path(args.data)
    ds, catalog = load_dataset(data_dir)
    cfg = resolve(CorrectionConfig, args, "correct", CORRECT_FLAGS)
    loaded = _load_models(args, data_dir, need_recommender=not args.oracle_world)
    f_R, f_A = _recommender(args, loaded), loaded["f_A"]
    test = _split(ds, args.split or "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corrections.jsonl", "w", encoding="utf-8") as rec_fh, \
            open(out / "trace.jsonl", "w", encoding="utf-8") if args.trace else contextlib.nullcontext() as trace_fh:
        for s in range(0, len(test), cfg.batch_size):
            rows = np.arange(s, min(s + cfg.batch_size, len(test)))
            H = test.items[rows]
            scores = f_R.score_all(H)
            exclude = np.zeros_like(scores, dtype=bool)
            if not args.all_candidates:
                exclude[np.repeat(np.arange(len(rows)), H.shape[1]), H.ravel()] = True
            exclude[:, PAD] = True
            support = in_batch_support(H, f_A.n_items) if cfg.negatives == "in-batch" else None
            for res in correct_batch(f_A, H, scores, cfg, exclude, support, test.users[rows]):
                rec = {"user": catalog.users[res.user], "recommendations":
                       [catalog.item_id(i) for i in res.final_top_n], "rejected": res.rejected}
                rec_fh.write(json.dumps(rec) + "\n")
                if trace_fh is not None:
                    trace_fh.write(json.dumps(res.to_json()) + "\n")
    config = {"correct": cfg.to_dict(), "split": args.split or "test",
              "all_candidates": args.all_candidates, "sigma": args.sigma}
    write_manifest(out, build_manifest("correct", config, {"noise_seed": args.noise_seed},
                                       _inputs(args, data_dir)))
    return 0


def cmd_evaluate(args) -> int:
    data_dir = Path(args.data)
    ds, _ = load_dataset(data_dir)
    cfg = resolve(CorrectionConfig, args, "correct", CORRECT_FLAGS)
    loaded = _load_models(args, data_dir, need_recommender=not args.oracle_world)
    f_R, f_A = _recommender(args, loaded), loaded["f_A"]
    split = args.split or "test"
    ori, cor = run_experiment(f_R, f_A, _split(ds, split), cfg, not args.all_candidates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = {**cfg.to_dict(), "split": split,
           "users": len(ori.per_user), "skipped": ori.skipped,
           "ori_recall": ori.recall, "ori_ndcg": ori.ndcg,
           "recall": cor.recall, "ndcg": cor.ndcg,
           "ri_recall": cor.ri_recall, "ri_ndcg": cor.ri_ndcg,
           "rejected": sum(r["rejected"] for r in cor.per_user)}
    (out / "report.csv").write_text(to_csv([row]), encoding="utf-8")
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), "split": split, "ori": ori.summary(),
                   "corrected": cor.summary(),
                   "per_user": [{"ori": a, "corrected": b} for a, b in zip(ori.per_user, cor.per_user)]},
                  fh, indent=1, sort_keys=True)
    config = {"correct": cfg.to_dict(), "split": split, "all_candidates": args.all_candidates,
              "sigma": args.sigma, "threads": args.threads}
    write_manifest(out, build_manifest("evaluate", config, {"noise_seed": args.noise_seed},
                                       _inputs(args, data_dir)))
    print(_summary_table([("Ori", ori.recall, ori.ndcg), ("+APC", cor.recall, cor.ndcg)], cfg.n))
    return 0


def cmd_sweep(args) -> int:
    data_dir = Path(args.data)
    ds, _ = load_dataset(data_dir)
    grid = {k: getattr(args, k) for k in ("eta", "alpha", "n_prime", "max_iter") if getattr(args, k)}
    if not grid:
        raise ConfigError("give at least one of --eta, --alpha, --n-prime, --max-iter")
    scalar = argparse.Namespace(**{**vars(args), "eta": None, "alpha": None,
                                   "n_prime": None, "max_iter": None})
    cfg = resolve(CorrectionConfig, scalar, "correct", CORRECT_FLAGS)
    loaded = _load_models(args, data_dir, need_recommender=not args.oracle_world)
    f_R, f_A = _recommender(args, loaded), loaded["f_A"]
    split = args.split or "valid"
    table = sweep(grid, f_R, f_A, _split(ds, split), cfg, not args.all_candidates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(to_csv(table), encoding="utf-8")
    best = max(table, key=lambda r: r["ndcg"])
    if split == "valid":
        point = {k: best[k] for k in grid}
        final = sweep({k: [v] for k, v in point.items()}, f_R, f_A, _split(ds, "test"), cfg,
                      not args.all_candidates)
        (out / "best_test.csv").write_text(to_csv(final), encoding="utf-8")
    config = {"grid": grid, "correct": cfg.to_dict(), "split": split,
              "all_candidates": args.all_candidates, "sigma": args.sigma, "threads": args.threads}
    write_manifest(out, build_manifest("sweep", config, {"noise_seed": args.noise_seed},
                                       _inputs(args, data_dir)))
    print(to_csv(table), end="")
    return 0


def cmd_selftest(args) -> int:
    from .checks import run_selftest

    return 0 if run_selftest(args.trials, args.seed) else 1


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train,
            "correct": cmd_correct, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError, OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"apc: error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

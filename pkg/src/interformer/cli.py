"""Command-line entry point.

Every run reads one flat ``key = value`` configuration: defaults, then the
file given with ``--config``, then ``--set key=value`` and the convenience
flags. Keys are ``seed``, ``out``, ``data``, ``schema``, ``checkpoint``,
``ablate.seeds``, ``gradcheck.seeds`` plus ``model.*``, ``train.*`` and
``gen.*`` for the model, optimiser and synthetic-data fields. The output
directory can also come from the ``INTERFORMER_OUT`` environment variable
(a flag still wins).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ModelConfig, coerce, dump_kv, parse_kv
from .errors import ConfigError, InterFormerError
from .features import Dataset, FeatureSchema, GenConfig, generate_synthetic, load_csv, save_csv
from .model import load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainReport, evaluate_model, train

log = logging.getLogger("interformer")

OUT_ENV = "INTERFORMER_OUT"
MODES_ORDER = ("sole", "sep", "n2s", "s2n", "int")
METRICS = ("auc", "gauc", "logloss", "ne")


class UsageError(InterFormerError, ValueError):
    """Bad command line or configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    data: str = ""
    schema: str = ""
    checkpoint: str = ""
    ablate_seeds: str = ""
    gradcheck_seeds: int = 20
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)

    _TOP = {"seed": "seed", "out": "out", "data": "data", "schema": "schema", "checkpoint": "checkpoint",
            "ablate.seeds": "ablate_seeds", "gradcheck.seeds": "gradcheck_seeds"}

    def to_kv(self) -> Dict[str, object]:
        d: Dict[str, object] = {k: getattr(self, attr) for k, attr in self._TOP.items()}
        d.update({f"model.{k}": v for k, v in self.model.to_dict().items()})
        d.update({f"train.{f.name}": getattr(self.train, f.name) for f in fields(self.train)})
        d.update({f"gen.{f.name}": getattr(self.gen, f.name) for f in fields(self.gen) if f.name != "dim"})
        return d

    def snapshot(self) -> str:
        return dump_kv(self.to_kv())

    def seeds_for_ablation(self) -> List[int]:
        text = self.ablate_seeds.strip()
        if not text:
            return [self.seed]
        try:
            return [int(s) for s in text.replace(" ", "").split(",") if s]
        except ValueError:
            raise ConfigError(f"ablate.seeds: {text!r} is not a list of integers") from None


def apply_overrides(cfg: RunConfig, kv: Dict[str, str]) -> RunConfig:
    """Return ``cfg`` with text values applied; unknown keys raise ``ConfigError``."""
    top, model_kv, train_kv, gen_kv = {}, {}, {}, {}
    for key, value in kv.items():
        if key in RunConfig._TOP:
            attr = RunConfig._TOP[key]
            top[attr] = coerce(cfg, attr, value)
            if top[attr] is None:
                top[attr] = ""
        elif key.startswith("model."):
            model_kv[key[6:]] = value
        elif key.startswith("train."):
            train_kv[key[6:]] = value
        elif key.startswith("gen.") and key != "gen.dim":
            gen_kv[key[4:]] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    model = cfg.model
    if model_kv:
        merged = model.to_dict()
        for k, v in model_kv.items():
            if k not in merged:
                raise ConfigError(f"unknown config key 'model.{k}'")
            merged[k] = coerce(model, k, v)
        model = ModelConfig.from_dict(merged)
    tcfg = _replace_fields(cfg.train, train_kv, "train")
    gen = _replace_fields(cfg.gen, gen_kv, "gen")
    return replace(cfg, model=model, train=tcfg, gen=replace(gen, dim=model.dim), **top)


def _replace_fields(obj, kv: Dict[str, str], prefix: str):
    names = {f.name for f in fields(obj)}
    vals = {}
    for k, v in kv.items():
        if k not in names:
            raise ConfigError(f"unknown config key '{prefix}.{k}'")
        vals[k] = coerce(obj, k, v)
    return replace(obj, **vals)


def load_run_config(path: Optional[str], sets: Sequence[str], flags: Dict[str, Optional[str]]) -> RunConfig:
    kv: Dict[str, str] = {}
    if path:
        kv.update(parse_kv(Path(path).read_text(encoding="utf-8")))
    env_out = os.environ.get(OUT_ENV)
    if env_out:
        kv["out"] = env_out
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    kv.update({k: v for k, v in flags.items() if v is not None})
    return apply_overrides(RunConfig(), kv)


# ---------------------------------------------------------------------------
# data


def schema_path_for(data_path: str) -> Path:
    return Path(data_path).with_suffix(".schema")


def write_schema(schema: FeatureSchema, path) -> None:
    Path(path).write_text(dump_kv(schema.to_dict()), encoding="utf-8")


def read_schema(path) -> FeatureSchema:
    return FeatureSchema.from_dict(parse_kv(Path(path).read_text(encoding="utf-8")))


def load_dataset(cfg: RunConfig) -> Dataset:
    """The CSV named by ``data`` (schema from ``schema`` or the sibling
    ``.schema`` file), or a synthetic dataset drawn with ``seed``."""
    if not cfg.data:
        return generate_synthetic(cfg.gen, cfg.seed)
    schema = read_schema(cfg.schema or schema_path_for(cfg.data))
    ds = load_csv(cfg.data, schema)
    for line, reason in ds.malformed:
        log.warning("skipped line %d: %s", line, reason)
    return ds


# ---------------------------------------------------------------------------
# outputs


def _fmt(v: float) -> str:
    return repr(float(v))


def curves_tsv(report: TrainReport, series: str = "run") -> List[List[str]]:
    rows = []
    for r in report.epochs:
        for split, vals in (("train", (r.train_loss, r.train_auc, r.train_gauc, r.train_ne)),
                            ("test", (r.test_logloss, r.test_auc, r.test_gauc, r.test_ne))):
            for metric, v in zip(("logloss", "auc", "gauc", "ne"), vals):
                rows.append(["curve", f"{series}/{split}", str(r.epoch), metric, _fmt(v)])
    return rows


def write_tsv(path, rows: List[List[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("section\tseries\tx\tmetric\tvalue\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")


def read_metrics_csv(path) -> List[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def ablation_table(results: Dict[str, List[dict]], digest: str, seeds: Sequence[int]) -> str:
    """One row per mode, mean test metrics over ``seeds``."""
    lines = [f"# dataset sha256={digest} seeds={','.join(str(s) for s in seeds)}",
             "mode\t" + "\t".join(METRICS)]
    for mode in MODES_ORDER:
        runs = results[mode]
        lines.append(mode + "\t" + "\t".join(_fmt(np.mean([r[m] for r in runs])) for m in METRICS))
    return "\n".join(lines) + "\n"


def read_ablation_table(path) -> Dict[str, Dict[str, float]]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    header = lines[0].split("\t")
    for ln in lines[1:]:
        cells = ln.split("\t")
        out[cells[0]] = {k: float(v) for k, v in zip(header[1:], cells[1:])}
    return out


# ---------------------------------------------------------------------------
# commands


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.snapshot(), encoding="utf-8")
    return out


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    path = Path(args.output) if args.output else out / "data.csv"
    ds = generate_synthetic(cfg.gen, cfg.seed)
    save_csv(ds, path)
    write_schema(ds.schema, schema_path_for(str(path)))
    print(f"wrote {len(ds)} rows to {path} (train CTR {ds.background_ctr:.4f}, sha256 {ds.digest()[:16]})")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    ds = load_dataset(cfg)
    model, report = train(ds, cfg.model, cfg.seed, cfg.train)
    save_checkpoint(out / "model.ifck", model)
    (out / "metrics.csv").write_text(report.metrics_csv(), encoding="utf-8")
    write_tsv(out / "report.tsv", curves_tsv(report))
    print(report.summary())
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model.ifck"
    model = load_checkpoint(ckpt)
    ds = load_dataset(cfg)
    if model.schema != ds.schema:
        raise ConfigError("checkpoint schema does not match the dataset")
    split = ds.test() if args.split == "test" else ds.train()
    m = evaluate_model(model, split, ds.background_ctr, cfg.train.eval_batch_size)
    for k in METRICS:
        print(f"{k}\t{_fmt(m[k])}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg)
    ds = load_dataset(cfg)
    digest = ds.digest()
    seeds = cfg.seeds_for_ablation()
    results: Dict[str, List[dict]] = {m: [] for m in MODES_ORDER}
    rows = []
    for seed in seeds:
        for mode in MODES_ORDER:
            t0 = time.perf_counter()
            _, report = train(ds, cfg.model.replace(mode=mode), seed, cfg.train)
            b = report.best
            res = {"auc": b.test_auc, "gauc": b.test_gauc, "logloss": b.test_logloss, "ne": b.test_ne}
            results[mode].append(res)
            (out / f"metrics_{mode}_seed{seed}.csv").write_text(report.metrics_csv(), encoding="utf-8")
            rows += curves_tsv(report, f"{mode}/seed{seed}")
            log.info("%s seed %d: auc %.5f (%.1fs)", mode, seed, b.test_auc, time.perf_counter() - t0)
    table = ablation_table(results, digest, seeds)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    for mode in MODES_ORDER:
        for m in METRICS:
            rows.append(["ablation", mode, mode, m, _fmt(np.mean([r[m] for r in results[mode]]))])
    write_tsv(out / "report.tsv", rows)
    print(table, end="")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import run_suite, worst_by_case
    from .invariants import run_invariants

    results = run_suite(range(cfg.gradcheck_seeds), log=print if args.verbose else None)
    for r in worst_by_case(results).values():
        print(r.line())
    inv = run_invariants()
    for r in inv:
        print(r.line())
    failed = sum(not r.passed for r in results) + sum(not r.passed for r in inv)
    print(f"{len(results)} gradient checks over {cfg.gradcheck_seeds} seeds, {len(inv)} invariant checks, "
          f"{failed} failed")
    return 1 if failed else 0


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir or cfg.out)
    rows = []
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        for rec in read_metrics_csv(metrics):
            for m in ("loss", "auc", "gauc", "ne"):
                rows.append(["curve", f"run/{rec['split']}", rec["epoch"], "logloss" if m == "loss" else m, rec[m]])
    for path in sorted(run_dir.glob("metrics_*_seed*.csv")):
        series = path.stem[len("metrics_"):].replace("_seed", "/seed")
        for rec in read_metrics_csv(path):
            for m in ("loss", "auc", "gauc", "ne"):
                rows.append(["curve", f"{series}/{rec['split']}", rec["epoch"], "logloss" if m == "loss" else m,
                             rec[m]])
    table = run_dir / "ablation.tsv"
    if table.exists():
        for mode, vals in read_ablation_table(table).items():
            for m in METRICS:
                rows.append(["ablation", mode, mode, m, _fmt(vals[m])])
    if not rows:
        raise FileNotFoundError(f"no metrics.csv or ablation.tsv in {run_dir}")
    dest = Path(args.output) if args.output else run_dir / "report.tsv"
    write_tsv(dest, rows)
    print(f"wrote {len(rows)} rows to {dest}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or runs/latest)")
    common.add_argument("--data", help="CSV dataset; synthetic data is generated when omitted")
    common.add_argument("--mode", help="model.mode")
    common.add_argument("--backbone", help="model.backbone")
    common.add_argument("--layers", type=int, help="model.n_layers")
    common.add_argument("--epochs", type=int, help="train.max_epochs")
    common.add_argument("--examples", type=int, help="gen.n_examples")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="interformer", description="InterFormer CTR model: data, training and checks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset as CSV")
    p.add_argument("--output", help="CSV path (default: <out>/data.csv)")
    sub.add_parser("train", parents=[common], help="train and write checkpoint and metrics")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("test", "train"), default="test")
    sub.add_parser("ablate", parents=[common], help="train all five modes on one dataset")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference and invariant checks")
    p = sub.add_parser("report", parents=[common], help="render metrics logs as TSV")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--output")
    return parser


def _flag_values(args) -> Dict[str, Optional[str]]:
    def s(v):
        return None if v is None else str(v)

    return {
        "seed": s(args.seed), "out": args.out, "data": args.data, "checkpoint": getattr(args, "checkpoint", None),
        "model.mode": args.mode, "model.backbone": args.backbone, "model.n_layers": s(args.layers),
        "train.max_epochs": s(args.epochs), "gen.n_examples": s(args.examples),
    }


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_run_config(args.config, args.set, _flag_values(args))
        snapshot = Path(cfg.out) / "config.snapshot"
        if args.command == "eval" and not args.config and snapshot.exists():
            # evaluate under the configuration the run was trained with
            cfg = load_run_config(str(snapshot), args.set, _flag_values(args))
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (InterFormerError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

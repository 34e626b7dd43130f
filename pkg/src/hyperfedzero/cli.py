"""Command-line entry point.

Every subcommand reads one YAML config (``-c``) plus ``key=value`` overrides.
Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, FLConfig, from_mapping, load_config, parse_overrides
from .datasets import FormatError, PartitionInfeasible, SplitError, build_clients, save_partition
from .embedding import export_embeddings
from .experiment import RESULTS_ENV, ExperimentSpec, prepare_data, rows_to_csv, run_experiment, run_single
from .federation import NumericFailure, evaluate_state, load_checkpoint
from .hypernet import ClassifierArch, HypernetConfig, param_budget
from .models import build_model


class DataError(RuntimeError):
    pass


def results_root() -> Path:
    return Path(os.environ.get(RESULTS_ENV, "results"))


def _config(args) -> FLConfig:
    if args.config is None:
        return from_mapping(parse_overrides(args.overrides))
    return load_config(args.config, args.overrides)


def _checkpoint(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        state, cfg = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc
    if args.overrides:
        cfg = cfg.replace(**parse_overrides(args.overrides))
    return state, cfg


def cmd_partition(args) -> int:
    cfg = _config(args)
    data = prepare_data(cfg)
    out = Path(args.out) if args.out else results_root() / "partition.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_partition(data.partition, out)
    sizes = [len(ix) for ix in data.partition.client_indices]
    print(f"wrote {out}: {len(sizes)} clients, sizes {sizes}, holdout {len(data.holdout)}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else results_root() / "runs" / cfg.fingerprint()
    report = run_single(cfg, out)
    print(f"{cfg.method} seed={cfg.seed} gACC={report.gacc:.2f} pACC={report.pacc:.2f} "
          f"zACC={report.zacc:.2f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    state, cfg = _checkpoint(args)
    data = prepare_data(cfg)
    model = build_model(cfg, data.dataset.feature_dim, data.dataset.num_classes)
    parts, others = build_clients(data.partition, cfg.test_fraction, cfg.seed)
    ev = evaluate_state(model, state, cfg, data.dataset, data.holdout, parts, others)
    print(f"round={state.round} gACC={ev['gacc']:.4f} pACC={ev['pacc']:.4f} zACC={ev['zacc']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    if args.config is None:
        raise ConfigError("ablate needs a config file with a 'sweep' section")
    if not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    spec = ExperimentSpec.from_file(args.config, args.overrides)
    if args.out:
        spec.out_dir = args.out
    rows, new = run_experiment(spec)
    sys.stdout.write(rows_to_csv(rows))
    print(f"# {new} new run(s); summary at {Path(spec.out_dir) / 'summary.csv'}", file=sys.stderr)
    return 0


def cmd_export(args) -> int:
    state, cfg = _checkpoint(args)
    data = prepare_data(cfg)
    model = build_model(cfg, data.dataset.feature_dim, data.dataset.num_classes)
    if not model.uses_embeddings:
        raise ConfigError(f"method {cfg.method!r} has no distribution embeddings")
    parts, others = build_clients(data.partition, cfg.test_fraction, cfg.seed)
    ds = data.dataset

    def rows():
        for c in parts + others:
            idx = c.train if c.participating else c.eval_indices
            emb = model.embed(state.params, ds.features[idx])
            for i, e in zip(idx, emb):
                yield c.client_id, ds.labels[i], e

    out = Path(args.out) if args.out else results_root() / "embeddings.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_embeddings(out, rows())
    print(f"wrote {n} embedding rows to {out}")
    return 0


def cmd_budget(args) -> int:
    cfg = _config(args)
    arch = ClassifierArch((cfg.feature_dim, *cfg.classifier_hidden, cfg.num_classes), cfg.activation)
    hcfg = HypernetConfig(cfg.chunk_size, cfg.chunk_dim, tuple(cfg.hypernet_hidden), cfg.activation)
    report = param_budget(arch, (cfg.feature_dim, *cfg.extractor_hidden, cfg.embed_dim), hcfg)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"extractor {report['extractor']} + noisy {report['noisy']} + hypernet {report['hypernet']} "
              f"= {report['generating_total']}")
        print(f"classifier {report['classifier']}  ({report['num_chunks']} chunks, padding {report['padding']})")
        print(f"ratio {report['ratio']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperfedzero", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, checkpoint=False, out_help=None):
        s = sub.add_parser(name, help=help)
        if checkpoint:
            s.add_argument("--checkpoint", required=True, help="checkpoint.json written by train")
        else:
            s.add_argument("-c", "--config", help="YAML config file")
        if out_help:
            s.add_argument("-o", "--out", help=out_help)
        s.add_argument("overrides", nargs="*", metavar="key=value")
        s.set_defaults(fn=fn)
        return s

    add("partition", cmd_partition, "write a client partition", out_help="partition JSON path")
    add("train", cmd_train, "run federated training", out_help="run directory")
    add("eval", cmd_eval, "evaluate a checkpoint", checkpoint=True)
    add("ablate", cmd_ablate, "run a sweep over config values and seeds", out_help="results directory")
    add("export-embeddings", cmd_export, "write eval-mode embeddings as CSV", checkpoint=True,
        out_help="CSV path")
    add("budget", cmd_budget, "report generating-side vs classifier parameter counts").add_argument(
        "--json", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, FormatError, PartitionInfeasible, SplitError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

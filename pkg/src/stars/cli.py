"""``stars`` command line: gen-synth, pretrain, tune, extract, eval, plot.

Results go to stdout as JSON; logs go to stderr. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import data as D
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    extract_features, few_shot_eval, knn_eval, linear_probe, read_features, result_record,
    select_exemplars, write_features,
)
from .model import StarsModel, load_checkpoint, read_meta, save_checkpoint
from .plotting import plot_curves, plot_probe_history
from .pretrain import run_stage1
from .training import TrainingAborted, read_log
from .tune import run_stage2

log = logging.getLogger("stars")


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _dataset(root: str, split: str, part: str):
    manifest = D.DatasetManifest.read(root)
    if split != "all":
        if split not in manifest.splits:
            raise UsageError(f"dataset {root} has no split {split!r} (have {sorted(manifest.splits)})")
        manifest = manifest.subset(split, part)
    if len(manifest) == 0:
        raise UsageError(f"no sequences in {root} for split {split}/{part}")
    return D.load_dataset(root, manifest)


def _model_cfg_from_file(path) -> dict | None:
    if path is None:
        return None
    raw = json.loads(Path(path).read_text())
    return raw.get("model")


# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    if args.classes < 2 or args.per_class < 2:
        raise UsageError("--classes and --per-class must both be >= 2")
    if args.frames < 2 or args.joints < 1:
        raise UsageError("--frames must be >= 2 and --joints >= 1")
    if not 0 <= args.test_per_class < args.per_class:
        raise UsageError("--test-per-class must be in [0, per-class)")
    syn = D.SyntheticConfig(noise=args.noise)
    seqs, manifest = D.generate_synthetic(args.classes, args.per_class, args.frames, args.joints,
                                          args.seed, syn, test_per_class=args.test_per_class)
    try:
        D.write_dataset(args.out, seqs, manifest)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from exc
    _emit({"classes": args.classes, "per_class": args.per_class, "frames": args.frames,
           "joints": args.joints, "seed": args.seed, "test_per_class": args.test_per_class,
           "out": str(args.out)})
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    seqs, manifest = _dataset(args.data, args.split, args.part)
    if seqs[0].num_joints != cfg.model.joints:
        raise UsageError(f"dataset has {seqs[0].num_joints} joints but model.joints={cfg.model.joints}")
    torch.manual_seed(cfg.seed)
    model = StarsModel(cfg.model)
    out = Path(args.out)
    _, records = run_stage1(seqs, cfg.stage1, model, cfg.data, out)
    _write_run_config(out, cfg)
    if args.plot:
        plot_curves({"stage 1": records}, "mean_loss", out / "train_log.svg", ylabel="masked motion loss")
    meta = read_meta(out)
    _emit({"stage": meta["stage"], "checkpoint": str(out), "hash": meta["hash"], "epochs": cfg.stage1.epochs,
           "final_loss": records[-1]["mean_loss"] if records else None})
    return 0


def cmd_tune(args) -> int:
    overrides = list(args.set)
    overrides.append(f"stage2.mode={args.mode.replace('-', '_')}")
    if args.head_epochs is not None:
        overrides.append(f"stage2.head_epochs={args.head_epochs}")
    cfg = load_config(args.config, overrides)
    model, meta = load_checkpoint(args.init)
    wanted = _model_cfg_from_file(args.config)
    if wanted is not None:
        merged = {**dataclasses.asdict(model.cfg), **wanted}
        if merged != dataclasses.asdict(model.cfg):
            raise RuntimeError(f"config model section does not match checkpoint {args.init}")
    cfg.model = model.cfg
    cfg.validate()
    seqs, _ = _dataset(args.data, args.split, args.part)
    out = Path(args.out)
    _, records = run_stage2(seqs, cfg.stage2, model, cfg.data, out)
    _write_run_config(out, cfg)
    if args.plot:
        plot_curves({"stage 2": records}, "mean_loss", out / "train_log.svg", ylabel="NNCLR loss")
    meta = read_meta(out)
    _emit({"stage": meta["stage"], "mode": meta["mode"], "checkpoint": str(out), "hash": meta["hash"],
           "init": str(args.init), "layer_lrs": meta["schedule"]["layer_lrs"]})
    return 0


def cmd_extract(args) -> int:
    if args.config is None and (Path(args.ckpt) / "run_config.json").exists():
        args.config = str(Path(args.ckpt) / "run_config.json")
    cfg = _config(args)
    model, meta = load_checkpoint(args.ckpt)
    seqs, manifest = _dataset(args.data, args.split, args.part)
    fs = extract_features(model, seqs, manifest.labels, cfg.data, ids=[e.id for e in manifest.entries],
                          meta={"checkpoint_hash": meta["hash"], "stage": meta["stage"],
                                "split": args.split, "part": args.part})
    write_features(args.out, fs)
    _emit({"features": str(args.out), "rows": len(fs), "dim": fs.dim, "checkpoint_hash": meta["hash"]})
    return 0


def cmd_eval(args) -> int:
    train, test = read_features(args.train), read_features(args.test)
    if train.dim != test.dim:
        raise RuntimeError(f"feature dims differ: {args.train} has {train.dim}, {args.test} has {test.dim}")
    if args.protocol == "knn":
        acc = knn_eval(train, test, args.k)
        rec = result_record("knn", args.k, acc, len(train), len(test))
    elif args.protocol == "fewshot":
        ex = select_exemplars(train, args.n)
        acc = few_shot_eval(ex, test, args.n)
        rec = result_record("fewshot", args.n, acc, len(ex), len(test))
    else:
        cfg = _config(args)
        probe = cfg.eval.probe(cfg.seed)
        if args.epochs is not None:
            probe.epochs = args.epochs
        acc, history = linear_probe(train, test, probe)
        rec = result_record("linear", None, acc, len(train), len(test))
        if args.plot:
            plot_probe_history(history, args.plot)
    _emit(rec)
    return 0


def cmd_plot(args) -> int:
    curves = {Path(p).parent.name or Path(p).stem: read_log(p) for p in args.log}
    path = plot_curves(curves, args.field, args.out)
    _emit({"plot": str(path), "field": args.field, "logs": list(args.log)})
    return 0


def _write_run_config(out: Path, cfg: RunConfig) -> None:
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stars", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. stage2.tau2=0.07 (repeatable)")

    def with_data(sp):
        sp.add_argument("--data", required=True, help="dataset directory (SKL1 files + manifest.jsonl)")
        sp.add_argument("--split", default="all", help="split protocol from splits.json, or 'all'")
        sp.add_argument("--part", default="train", choices=["train", "test"])

    g = sub.add_parser("gen-synth", help="write a procedural synthetic dataset")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--frames", type=int, default=120)
    g.add_argument("--joints", type=int, default=25)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-per-class", type=int, default=0)
    g.add_argument("--noise", type=float, default=D.SyntheticConfig.noise)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("pretrain", help="stage 1: masked motion prediction")
    with_config(s)
    with_data(s)
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true", help="also write train_log.svg")
    s.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("tune", help="stage 2: nearest-neighbour contrastive tuning")
    with_config(t)
    with_data(t)
    t.add_argument("--init", required=True, help="stage-1 checkpoint directory")
    t.add_argument("--mode", default="two-stage", choices=["two-stage", "three-stage"])
    t.add_argument("--head-epochs", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--plot", action="store_true")
    t.set_defaults(func=cmd_tune)

    x = sub.add_parser("extract", help="write FTS1 features for a dataset split")
    with_config(x)
    with_data(x)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extract)

    e = sub.add_parser("eval", help="evaluate FTS1 features")
    e.add_argument("protocol", choices=["knn", "fewshot", "linear"])
    e.add_argument("--train", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--n", type=int, default=1)
    e.add_argument("--epochs", type=int, help="linear probe epochs (default from config)")
    e.add_argument("--plot", metavar="SVG", help="linear probe: write accuracy-vs-epoch plot")
    with_config(e)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="plot a field of one or more JSONL training logs")
    pl.add_argument("--log", action="append", required=True)
    pl.add_argument("--field", default="mean_loss")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def _setup_logging(verbose: bool) -> None:
    # own handler rather than basicConfig, which is a no-op once the root logger is configured
    for h in [h for h in log.handlers if getattr(h, "_stars_cli", False)]:
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler._stars_cli = True
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"stars: error: {exc}\n")
        return 2
    except TrainingAborted as exc:
        _emit({"error": str(exc), **exc.diagnostic})
        return 1
    except (RuntimeError, ValueError, OSError, KeyError) as exc:
        _emit({"error": f"{type(exc).__name__}: {exc}"})
        return 1


if __name__ == "__main__":
    sys.exit(main())

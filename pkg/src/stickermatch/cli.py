"""Command-line entry point: gen-data, train, eval, gradcheck, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .ablation import resolve_preset, run_ablation, summarize
from .config import RunConfig, resolve, write_manifest
from .data import generate_corpus, load_corpus
from .errors import ConfigError, DatasetFormatError, StickerMatchError, ValidationError
from .evaluator import evaluate
from .model import StickerSelector
from .trainer import Trainer, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECK = 4

ABLATION_FLAGS = ("emotion", "intention", "inter", "intra", "eiks", "iega", "samm", "semantic")

log = logging.getLogger("stickermatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key-value config file with dotted keys, e.g. 'train.lr = 0.001'")
    p.add_argument("--seed", type=int, help="seed for this command's randomness")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (default 1)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stickermatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic dialogue/sticker corpus")
    _common(g)
    g.add_argument("--n-samples", type=int)
    g.add_argument("--n-candidates", type=int)

    t = sub.add_parser("train", help="train a model and write checkpoints")
    _common(t)
    t.add_argument("--data", help="corpus directory (default paths.data_dir)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--disable", default="", help=f"comma-separated modules to switch off: {','.join(ABLATION_FLAGS)}")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="rank slates and report MAP / R10@K")
    _common(e)
    e.add_argument("--checkpoint", help="checkpoint file; omit with --untrained")
    e.add_argument("--untrained", action="store_true", help="evaluate a freshly initialized model")
    e.add_argument("--data", help="corpus directory")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--json", action="store_true", help="print a machine-readable record instead of a table")

    c = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    _common(c)
    c.add_argument("--dim", type=int, default=8)
    c.add_argument("--batch", type=int, default=4)
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--max-per-param", type=int, default=6, help="coordinates sampled per tensor; 0 checks all")

    a = sub.add_parser("ablate", help="train and evaluate a preset family of ablations")
    _common(a)
    a.add_argument("--preset", default="table4", choices=("table4", "fig3", "all"))
    a.add_argument("--data", help="corpus directory")
    a.add_argument("--seeds", default=None, help="comma-separated training seeds (default: --seed or train.seed)")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args, extra: dict) -> RunConfig:
    overrides = _overrides(args)
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return resolve(args.config, overrides)


def _ablation_from(disable: str) -> dict[str, str]:
    out = {}
    for name in filter(None, (s.strip() for s in disable.split(","))):
        if name not in ABLATION_FLAGS:
            raise ConfigError(f"unknown module {name!r} in --disable; choose from {', '.join(ABLATION_FLAGS)}")
        out[f"ablation.{name}"] = "false"
    if out.get("ablation.inter") == "false":
        out["ablation.samm"] = "false"
    return out


def _load_split(data_dir: str, split: str):
    path = Path(data_dir)
    if not (path / f"{split}.jsonl").exists():
        raise FileNotFoundError(f"no {split}.jsonl in data directory {path}")
    return load_corpus(path)


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    cfg = _run_config(args, {"data.seed": args.seed, "data.n_samples": args.n_samples,
                             "data.n_candidates": args.n_candidates, "paths.data_dir": args.out})
    out = Path(cfg.paths.data_dir)
    splits = generate_corpus(cfg.data, out)
    write_manifest(out / "run_manifest.json", cfg, "gen-data")
    for name, samples in splits.items():
        print(f"{name}\t{len(samples)}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {"train.seed": args.seed, "train.epochs": args.epochs, "train.lr": args.lr,
             "train.batch_size": args.batch_size, "train.max_steps": args.max_steps,
             "paths.data_dir": args.data, "paths.checkpoint_dir": args.out}
    extra.update(_ablation_from(args.disable))
    cfg = _run_config(args, extra)
    corpus = _load_split(cfg.paths.data_dir, "train")
    out = Path(cfg.paths.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        if not Path(args.resume).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.resume}")
        trainer = load_checkpoint(args.resume)
    else:
        trainer = Trainer(cfg.model_config(), cfg.train, cfg.ablation)
    data_dir = Path(cfg.paths.data_dir)
    write_manifest(out / "manifest.json", cfg, "train",
                   inputs=[data_dir / f"{s}.jsonl" for s in ("train", "val")],
                   extra={"trainer_config_hash": trainer.config_hash})
    trainer.fit(corpus["train"], corpus.get("val"), log_path=out / "metrics.tsv", checkpoint_dir=out)
    final = save_checkpoint(trainer, out / "last.npz")
    last = trainer.trace[-1].loss if trainer.trace else float("nan")
    print(f"steps\t{trainer.step}\nfinal_loss\t{last:.6f}")
    if trainer.best_map >= 0:
        print(f"best_val_map\t{100 * trainer.best_map:.1f}")
    print(f"checkpoint\t{final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args, {"paths.data_dir": args.data, "train.seed": args.seed})
    corpus = _load_split(cfg.paths.data_dir, args.split)
    if args.untrained:
        model = StickerSelector(cfg.model_config(), cfg.ablation, seed=cfg.train.seed)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint PATH or --untrained")
        path = Path(args.checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        trainer = load_checkpoint(path)
        trainer.use_best()
        model = trainer.model
    report = evaluate(model, corpus[args.split])
    if args.json:
        print(json.dumps(report.to_dict()))
    else:
        print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        write_manifest(out / "manifest.json", cfg, "eval",
                       inputs=[Path(cfg.paths.data_dir) / f"{args.split}.jsonl"] +
                       ([args.checkpoint] if args.checkpoint else []))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import full_loss_gradcheck

    seed = 0 if args.seed is None else args.seed
    report = full_loss_gradcheck(dim=args.dim, batch=args.batch, seed=seed,
                                 max_per_param=args.max_per_param or None)
    print(report.summary())
    ok = report.passed(args.threshold)
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {report.max_rel_error:.3e} "
          f"(threshold {args.threshold:.0e})")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_ablate(args) -> int:
    cfg = _run_config(args, {"paths.data_dir": args.data, "train.seed": args.seed})
    corpus = _load_split(cfg.paths.data_dir, "test")
    if "train" not in corpus:
        raise FileNotFoundError(f"no train.jsonl in data directory {cfg.paths.data_dir}")
    specs = resolve_preset(args.preset)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    out = Path(args.out) if args.out else None
    records_path = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        records_path = out / "ablation.jsonl"
        records_path.write_text("")
        write_manifest(out / "manifest.json", cfg, f"ablate --preset {args.preset}",
                       inputs=[Path(cfg.paths.data_dir) / f"{s}.jsonl" for s in ("train", "test")],
                       extra={"seeds": seeds})

    def progress(rec):
        row = rec.report.as_percent_row()
        print(f"{rec.name}\t{rec.spec.key()}\t{rec.seed}\t{row}\t{rec.report.mean_positive_score:.3f}", flush=True)

    print("config\tflags\tseed\tMAP\tR10@1\tR10@2\tR10@5\tpos_score")
    records = run_ablation(specs, corpus["train"], corpus["test"], cfg.model_config(), cfg.train, seeds,
                           records_path, progress)
    if len(seeds) > 1:
        print("\nmean over seeds")
        for name, m in summarize(records).items():
            print(f"{name}\t{100 * m['map']:.1f}\t{100 * m['r_at_1']:.1f}\t{100 * m['r_at_2']:.1f}\t"
                  f"{100 * m['r_at_5']:.1f}\t{m['mean_positive_score']:.3f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate}


def _thread_limit(n: int | None):
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except DatasetFormatError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValidationError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StickerMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

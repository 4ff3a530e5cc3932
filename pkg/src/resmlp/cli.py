"""Command-line entry point: ``resmlp <command> [options]``.

Every command prints deterministic text (no timestamps unless ``--verbose``),
writes files only under ``--out`` and returns 0 on success, 1 with a one-line
``error:`` diagnostic on failure, and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import export_filter_grid, sparsity_report
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .data import DatasetSpec, load_dataset
from .errors import ResMLPError
from .fusion import fuse_affine
from .seq2seq import Seq2SeqModel, Vocabulary
from .training import ArrayDataset, fit, evaluate
from .translation import fit_seq2seq, toy_task, translate
from .vision import VisionModel, count_flops, count_params

log = logging.getLogger("resmlp")


class UsageError(Exception):
    """Bad flag combination detected after argparse; exits with status 2."""


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _limit(ds: ArrayDataset, n: int | None) -> ArrayDataset:
    return ds if n is None else ds.subset(slice(0, n))


def _datasets(cfg: RunConfig) -> tuple[ArrayDataset, ArrayDataset]:
    d = cfg.data
    if d.kind == "parallel_text":
        raise UsageError("image commands need data.kind cifar10_binary or raw_tensor_dir")
    train = load_dataset(DatasetSpec(d.kind, d.path, "train", d.mean, d.std))
    test = load_dataset(DatasetSpec(d.kind, d.path, "test", d.mean, d.std))
    return _limit(train, d.train_limit), _limit(test, d.test_limit)


def _vision(path) -> VisionModel:
    model = load_checkpoint(path)
    if not isinstance(model, VisionModel):
        raise UsageError(f"{path} does not hold an unfused vision model")
    return model


def _print_epoch(rec) -> None:
    print(f"epoch {rec.epoch} loss {rec.loss:.4f} acc {rec.accuracy:.4f}")


# ---------------------------------------------------------------- commands

def cmd_train(args, distill: bool = False) -> int:
    cfg = _load_config(args)
    train, test = _datasets(cfg)
    tcfg = replace(cfg.train, mode="hard_distill", teacher=args.teacher) if distill else cfg.train
    teacher = _vision(args.teacher) if distill else None
    model = VisionModel.create(cfg.model, seed=tcfg.seed)
    report = fit(model, train, tcfg, test, out_dir=_out(args), teacher=teacher, on_epoch=_print_epoch)
    print(f"best acc {report.best_accuracy:.4f} at epoch {report.best_epoch}")
    print(f"wrote {report.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    if not hasattr(model, "config") or isinstance(model, Seq2SeqModel):
        raise UsageError(f"{args.checkpoint} does not hold a vision model")
    _, test = _datasets(cfg)
    print(f"top1 {evaluate(model, test, cfg.train.eval_batch_size):.4f}")
    return 0


def cmd_translate_train(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    if cfg.data.kind == "parallel_text":
        pairs, vocab = load_dataset(DatasetSpec("parallel_text", cfg.data.path))
        s2s = replace(cfg.seq2seq, vocab_size=max(len(vocab), cfg.seq2seq.vocab_size))
    else:
        s2s = cfg.seq2seq
        pairs = toy_task(args.task, args.train_size, s2s.vocab_size, seed=cfg.train.seed + 1)
        vocab = Vocabulary.numeric(s2s.vocab_size)
    longest = max(max(len(s), len(t) + 1) for s, t in pairs)
    if longest > s2s.max_len:
        raise UsageError(f"sequences up to {longest} tokens exceed seq2seq.max_len {s2s.max_len}")
    model = Seq2SeqModel.create(s2s, seed=cfg.train.seed)
    report = fit_seq2seq(model, pairs, cfg.train, time_budget=args.time_budget)
    for i, loss in enumerate(report.losses):
        print(f"epoch {i} loss {loss:.4f}")
    save_checkpoint(model, out / "seq2seq.rmlp")
    vocab.save(out / "vocab.txt")
    print(f"wrote {out / 'seq2seq.rmlp'}")
    return 0


def cmd_translate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, Seq2SeqModel):
        raise UsageError(f"{args.checkpoint} does not hold a seq2seq model")
    vocab_path = Path(args.vocab) if args.vocab else Path(args.checkpoint).with_name("vocab.txt")
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else Vocabulary.numeric(model.config.vocab_size)
    with open(args.input, encoding="utf-8") as fh:
        sources = [vocab.encode(line.split()) for line in fh if line.strip()]
    lines = [" ".join(vocab.decode(h)) for h in translate(model, sources, beam=args.beam)]
    out = _out(args) / "translations.txt"
    out.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    for ln in lines:
        print(ln)
    return 0


def cmd_analyze(args) -> int:
    report = sparsity_report(_vision(args.checkpoint), args.tau)
    path = _out(args) / "sparsity.csv"
    report.write_csv(path)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_export_filters(args) -> int:
    if args.checkpoint:
        model = _vision(args.checkpoint)
    else:
        cfg = _load_config(args)
        model = VisionModel.create(cfg.model, seed=cfg.train.seed)
    path = _out(args) / f"filters_layer{args.layer}_{args.patches}.pgm"
    grid = export_filter_grid(model, args.layer, args.patches, path)
    print(f"wrote {path} ({len(grid.patches)} tiles)")
    return 0


def cmd_count(args) -> int:
    cfg = _load_config(args).model
    params, macs = count_params(cfg), count_flops(cfg)
    print(f"params {params} ({params / 1e6:.2f}M)")
    print(f"macs {macs} ({macs / 1e9:.2f}G)")
    return 0


def cmd_fuse(args) -> int:
    fused = fuse_affine(_vision(args.checkpoint))
    path = _out(args) / "fused.rmlp"
    save_checkpoint(fused, path)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, default):
        p.add_argument("--config", default=default(None), help="key = value run configuration")
        p.add_argument("--seed", type=int, default=default(None), help="override train.seed")
        p.add_argument("--out", default=default("out"), help="directory for every written file")
        p.add_argument("--verbose", action="store_true", default=default(False),
                       help="log progress with timestamps")

    parser = argparse.ArgumentParser(prog="resmlp", description="ResMLP models: train, evaluate, analyze.")
    add_globals(parser, lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    add_globals(common, lambda v: argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(fn=fn)
        return p

    command("train", cmd_train, "train a vision model")
    p = command("distill", lambda a: cmd_train(a, distill=True), "train with hard distillation")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p = command("eval", cmd_eval, "top-1 accuracy on the test split")
    p.add_argument("--checkpoint", required=True)
    p = command("translate-train", cmd_translate_train, "train a seq2seq model")
    p.add_argument("--task", choices=["reverse", "copy"], default="reverse",
                   help="toy task used unless data.kind = parallel_text")
    p.add_argument("--train-size", type=int, default=50000)
    p.add_argument("--time-budget", type=float, default=None, help="stop after this many seconds")
    p = command("translate", cmd_translate, "decode one source sentence per input line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", default=None, help="defaults to vocab.txt next to the checkpoint")
    p.add_argument("--beam", type=int, default=4)
    p = command("analyze", cmd_analyze, "per-layer sparsity CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, default=0.05)
    p = command("export-filters", cmd_export_filters, "PGM grid of token-mixing rows")
    p.add_argument("--checkpoint", default=None, help="defaults to a freshly initialized model")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--patches", choices=["center6x6", "all"], default="center6x6")
    command("count", cmd_count, "parameters and multiply-accumulates per image")
    p = command("fuse", cmd_fuse, "fold affine layers into a fused checkpoint")
    p.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ResMLPError, OSError) as e:
        print(f"error: {str(e).splitlines()[0] if str(e) else type(e).__name__}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

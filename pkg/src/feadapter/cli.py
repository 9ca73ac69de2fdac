"""Command-line entry point: ``feadapter <subcommand> ...``.

Subcommands: make-toy-corpus, prepare-labels, pretrain, adapt, finetune, eval, plot.
Every run that writes outputs also writes ``resolved_config.json`` beside them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint
from .config import ConfigError, PretrainConfig, RunConfig, STRIDE_TO_FACTOR, load_config, parse_overrides, write_resolved
from .data import AudioFormatError, ManifestError, load_manifest, load_utterances
from .features import TooShortError
from .frontends import LengthMismatchError
from .losses import InfeasibleTargetError, format_wer_report

log = logging.getLogger("feadapter")

USER_ERRORS = (
    ConfigError, ManifestError, AudioFormatError, CheckpointError, InfeasibleTargetError,
    LengthMismatchError, TooShortError, FileNotFoundError, KeyError, ValueError,
)


def _config(cls, args, extra: dict | None = None):
    overrides = parse_overrides(args.set)
    for key, value in (extra or {}).items():
        if value is not None:
            overrides[key] = value
    return load_config(cls, args.config, overrides)


def cmd_make_toy_corpus(args) -> int:
    from .toy import DEFAULT_SPLITS, make_corpus

    splits = dict(DEFAULT_SPLITS)
    for item in args.split or []:
        name, _, count = item.partition("=")
        splits[name] = int(count)
    paths = make_corpus(args.out_dir, splits, seed=args.seed, n_words=args.n_words)
    Path(args.out_dir, "resolved_config.json").write_text(
        json.dumps({"splits": splits, "seed": args.seed, "n_words": args.n_words}, indent=2) + "\n"
    )
    for split, path in paths.items():
        print(f"{split}\t{path}")
    return 0


def cmd_prepare_labels(args) -> int:
    from .pretrain import make_pseudo_labels, write_label_file

    cfg = _config(PretrainConfig, args)
    out = Path(args.out_dir)
    write_resolved(cfg, out)
    utts = load_utterances(load_manifest(args.manifest, "train"), cfg.fbank, with_fbank=False)
    km, labels = make_pseudo_labels(utts, cfg)
    np.savez(out / "kmeans.npz", centroids=km.centroids, inertia_history=np.array(km.inertia_history))
    write_label_file(out / "labels.txt", labels)
    log.info("k-means inertia %.1f -> %.1f over %d iterations", km.inertia_history[0], km.inertia_history[-1], len(km.inertia_history))
    print(out / "labels.txt")
    return 0


def cmd_pretrain(args) -> int:
    from .pretrain import KMeansModel, read_label_file, run_pretrain

    cfg = _config(PretrainConfig, args, {"max_updates": args.max_updates, "seed": args.seed})
    out = Path(args.out_dir)
    write_resolved(cfg, out)
    utts = load_utterances(load_manifest(args.manifest, "train"), cfg.fbank, with_fbank=False)
    labels = read_label_file(args.labels)
    missing = [u.utt_id for u in utts if u.utt_id not in labels]
    if missing:
        raise ValueError(f"no pseudo-labels for {len(missing)} utterances, e.g. {missing[0]!r}")
    with np.load(args.kmeans) as km_file:
        km = KMeansModel(km_file["centroids"], km_file["inertia_history"].tolist())
    held = utts[len(utts) - args.heldout:] if args.heldout else []
    train = utts[: len(utts) - args.heldout] if args.heldout else utts
    _, history = run_pretrain(cfg, train, labels, km, out_path=out / "checkpoint.pt", heldout=held)
    ckpt = load_checkpoint(out / "checkpoint.pt")
    acc = ckpt["metrics"]["heldout_acc"]
    print(f"final loss {history[-1]['loss']:.4f}" + (f" held-out masked accuracy {acc:.4f}" if acc is not None else ""))
    return 0


def _run_config(args, mode: str) -> RunConfig:
    extra = {
        "mode": mode,
        "n_warmup": getattr(args, "n_warmup", None),
        "max_updates": args.max_updates,
        "seed": args.seed,
    }
    if args.stride_ms is not None:
        extra["stride_ms"] = args.stride_ms
        extra["fbank_frontend"] = {"subsample_factor": STRIDE_TO_FACTOR.get(args.stride_ms, 0)}
    return _config(RunConfig, args, extra)


def _train(args, mode: str) -> int:
    from .adapter import run_training

    cfg = _run_config(args, mode)
    out = Path(args.out_dir)
    write_resolved(cfg, out)
    train = load_utterances(load_manifest(args.train, "train"), cfg.fbank)
    dev = load_utterances(load_manifest(args.dev, "dev"), cfg.fbank) if args.dev else []
    resume = load_checkpoint(args.resume) if args.resume else None
    parent = load_checkpoint(args.parent) if args.parent else None
    if parent is None and resume is None:
        raise ValueError("--parent (pre-trained checkpoint) is required unless --resume is given")
    res = run_training(cfg, train, dev, parent, parent_path=args.parent, out_dir=out, resume=resume)
    last = next((r for r in reversed(res.metrics) if r["dev_wer"] != ""), None)
    if last is not None:
        print(f"step {last['step']} dev WER {last['dev_wer']:.2f}")
    print(res.checkpoint)
    return 0


def cmd_adapt(args) -> int:
    return _train(args, "adapter")


def cmd_finetune(args) -> int:
    return _train(args, args.frontend)


def _read_hyps(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'utt_id<TAB>hypothesis'")
            out[utt_id] = text
    return out


def cmd_eval(args) -> int:
    from .adapter import evaluate
    from .data import normalize_transcript

    manifest = load_manifest(args.manifest, args.split, check_audio=args.hyp is None)
    if args.hyp:
        hyps = _read_hyps(args.hyp)
        missing = [r.utt_id for r in manifest if r.utt_id not in hyps]
        if missing:
            raise ValueError(f"hypothesis file lacks {len(missing)} utterances, e.g. {missing[0]!r}")
        rows = [(r.utt_id, r.transcript, normalize_transcript(hyps[r.utt_id])[0]) for r in manifest]
    else:
        if not args.checkpoint:
            raise ValueError("eval needs --checkpoint or --hyp")
        payload = load_checkpoint(args.checkpoint)
        model = model_from_checkpoint(payload)
        cfg = load_config(RunConfig, None, payload.get("config")) if payload.get("kind") == "finetune" else RunConfig(mode="wave")
        frontend = args.frontend or ("wave" if cfg.mode == "wave" else "fbank")
        utts = load_utterances(manifest, cfg.fbank, with_fbank=frontend == "fbank")
        rows, _ = evaluate(model, utts, frontend)
    report, _ = format_wer_report(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report)
        resolved = {k: v for k, v in vars(args).items() if k != "func"}
        (out.parent / "resolved_config.json").write_text(json.dumps(resolved, indent=2, default=str) + "\n")
    print(report.splitlines()[-1])
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_runs

    labels = args.labels.split(",") if args.labels else [Path(p).parent.name or Path(p).stem for p in args.metrics]
    out = plot_runs(args.metrics, labels, args.out, n_warmup=args.n_warmup)
    Path(out).with_name("resolved_config.json").write_text(
        json.dumps({"metrics": args.metrics, "labels": labels, "out": str(out), "n_warmup": args.n_warmup}, indent=2) + "\n"
    )
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feadapter", description="Fbank front-end adaptation for waveform-pretrained encoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def with_config(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted keys for nested sections)")

    p = sub.add_parser("make-toy-corpus", help="write the synthetic spoken-letter corpus")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-words", type=int, default=16)
    p.add_argument("--split", action="append", metavar="NAME=COUNT", help="utterances per split")
    p.set_defaults(func=cmd_make_toy_corpus)

    p = sub.add_parser("prepare-labels", help="MFCC + k-means pseudo-labels for pre-training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    with_config(p)
    p.set_defaults(func=cmd_prepare_labels)

    p = sub.add_parser("pretrain", help="masked cluster prediction on the waveform model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="labels.txt from prepare-labels")
    p.add_argument("--kmeans", required=True, help="kmeans.npz from prepare-labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--heldout", type=int, default=0, help="last N utterances held out for masked accuracy")
    p.add_argument("--max-updates", type=int)
    p.add_argument("--seed", type=int)
    with_config(p)
    p.set_defaults(func=cmd_pretrain)

    def training_args(p):
        p.add_argument("--train", required=True, help="training manifest")
        p.add_argument("--dev", help="dev manifest for periodic WER")
        p.add_argument("--parent", help="pre-trained checkpoint")
        p.add_argument("--resume", help="continue from a fine-tuning checkpoint")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--stride-ms", type=int, help="20 or 40; also sets the Fbank subsampling factor")
        p.add_argument("--max-updates", type=int)
        p.add_argument("--seed", type=int)
        with_config(p)

    p = sub.add_parser("adapt", help="two-stage Fbank front-end adaptation")
    training_args(p)
    p.add_argument("--n-warmup", type=int, help="stage-1 length in updates")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("finetune", help="baseline CTC fine-tuning")
    training_args(p)
    p.add_argument("--frontend", required=True, choices=["wave", "fbank_noadapter"])
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="greedy decoding + WER, or score a hypothesis file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--hyp", help="file of 'utt_id<TAB>text' lines to score instead of decoding")
    p.add_argument("--frontend", choices=["wave", "fbank"], help="defaults to the checkpoint's training mode")
    p.add_argument("--out", help="write the per-utterance report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="SVG of front-end distance and dev WER vs update")
    p.add_argument("metrics", nargs="+", help="metrics.csv files")
    p.add_argument("--labels", help="comma-separated series names")
    p.add_argument("--out", required=True)
    p.add_argument("--n-warmup", type=int, help="draw the stage boundary")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        parser.print_usage(sys.stderr)
        print(f"feadapter {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line: prepare, split, synth, train, decode, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import autodiff as ad
from . import chat, corpus
from .model import Model, ModelConfig, ModelError
from .train import AugmentConfig, TrainConfig, dump_config, load_config, train, write_log

log = logging.getLogger("aphasiakit")

DOMAIN_ERRORS = (chat.ChatError, corpus.CorpusError, ad.AutodiffError, ModelError, OSError,
                 ValueError, KeyError, FloatingPointError, RuntimeError)


class UsageError(Exception):
    pass


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _parse_ratios(text: str):
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}")
    if len(vals) != 3:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {text!r}")
    return vals


# ---------------------------------------------------------------- commands


def cmd_prepare(args) -> int:
    chat_dir = _require_dir(args.chat_dir, "CHAT directory")
    files = sorted(chat_dir.glob("*.cha"))
    if not files:
        raise FileNotFoundError(f"no .cha files in {chat_dir}")

    def one(path: Path) -> str:
        doc = chat.parse_chat(path.read_text(encoding="utf-8"))
        lines = []
        for u in chat.clean_document(doc):
            obj = json.loads(u.to_json())
            obj["source"] = path.stem
            lines.append(json.dumps(obj, ensure_ascii=False) + "\n")
        return "".join(lines)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            chunks = list(pool.map(one, files))
    else:
        chunks = [one(f) for f in files]
    _atomic_text(Path(args.out), "".join(chunks))
    log.info("prepared %d files -> %s", len(files), args.out)
    return 0


def _relocate(records, src_manifest: Path, dst_dir: Path):
    out = []
    for r in records:
        if r.feature_path and not Path(r.feature_path).is_absolute() and not os.environ.get(corpus.FEATURE_DIR_ENV):
            abs_path = (src_manifest.parent / r.feature_path).resolve()
            r = replace(r, feature_path=os.path.relpath(abs_path, dst_dir.resolve()))
        out.append(r)
    return out


def cmd_split(args) -> int:
    manifest = _require_file(args.manifest, "manifest")
    ratios = _parse_ratios(args.ratios)
    records = corpus.read_manifest(manifest)
    if args.filter_duration:
        before = len(records)
        records = corpus.filter_duration(records)
        log.info("duration filter kept %d of %d utterances", len(records), before)
    parts = corpus.stratified_split(records, corpus.SplitSpec(ratios, args.seed))
    out_dir = Path(args.out_dir)
    for name, part in zip(("train", "valid", "test"), parts):
        corpus.write_manifest(_relocate(part, manifest, out_dir), out_dir / f"{name}.jsonl")
        log.info("%s: %d utterances, %d speakers", name, len(part), len({r.speaker_id for r in part}))
    return 0


def cmd_synth(args) -> int:
    spec = corpus.SyntheticSpec(
        speakers_per_class=args.speakers_per_class, utterances_per_speaker=args.utterances_per_speaker,
        vocab_size=args.vocab_size, feature_dim=args.feature_dim, frames_per_token=args.frames_per_token,
        noise_std=args.noise, seed=args.seed)
    records = corpus.generate_synthetic(spec)
    path = corpus.save_corpus(records, args.out_dir)
    log.info("wrote %d synthetic utterances -> %s", len(records), path)
    return 0


def _load_records(path: Path) -> List[corpus.UtteranceRecord]:
    return corpus.read_manifest(path, load_features=True)


def _configs(args):
    if args.config:
        mcfg, tcfg, acfg = load_config(_require_file(args.config, "config file"))
    else:
        mcfg, tcfg, acfg = ModelConfig(), TrainConfig(), AugmentConfig()
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr,
                 "warmup_steps": args.warmup, "clip": args.clip, "weight_decay": args.weight_decay,
                 "keep_best": args.keep_best}
    tcfg = replace(tcfg, seed=args.seed, **{k: v for k, v in overrides.items() if v is not None})
    m_over = {"ctc_weight": args.ctc_weight, "interctc_weight": args.interctc_weight,
              "tag_mode": args.tag_mode}
    mcfg = replace(mcfg, **{k: v for k, v in m_over.items() if v is not None})
    return mcfg, tcfg, acfg


def cmd_train(args) -> int:
    train_path = _require_file(args.train, "train manifest")
    valid_path = _require_file(args.valid, "valid manifest")
    mcfg, tcfg, acfg = _configs(args)
    if args.no_augment:
        acfg = None
    tr = _load_records(train_path)
    va = _load_records(valid_path)
    if not tr:
        raise ValueError("training manifest is empty")
    result = train(tr, va, mcfg, tcfg, acfg)
    out = Path(args.out_dir)
    result.model.save(out / "model.ckpt")
    write_log(result.log, out / "train_log.jsonl")
    _atomic_text(out / "config.ini", dump_config(result.model.config, tcfg, acfg or AugmentConfig()))
    log.info("averaged epochs %s -> %s", result.selected_epochs, out / "model.ckpt")
    return 0


def cmd_decode(args) -> int:
    from .evaluate import predict_all

    ckpt = _require_file(args.checkpoint, "checkpoint")
    manifest = _require_file(args.manifest, "manifest")
    model = Model.load(ckpt)
    records = _load_records(manifest)
    preds = predict_all(model, records, beam=args.beam, decode_weight=args.decode_weight,
                        nbest=args.nbest, jobs=args.jobs)
    lines = []
    for r in records:
        for rank, (score, toks) in enumerate(preds[r.utt_id].nbest, start=1):
            lines.append(f"{r.utt_id}\t{rank}\t{score:.6f}\t{' '.join(toks)}\n")
    _atomic_text(Path(args.out), "".join(lines))
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate, write_report

    ckpt = _require_file(args.checkpoint, "checkpoint")
    manifest = _require_file(args.manifest, "manifest")
    model = Model.load(ckpt)
    records = _load_records(manifest)
    report, _ = evaluate(records, model, beam=args.beam, decode_weight=args.decode_weight, jobs=args.jobs)
    write_report(report, args.report_out)
    log.info("WER %.4f sentence acc %s speaker acc %s", report["overall_wer"],
             report.get("sentence_acc"), report.get("speaker_acc"))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--config", help="INI file with [model], [train] and [augment] sections")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aphasiakit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="clean CHAT files into JSONL")
    s.add_argument("--chat-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("split", parents=[common], help="stratified speaker split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ratios", default="0.56,0.19,0.25")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--no-filter-duration", dest="filter_duration", action="store_false")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--speakers-per-class", type=int, default=20)
    s.add_argument("--utterances-per-speaker", type=int, default=20)
    s.add_argument("--vocab-size", type=int, default=20)
    s.add_argument("--feature-dim", type=int, default=16)
    s.add_argument("--frames-per-token", type=int, default=3)
    s.add_argument("--noise", type=float, default=0.1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train and average the best checkpoints")
    s.add_argument("--train", required=True)
    s.add_argument("--valid", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--warmup", type=int)
    s.add_argument("--clip", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--keep-best", type=int)
    s.add_argument("--ctc-weight", type=float)
    s.add_argument("--interctc-weight", type=float)
    s.add_argument("--tag-mode", choices=("none", "prepend", "append", "both"))
    s.add_argument("--no-augment", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, out_flag, text in (("decode", cmd_decode, "--out", "joint beam search, n-best TSV"),
                                       ("evaluate", cmd_evaluate, "--report-out", "WER and detection report")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--manifest", required=True)
        s.add_argument(out_flag, required=True)
        s.add_argument("--beam", type=int, default=10)
        s.add_argument("--decode-weight", type=float, default=None,
                       help="attention weight in joint decoding (default 1 - ctc_weight)")
        if name == "decode":
            s.add_argument("--nbest", type=int, default=1)
        s.set_defaults(func=func)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

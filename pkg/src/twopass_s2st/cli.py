"""Command-line interface.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio import read_wav, write_wav
from .checkpoint import Checkpoint
from .config import Config, load_config
from .corpus import Dataset, ingest, make_synthetic_corpus
from .errors import DataError, S2STError
from .metrics import CodebookEmbedder, CorpusOracleTranscriber, asr_bleu, corpus_bleu, corpus_similarity
from .pipeline import Pipeline, translate_end_to_end
from .speech_tokens import Codebook, export_jsonl
from .text import CharTokenizer

log = logging.getLogger("twopass_s2st")


class UsageError(S2STError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- prepared-data directory ------------------------------------------------


def _prepared(data_dir: Path, cfg: Config) -> Dataset:
    meta_path = data_dir / "prepared.json"
    if not meta_path.exists():
        raise DataError(f"{data_dir} is not a prepared data directory (run `prepare` first)")
    meta = json.loads(meta_path.read_text())
    ds = ingest(meta["manifest"], cfg.audio)
    ds.tokenizer = CharTokenizer.load(data_dir / "vocab.json")
    ck = Checkpoint.load(data_dir / "codebook.ckpt")
    ds.codebook = Codebook.from_meta(ck.tensors["centroids"], ck.extras["codebook"])
    return ds


def cmd_prepare(args, cfg: Config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = Path(args.manifest).resolve()
    else:
        manifest = make_synthetic_corpus(args.synthetic, args.seed, out / "corpus").resolve()
    ds = ingest(manifest, cfg.audio)
    codebook = ds.fit_codebook(cfg.tokenizer, seed=cfg.run.seed)
    ds.tokenizer.save(out / "vocab.json")
    Checkpoint("codebook", 0, cfg.run.seed, cfg.to_dict(), {"centroids": codebook.centroids},
               {"codebook": codebook.meta()}).save(out / "codebook.ckpt")
    ds.save_features(out / "features.npz")
    export_jsonl([(it.id, ds.speech_tokens(it)) for it in ds.items], out / "tokens.jsonl")
    cfg.save(out / "config.ini")
    summary = {"manifest": str(manifest), "items": len(ds), "skipped": [str(e) for e in ds.errors],
               "speech_vocab": codebook.size}
    (out / "prepared.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"prepared {ds.summary()} -> {out}")
    return 0


def _cmd_train(stage):
    def run(args, cfg: Config) -> int:
        from .training import train

        ds = _prepared(Path(args.data), cfg)
        resume = None
        ckpt_path = Path(args.out) / f"{stage}.ckpt"
        if args.resume:
            if not ckpt_path.exists():
                raise DataError(f"nothing to resume: {ckpt_path} does not exist")
            resume = ckpt_path
        t0 = time.perf_counter()
        result = train(stage, cfg, ds, out_dir=args.out, resume=resume, max_steps=args.steps)
        last = result.losses[-1][1] if result.losses else float("nan")
        print(f"{stage}: step {result.checkpoint.step}, final loss {last:.6f}, "
              f"{time.perf_counter() - t0:.1f}s -> {ckpt_path}")
        return 0

    return run


def cmd_translate(args, cfg: Config) -> int:
    p = Pipeline.load(args.ckpt)
    source = read_wav(args.input)
    spk = read_wav(args.speaker) if args.speaker else None
    result = translate_end_to_end(source, p, K=args.chunk_size, spk_ref=spk, seed=args.seed)
    write_wav(args.output, result.waveform)
    print(result.text)
    if result.low_confidence:
        print(f"warning: low confidence ({result.confidence:.3f})", file=sys.stderr)
    if args.json:
        Path(args.json).write_text(json.dumps({
            "text": result.text, "speech_tokens": result.speech_tokens.token_ids,
            "confidence": result.confidence, "low_confidence": result.low_confidence,
            "seeds": result.seeds}, indent=2))
    return 0


def cmd_stream_demo(args, cfg: Config) -> int:
    from .plotting import stream_timeline_figure

    p = Pipeline.load(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source = read_wav(args.input)
    events = []
    t0 = time.perf_counter()

    def on_segment(seg, produced):
        path = out / f"segment_{seg.index:03d}.wav"
        write_wav(path, seg.waveform)
        events.append({"index": seg.index, "file": path.name, "start_token": seg.start_token,
                       "end_token": seg.end_token, "tokens_consumed": produced,
                       "samples": len(seg.waveform), "emitted_at": time.perf_counter() - t0})
        print(f"segment {seg.index}: tokens [{seg.start_token}, {seg.end_token}) at {events[-1]['emitted_at']:.3f}s")

    result = translate_end_to_end(source, p, K=args.chunk_size, seed=args.seed, on_segment=on_segment)
    k = p.synthesis_settings(args.chunk_size).chunk_size
    manifest = {"text": result.text, "chunk_size": k, "sample_rate": p.cfg.audio.target_sample_rate,
                "first_segment_latency": events[0]["emitted_at"] if events else None, "segments": events}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if events:
        stream_timeline_figure(events, out / "timeline.png", k)
    print(result.text)
    return 0


def _table(title, header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = "  ".join(str(h).ljust(w) for h, w in zip(header, widths))
    out = [title, line, "-" * len(line)]
    out += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(out)


def cmd_evaluate(args, cfg: Config) -> int:
    from .plotting import bleu_precision_figure, mel_comparison_figure

    p = Pipeline.load(args.ckpt)
    ds = _prepared(Path(args.data), cfg)
    if args.split != "all":
        ds = ds.split(args.split)
    if not ds.items:
        raise DataError(f"no items in split {args.split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = [translate_end_to_end(it.source, p, seed=args.seed) for it in ds.items]
    texts = [r.text for r in results]
    audio = [r.waveform for r in results]
    refs = [it.target_text for it in ds.items]
    oracle = CorpusOracleTranscriber([(it.target_text, it.target) for it in ds.items], p.cfg.audio.target_mel())
    embedder = CodebookEmbedder(p.codebook)

    by_lang: dict[str, list[int]] = {}
    for i, it in enumerate(ds.items):
        by_lang.setdefault(f"{it.triplet.source_lang}->{it.triplet.target_lang}", []).append(i)
    report = {"text_bleu": corpus_bleu(texts, refs).to_dict(), "asr_bleu": {}, "similarity": {},
              "n_items": len(ds.items), "split": args.split}
    for pair, idx in sorted(by_lang.items()):
        report["asr_bleu"][pair] = asr_bleu([audio[i] for i in idx], [refs[i] for i in idx], oracle).to_dict()
    for mode in ("unsupervised", "qe", "ref"):
        items = [(it.source, audio[i], it.target) for i, it in enumerate(ds.items)]
        report["similarity"][mode] = corpus_similarity(items, mode, embedder).to_dict()
    pairs = sorted(by_lang)
    asr = [report["asr_bleu"][k]["score"] for k in pairs]
    report["asr_bleu_average"] = float(np.mean(asr))
    report["hypotheses"] = [{"id": it.id, "hyp": h, "ref": r} for it, h, r in zip(ds.items, texts, refs)]
    (out / "report.json").write_text(json.dumps(report, indent=2))

    print(_table("ASR-BLEU", ["Models"] + pairs + ["Average"],
                 [["this run"] + [f"{s:.2f}" for s in asr] + [f"{report['asr_bleu_average']:.2f}"]]))
    sims = report["similarity"]
    print()
    print(_table("Semantic similarity (embedding-cosine proxy)", ["Models", "Unsupervised", "QE", "Ref"],
                 [["this run"] + [f"{sims[m]['mean']:.4f}" for m in ("unsupervised", "qe", "ref")]]))
    print(f"\ntext BLEU {report['text_bleu']['score']:.2f}")

    bleu_precision_figure(report["text_bleu"], out / "text_bleu_precisions.png", "text BLEU")
    first = ds.items[0]
    gen = results[0]
    if gen.segments:
        from .training import align_frames

        g = np.concatenate([s.mel for s in gen.segments])
        mel_comparison_figure(align_frames(first.target_mel.frames, len(g)), g, out / f"mel_{first.id}.png", first.id)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twopass-s2st", description="Two-pass speech-to-speech translation toolkit.")
    parser.add_argument("--config", help="INI config file (env overrides: TWOPASS__<SECTION>__<KEY>)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="synthesise or ingest a corpus, fit the speech codebook")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic triplets")
    src.add_argument("--manifest", help="existing JSON-lines manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    for stage in ("s2tt", "tts", "cfm"):
        p = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        p.add_argument("--data", required=True, help="prepared data directory")
        p.add_argument("--out", required=True, help="checkpoint/output directory")
        p.add_argument("--steps", type=int, help="override max_steps")
        p.add_argument("--resume", action="store_true", help=f"continue from <out>/{stage}.ckpt")
        p.set_defaults(func=_cmd_train(stage))

    p = sub.add_parser("translate", help="translate one WAV file")
    p.add_argument("--ckpt", required=True, help="directory with s2tt.ckpt, tts.ckpt, cfm.ckpt")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--speaker", help="speaker reference WAV (default: the input)")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write text/tokens/confidence as JSON")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("stream-demo", help="chunked synthesis with per-segment WAVs and timestamps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stream_demo)

    p = sub.add_parser("evaluate", help="BLEU, ASR-BLEU and similarity report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all", choices=["all", "train", "dev", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            overrides[key] = value
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except S2STError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver for the full pipeline.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import archive, corpus, dsp, pipeline
from .config import ConfigError, PipelineConfig, load_config
from .disentangle import build_dictionary
from .metrics import nsdr, sdr_best_permutation
from .miml import Hyper, train
from .separate import SeparationError, guided_separate

log = logging.getLogger("objsep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_text(path, text: str):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: PipelineConfig, args):
    spec = replace(cfg.synth, seed=pipeline.stage_seed(cfg.seed, "synth"))
    synth = corpus.synth_corpus(spec)
    path = corpus.write_corpus(synth, args.out)
    counts = {s: len(c) for s, c in synth.clips.items()}
    log.info("wrote %s (%s), label corruption %.3f", path, counts, synth.corruption_rate)


def _load_split(cfg: PipelineConfig, manifest, split: str):
    man = corpus.load_manifest(manifest)
    clips = []
    for rec in man["splits"].get(split, []):
        for key in ("audio", "sidecar"):
            if not rec[key].exists():
                raise DataError(f"clip {rec['sidecar'].stem}: missing {key} file {rec[key]}")
        clip = corpus.load_clip(rec["audio"], rec["sidecar"], man["vocabulary"],
                                cfg.sample_rate, cfg.label_threshold)
        clip.stems = [corpus.read_wav(p, cfg.sample_rate) for p in rec["stems"]]
        clips.append(clip)
    return clips, man["vocabulary"]


def cmd_extract_bases(cfg: PipelineConfig, args):
    clips, vocab = _load_split(cfg, args.manifest, args.split)
    opts = cfg.nmf_options(pipeline.stage_seed(cfg.seed, "extract"))
    bags = pipeline.extract_bags(clips, opts, cfg.window_len, cfg.hop, cfg.label_threshold,
                                 jobs=args.jobs)
    archive.save_bags(args.out, bags, vocab,
                      {"window_len": cfg.window_len, "hop": cfg.hop,
                       "sample_rate": cfg.sample_rate})
    log.info("wrote %d bags to %s", len(bags), args.out)


def cmd_train(cfg: PipelineConfig, args):
    bags, vocab, _ = archive.load_bags(args.bags)
    bags = pipeline.trainable(bags)
    if not bags:
        raise DataError(f"no labelled bags in {args.bags}")
    tcfg = replace(cfg.train, seed=pipeline.stage_seed(cfg.seed, "train"))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    state = None
    if args.resume:
        state, _, _ = archive.load_checkpoint(args.resume)
        if state is None:
            raise DataError(f"checkpoint {args.resume} has no optimiser state to resume from")
    val = None
    if args.val_bags:
        val = pipeline.trainable(archive.load_bags(args.val_bags)[0])
    hyper = Hyper(cfg.k, len(vocab), cfg.m, cfg.f, cfg.hidden)
    state = train(bags, tcfg, hyper, state=state,
                  epochs=args.epochs if args.resume else None, val=val)
    if not np.isfinite(state.history[-1]):
        raise NumericError("training loss is not finite")
    archive.save_checkpoint(args.out, state, vocab)
    log.info("epoch %d loss %.6f -> %s", state.epoch, state.history[-1], args.out)


def cmd_build_dict(cfg: PipelineConfig, args):
    _, params, vocab = archive.load_checkpoint(args.checkpoint)
    bags, _, _ = archive.load_bags(args.bags)
    d = build_dictionary(pipeline.trainable(bags), params, cfg.harvest)
    archive.save_dictionary(args.out, d, vocab)
    log.info("dictionary sizes %s -> %s", d.sizes(), args.out)


def cmd_separate(cfg: PipelineConfig, args):
    d, vocab = archive.load_dictionary(args.dictionary)
    clip = corpus.load_clip(args.audio, args.sidecar, vocab, cfg.sample_rate,
                            cfg.label_threshold)
    labels = [lab for lab, _ in sorted(clip.labels, key=lambda x: -x[1])]
    if not labels:
        raise DataError(f"{args.sidecar}: no label above threshold {cfg.label_threshold}")
    opts = cfg.separate_options(pipeline.stage_seed(cfg.seed, "separate"))
    mode = "denoise" if args.denoise else (args.mode or cfg.mode)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = guided_separate(clip.audio, labels, d, mode, opts)
    if mode == "denoise":
        clean = np.sum([w.samples for w in res.waveforms[:-1]], axis=0)
        corpus.write_wav(out / "clean.wav", dsp.Waveform(clean, clip.audio.sample_rate))
        corpus.write_wav(out / "noise.wav", res.waveforms[-1])
    else:
        for lab, wav in zip(labels, res.waveforms):
            corpus.write_wav(out / f"{vocab[lab]}.wav", wav)
    report = res.report()
    names = [vocab[lab] for lab in labels]
    report = f"clip_id={clip.clip_id}\nlabels={','.join(names)}\n" + report
    (out / "report.txt").write_text(report)
    log.info("separated %s into %s", clip.clip_id, out)


def cmd_evaluate(cfg: PipelineConfig, args):
    if len(args.estimates) != len(args.references):
        raise UsageError("need the same number of estimates and references")
    ests = [corpus.read_wav(p) for p in args.estimates]
    refs = [corpus.read_wav(p) for p in args.references]
    n = min(len(w) for w in ests + refs)
    ests = [w.samples[:n] for w in ests]
    refs = [w.samples[:n] for w in refs]
    report = sdr_best_permutation(ests, refs)
    if args.noisy is not None:
        if len(refs) != 1:
            raise UsageError("--noisy expects exactly one estimate and one reference")
        noisy = corpus.read_wav(args.noisy).samples[:n]
        report.nsdr = nsdr(ests[0], noisy, refs[0])
    _write_text(args.out, report.to_text())


def _bench_config(cfg: PipelineConfig, jobs: int) -> pipeline.BenchmarkConfig:
    return pipeline.BenchmarkConfig(
        window_len=cfg.window_len, hop=cfg.hop, m=cfg.m, k=cfg.k, hidden=cfg.hidden,
        nmf=cfg.nmf, train=cfg.train, harvest=cfg.harvest,
        per_label_count=cfg.per_label_count, seed=cfg.seed, jobs=jobs)


def cmd_benchmark(cfg: PipelineConfig, args):
    bcfg = _bench_config(cfg, args.jobs)
    if args.manifest is None:
        if cfg.synth.sample_rate != cfg.sample_rate:
            raise UsageError("synth.sample_rate must equal sample_rate for the benchmark")
        spec = replace(cfg.synth, seed=pipeline.stage_seed(cfg.seed, "synth"))
        res = pipeline.run_benchmark(spec, bcfg, with_oracle=not args.no_oracle)
        _write_text(args.out, res.to_text())
        return
    if args.dictionary is None:
        raise UsageError("--manifest requires --dictionary")
    d, _ = archive.load_dictionary(args.dictionary)
    clips, _ = _load_split(cfg, args.manifest, args.split)
    clips = [c for c in clips if len(c.stems) >= 1]
    for c in clips:
        # evaluation uses the detected (sidecar) labels, ordered by score
        c.true_classes = tuple(lab for lab, _ in sorted(c.labels, key=lambda x: -x[1]))
        c.stems = c.stems[:len(c.true_classes)]
    clips = [c for c in clips if c.true_classes and len(c.stems) == len(c.true_classes)]
    if not clips:
        raise DataError("no evaluable clips (need stems matching the detected labels)")
    scores = pipeline.evaluate_modes(clips, d, bcfg)
    lines = [f"mode={m} mean_sdr_db={np.mean(v):.6f} clips={len(v)}" for m, v in scores.items()]
    _write_text(args.out, "\n".join(lines) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "extract-bases": cmd_extract_bases,
    "train": cmd_train,
    "build-dict": cmd_build_dict,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline configuration (JSON)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="objsep", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--out", required=True, help="corpus directory")

    s = sub.add_parser("extract-bases", parents=[common], help="NMF bases per clip")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True, help="bag archive (.npz)")

    s = sub.add_parser("train", parents=[common], help="train the MIML network")
    s.add_argument("--bags", required=True)
    s.add_argument("--out", required=True, help="checkpoint (.npz)")
    s.add_argument("--val-bags", help="validation bag archive; keeps the best epoch")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--epochs", type=int, help="epochs to run (further epochs with --resume)")

    s = sub.add_parser("build-dict", parents=[common], help="harvest per-object bases")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bags", required=True)
    s.add_argument("--out", required=True, help="dictionary (.npz)")

    s = sub.add_parser("separate", parents=[common], help="separate one clip")
    s.add_argument("--dictionary", required=True)
    s.add_argument("--audio", required=True)
    s.add_argument("--sidecar", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--mode", choices=("matched", "unmatched", "gaussian", "exemplar"))
    s.add_argument("--denoise", action="store_true")

    s = sub.add_parser("evaluate", parents=[common], help="SI-SDR of estimates")
    s.add_argument("--estimates", nargs="+", required=True)
    s.add_argument("--references", nargs="+", required=True)
    s.add_argument("--noisy", help="noisy input, to report NSDR")
    s.add_argument("--out")

    s = sub.add_parser("benchmark", parents=[common], help="mean SDR per separation mode")
    s.add_argument("--manifest", help="evaluate a corpus split instead of a fresh synthetic run")
    s.add_argument("--dictionary")
    s.add_argument("--split", default="test")
    s.add_argument("--no-oracle", action="store_true")
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"objsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"objsep: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, corpus.CorpusError, archive.ArchiveError, SeparationError,
            OSError, ValueError) as exc:
        print(f"objsep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``eendss {simulate,train,infer,eval,spectrogram}``.

Every command writes the fully resolved run configuration next to its
outputs as ``config.json``; passing that file back with ``--config``
reproduces the run. Validation problems exit with status 2, other failures
with status 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .audio_io import read_json, read_rttm, read_wav, write_json, write_rttm, write_wav
from .config import RunConfig
from .inference import infer
from .metrics import MetricsReport, score_utterance
from .model import EENDSS
from .simulate import build_corpus, load_split
from .spectrogram import write_spectrogram
from .training import finetune_flexible, fit

log = logging.getLogger("eendss")


class UsageError(ValueError):
    """Invalid user input; reported with exit status 2."""


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.corpus.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "c_max", None) is not None:
        cfg.model.c_max = args.c_max
    if getattr(args, "lmf", False):
        cfg.model.lmf_concat = True
    for i in (1, 2, 3):
        value = getattr(args, f"lambda{i}", None)
        if value is not None:
            setattr(cfg.train, f"lambda{i}", value)
    if getattr(args, "max_epochs", None) is not None:
        cfg.train.max_epochs = args.max_epochs
    if getattr(args, "threshold_theta", None) is not None:
        cfg.inference.theta = args.threshold_theta
    if getattr(args, "threshold_tau", None) is not None:
        cfg.inference.tau = args.threshold_tau
    if getattr(args, "fusion", False):
        cfg.inference.fusion = True
    cfg.sync()
    # re-run dataclass validation after overrides
    cfg = RunConfig.from_dict(cfg.to_dict())
    return cfg


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} not found: {path}")
    return path


def _require_corpus(path) -> Path:
    path = _require_dir(path, "corpus directory")
    if not (path / "manifest.json").is_file():
        raise UsageError(f"corpus manifest not found: {path / 'manifest.json'}")
    return path


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    manifest = build_corpus(cfg.corpus, out)
    cfg.save(out / "config.json")
    rows = manifest["samples"]
    print(f"wrote {len(rows)} mixtures to {out}")
    for split in ("train", "dev", "test"):
        bins = Counter((r["num_speakers"], r["overlap_ratio"]) for r in rows if r["split"] == split)
        detail = ", ".join(f"C={c} ov={o:g}: {n}" for (c, o), n in sorted(bins.items()))
        print(f"  {split}: {sum(bins.values())} ({detail})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = _require_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    train, dev = load_split(corpus, "train"), load_split(corpus, "dev")
    if not train:
        raise UsageError(f"{corpus}: the train split is empty")
    if args.finetune_from:
        ckpt = Path(args.finetune_from)
        if not ckpt.is_file():
            raise UsageError(f"checkpoint not found: {ckpt}")
        model = EENDSS.load(ckpt)
        result = finetune_flexible(model, train, dev, cfg.train, out)
    else:
        model = EENDSS(cfg.model, seed=cfg.train.seed)
        result = fit(model, train, dev, cfg.train, out)
    if result is None:
        print(f"no finetuning epochs requested; copied weights to {out / 'best.ckpt'}")
    else:
        print(f"best dev loss {result.best_dev:.4f} at epoch {result.best_epoch}; checkpoint {result.checkpoint}")
        for event in result.events:
            print(f"  {event}")
    return 0


def _write_inference(result, x_len: int, out: Path, file_id: str, sample_rate: int):
    out.mkdir(parents=True, exist_ok=True)
    signals = result.fused if result.fused is not None else result.separated
    peak = float(np.max(np.abs(signals))) if signals.size else 0.0
    scale = 0.99 / peak if peak > 0.99 else 1.0
    for c, sig in enumerate(signals, 1):
        write_wav(out / f"spk{c}.wav", sig * scale, sample_rate)
    # diarization rows reordered so that RTTM speaker c describes spk{c}.wav
    labels = result.diar.labels[list(result.alignment)] if result.num_speakers else result.diar.labels
    write_rttm(out / "hyp.rttm", labels, file_id)
    meta = result.to_dict()
    meta.update({"num_samples": x_len, "num_frames": int(result.diar.labels.shape[1]), "output_scale": scale})
    write_json(out / "result.json", meta)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = EENDSS.load(ckpt)
    if args.lmf and not model.config.lmf_concat:
        raise UsageError("--lmf given but the checkpoint was trained without LMF concatenation")
    opts = cfg.inference
    rate = model.config.sample_rate
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.model = model.config
    cfg.save(out / "config.json")
    if args.wav:
        wav = Path(args.wav)
        if not wav.is_file():
            raise UsageError(f"input audio not found: {wav}")
        x = read_wav(wav, rate)
        result = infer(x, model, opts)
        _write_inference(result, x.size, out, wav.stem, rate)
        for w in result.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(f"estimated {result.num_speakers} speakers; outputs in {out}")
        return 0
    corpus = _require_corpus(args.corpus)
    manifest = read_json(corpus / "manifest.json")
    rows = [r for r in manifest["samples"] if r["split"] == args.split]
    if not rows:
        raise UsageError(f"{corpus}: split {args.split!r} is empty")
    for row in rows:
        x = read_wav(corpus / row["mixture"], rate)
        result = infer(x, model, opts)
        _write_inference(result, x.size, out / row["id"], row["id"], rate)
    print(f"processed {len(rows)} mixtures from {args.split}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    corpus = _require_corpus(args.corpus)
    hyp_dir = _require_dir(args.hyp, "hypothesis directory")
    manifest = read_json(corpus / "manifest.json")
    rate = manifest["config"]["sample_rate"]
    rows = []
    for sample in load_split(corpus, args.split, manifest):
        folder = hyp_dir / sample.id
        meta_path = folder / "result.json"
        if not meta_path.is_file():
            raise UsageError(f"missing hypothesis for {sample.id}: {meta_path}")
        c_hat = int(read_json(meta_path)["num_speakers"])
        ests = [read_wav(folder / f"spk{c}.wav", rate) for c in range(1, c_hat + 1)]
        hyp = read_rttm(folder / "hyp.rttm", sample.labels.shape[1], c_hat)
        # hypotheses written by infer are already median filtered
        rows.append(score_utterance(sample.id, sample.mixture, sample.sources, ests, sample.labels, hyp,
                                    sample.requested_overlap, rate, median_frames=args.median_frames))
    report = MetricsReport(rows)
    out = Path(args.out)
    report.save(out)
    cfg.save(out / "config.json")
    agg = report.aggregate
    print(f"{agg['utterances']} utterances: DER {agg['der']:.2f}%  SI-SDRi {agg['si_sdri']:.2f} dB  "
          f"SDRi {agg['sdri']:.2f} dB  STOI {agg['stoi']:.3f}  SCA {agg['sca']:.1f}%")
    return 0


def cmd_spectrogram(args) -> int:
    wav = Path(args.wav)
    if not wav.is_file():
        raise UsageError(f"input audio not found: {wav}")
    x = read_wav(wav, None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frames = write_spectrogram(x, out.with_suffix(".png"), out.with_suffix(".csv"), n_mels=args.mel)
    print(f"{frames.shape[1]} bins x {frames.shape[0]} frames -> {out.with_suffix('.png')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eendss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="overrides corpus.seed and train.seed")

    s = sub.add_parser("simulate", help="generate a synthetic corpus")
    common(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train or finetune a model")
    common(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lmf", action="store_true", help="concatenate log-mel features in the diarization branch")
    for i in (1, 2, 3):
        t.add_argument(f"--lambda{i}", type=float)
    t.add_argument("--finetune-from", help="checkpoint to finetune on a mixed-count corpus")
    t.add_argument("--c-max", type=int)
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="diarize, count and separate")
    common(i)
    i.add_argument("--checkpoint", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav", help="single mixture")
    src.add_argument("--corpus", help="corpus directory; processes one split")
    i.add_argument("--split", default="test")
    i.add_argument("--out", required=True)
    i.add_argument("--fusion", action="store_true")
    i.add_argument("--lmf", action="store_true", help="require a checkpoint with LMF concatenation")
    i.add_argument("--threshold-theta", type=float)
    i.add_argument("--threshold-tau", type=float)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score hypotheses against a corpus split")
    common(e)
    e.add_argument("--corpus", required=True)
    e.add_argument("--hyp", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--median-frames", type=int, default=1,
                   help="extra hypothesis median filter (infer output is already filtered)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("spectrogram", help="log-power spectrogram as PNG and CSV")
    g.add_argument("--wav", required=True)
    g.add_argument("--out", required=True, help="output path prefix")
    g.add_argument("--mel", type=int, default=None, help="number of mel bands (default: linear bins)")
    g.set_defaults(func=cmd_spectrogram)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - surface any failure as a non-zero exit
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``tnga <subcommand> [flags]``.

Each subcommand writes its artifacts under --out and prints a one-line
JSON summary on stdout.  Exit status: 0 success, 1 usage or config error,
2 runtime failure.  GRAFT_LOG={error,info,debug} sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

from . import __version__, align, autonet, cochlea, features, pipeline, signal

log = logging.getLogger("tnga")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p, out_help="output directory"):
    p.add_argument("--out", required=True, type=Path, help=out_help)
    p.add_argument("--seed", type=int, default=0, help="base random seed (integer); run r uses seed + r")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (processes); default 1")


def _experiment_flags(p, lr_default_name):
    p.add_argument("--config", type=Path, help="experiment config JSON (ExperimentConfig fields)")
    p.add_argument("--epochs", type=int, help="training epochs (count)")
    p.add_argument("--lr", type=float, help=f"Adam learning rate (unitless; default {lr_default_name})")
    p.add_argument("--runs", type=int, help="independent runs with consecutive seeds (count)")
    p.add_argument("--batch-size", type=int, help="sequences per minibatch (count)")
    p.add_argument("--gru", type=int, nargs="+", help="GRU widths (units per layer)")
    p.add_argument("--fc", type=int, help="fully connected layer width (units)")
    p.add_argument("--window-ms", type=float, help="feature window length (ms)")
    p.add_argument("--stride-ms", type=float, help="feature stride (ms)")
    p.add_argument("--no-report", action="store_true", help="skip PNG figures")


def build_parser() -> Parser:
    parser = Parser(prog="tnga", description="Spiking-cochlea simulation and network grafting experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate the synthetic spoken-word corpus")
    _common(p, "dataset directory (gets train.jsonl, test.jsonl and WAV folders)")
    p.add_argument("--train", type=int, default=500, help="training samples (count)")
    p.add_argument("--test", type=int, default=200, help="test samples (count)")
    p.add_argument("--vocab", type=int, default=11, help="word classes (count)")
    p.add_argument("--words", type=int, nargs=2, default=(1, 7), metavar=("MIN", "MAX"),
                   help="words per sample (count range, inclusive)")
    p.add_argument("--sample-rate", type=int, default=16000, help="sample rate (Hz)")

    p = sub.add_parser("cochlea", help="simulate the software cochlea on WAV audio")
    _common(p, "event CSV (with --wav) or directory (with --audio)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav", type=Path, help="single mono WAV file")
    src.add_argument("--audio", type=Path, help="dataset directory with train/test manifests")
    p.add_argument("--config", type=Path, help="cochlea config JSON (default: ideal 64-channel model)")
    p.add_argument("--sigma-theta", type=float, default=0.0, help="threshold mismatch (relative std, unitless)")
    p.add_argument("--sigma-q", type=float, default=0.0, help="Q mismatch (relative std, unitless)")
    p.add_argument("--save-config", type=Path, help="also write the effective cochlea config JSON here")
    p.add_argument("--no-report", action="store_true", help="skip the raster PNG")

    p = sub.add_parser("featurize", help="Log-Mel or TBSC features to a TFTR file")
    _common(p, "output TFTR feature file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav", type=Path, help="WAV input (Log-Mel)")
    src.add_argument("--events", type=Path, help="event CSV input (TBSC)")
    p.add_argument("--duration-us", type=int, help="recording length for TBSC (µs; default: last event time)")
    p.add_argument("--window-ms", type=float, default=25.0, help="window length (ms)")
    p.add_argument("--stride-ms", type=float, default=10.0, help="stride (ms)")
    p.add_argument("--bands", type=int, default=features.N_MELS, help="mel bands (count, Log-Mel only)")
    p.add_argument("--no-report", action="store_true", help="skip the feature PNG")

    p = sub.add_parser("align", help="DTW-retime an event recording onto its audio")
    _common(p, "retimed event CSV (a JSON report is written beside it)")
    p.add_argument("--wav", type=Path, required=True, help="audio WAV")
    p.add_argument("--events", type=Path, required=True, help="event CSV")
    p.add_argument("--window-ms", type=float, default=25.0, help="feature window (ms)")
    p.add_argument("--stride-ms", type=float, default=10.0, help="feature stride (ms)")

    p = sub.add_parser("pretrain", help="train PT on Log-Mel audio features with CTC")
    _common(p)
    p.add_argument("--audio", type=Path, help="dataset directory (default: synthesize from config)")
    _experiment_flags(p, "3e-4")

    p = sub.add_parser("train-sn", help="train SN on TBSC event features with CTC")
    _common(p)
    p.add_argument("--events", type=Path, help="event dataset directory (default: simulate from config)")
    _experiment_flags(p, "3e-4")

    p = sub.add_parser("graft", help="graft an event front end onto a pretrained network")
    _common(p)
    p.add_argument("--pretrained", type=Path, nargs="+", required=True,
                   help="PT checkpoint(s); one per run or one shared")
    p.add_argument("--events", type=Path, help="event dataset directory")
    p.add_argument("--audio", type=Path, help="audio dataset directory (paired with --events)")
    p.add_argument("--alignment", choices=["dtw", "pre-aligned"], help="event retiming before pairing")
    _experiment_flags(p, "1e-3")

    p = sub.add_parser("eval", help="test WER of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, nargs="+", required=True, help="checkpoint file(s)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--audio", type=Path, help="audio dataset directory (Log-Mel input)")
    src.add_argument("--events", type=Path, help="event dataset directory (TBSC input)")
    p.add_argument("--split", choices=["train", "test"], default="test", help="which manifest to score")
    p.add_argument("--tag", default=None, help="model tag for the metrics file")
    p.add_argument("--window-ms", type=float, default=25.0, help="feature window (ms)")
    p.add_argument("--stride-ms", type=float, default=10.0, help="feature stride (ms)")

    p = sub.add_parser("nonideal", help="SN vs GN WER with and without cochlea mismatch")
    _common(p)
    p.add_argument("--pretrained", type=Path, nargs="+", required=True, help="PT checkpoint(s), one per run or shared")
    p.add_argument("--sigma-theta", type=float, default=0.2, help="threshold mismatch (relative std)")
    p.add_argument("--sigma-q", type=float, default=0.2, help="Q mismatch (relative std)")
    p.add_argument("--lr-sn", type=float, help="SN learning rate (unitless)")
    _experiment_flags(p, "1e-3 for grafting")

    p = sub.add_parser("decode-states", help="invert front-end states back to a Log-Mel input")
    _common(p, "output TFTR file of the decoded Log-Mel matrix")
    p.add_argument("--pretrained", type=Path, required=True, help="PT checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--grafted", type=Path, help="GN checkpoint; states come from its front on --features")
    src.add_argument("--self", dest="self_check", action="store_true",
                     help="use the pretrained front's own states on --features (Log-Mel)")
    p.add_argument("--features", type=Path, required=True, help="TFTR feature file feeding the front end")
    p.add_argument("--reference", type=Path, help="Log-Mel TFTR file drawn beside the decoded output")
    p.add_argument("--iters", type=int, default=5000, help="Adam iterations (count)")
    p.add_argument("--lr", type=float, default=1e-2, help="Adam learning rate (unitless)")
    p.add_argument("--clip", type=float, default=-10.0, help="lower clip of the output (log energy)")
    p.add_argument("--no-report", action="store_true", help="skip the PNG")
    return parser


# ---------------------------------------------------------------------------


def _experiment_config(args, lr_field: str) -> pipeline.ExperimentConfig:
    if getattr(args, "config", None):
        try:
            cfg = pipeline.ExperimentConfig.load(args.config)
        except FileNotFoundError:
            raise
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from exc
    else:
        cfg = pipeline.ExperimentConfig()
    over = {"seed": args.seed}
    for flag, name in (("epochs", "epochs"), ("runs", "runs"), ("batch_size", "batch_size"), ("fc", "fc_size")):
        if getattr(args, flag, None) is not None:
            over[name] = getattr(args, flag)
    if getattr(args, "gru", None):
        over["gru_sizes"] = tuple(args.gru)
    if getattr(args, "lr", None) is not None:
        over[lr_field] = args.lr
    if getattr(args, "alignment", None):
        over["alignment"] = args.alignment
    if getattr(args, "window_ms", None) is not None or getattr(args, "stride_ms", None) is not None:
        for key, width in (("audio_features", features.N_MELS), ("event_features", cochlea.N_CHANNELS)):
            old = getattr(cfg, key)
            over[key] = features.FeatureConfig(args.window_ms or old.window_ms, args.stride_ms or old.stride_ms, width)
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write_runs(out: Path, stem: str, nets, doc, runs, report: bool, ylabel: str):
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for net, r in zip(nets, runs):
        path = out / f"{stem}-seed{r.seed}.ckpt"
        autonet.save_checkpoint(net, path, {"model_tag": doc["model_tag"], "seed": r.seed})
        paths.append(str(path))
    pipeline.write_metrics(doc, out / f"{stem}.metrics.json")
    pipeline.write_timing(runs, out / f"{stem}.timing.json")
    with open(out / f"{stem}.losses.csv", "w") as fh:
        fh.write("seed,epoch,train_loss,val_loss\n")
        for r in runs:
            for e, (a, b) in enumerate(zip(r.epoch_losses, r.val_losses), 1):
                fh.write(f"{r.seed},{e},{a:.8g},{b:.8g}\n")
    if report:
        from . import plotting

        plotting.plot_losses(runs, out / f"{stem}.losses.png", ylabel)
    return {"checkpoints": paths, "metrics": str(out / f"{stem}.metrics.json"),
            "wer_mean": doc["wer_mean"], "wer_std": doc["wer_std"]}


def cmd_synth(args):
    spec = signal.SynthSpec(args.vocab, tuple(args.words), args.seed, args.sample_rate)
    train, test = signal.synth_dataset(spec, args.train, args.test)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    m1 = signal.write_dataset(train, out, "train")
    m2 = signal.write_dataset(test, out, "test")
    with open(out / "synth.json", "w") as fh:
        json.dump({**spec.to_dict(), "n_train": args.train, "n_test": args.test}, fh, indent=1)
    return {"train_manifest": str(m1), "test_manifest": str(m2), "n_train": len(train), "n_test": len(test)}


def _cochlea_config(args, sample_rate):
    if args.config:
        try:
            cfg = cochlea.load_config(args.config)
        except (ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"bad cochlea config {args.config}: {exc}") from exc
    else:
        cfg = cochlea.default_config(sample_rate)
    if args.sigma_theta or args.sigma_q:
        cfg = cochlea.apply_mismatch(cfg, cochlea.MismatchSpec(args.sigma_theta, args.sigma_q, args.seed))
    return cfg


def cmd_cochlea(args):
    if args.wav:
        wav = signal.read_wav(args.wav)
        cfg = _cochlea_config(args, wav.sample_rate)
        ev = cochlea.run_cochlea(cfg, wav)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        cochlea.write_events_csv(ev, args.out)
        if not args.no_report:
            from . import plotting

            plotting.plot_raster(ev, args.out.with_suffix(".png"), args.wav.name)
        summary = {"events": str(args.out), "n_events": len(ev), "duration_us": wav.duration_us}
    else:
        rate = None
        counts = {}
        for split in ("train", "test"):
            manifest = args.audio / f"{split}.jsonl"
            if not manifest.exists():
                continue
            rows = signal.read_manifest(manifest)
            samples = [SimpleNamespace(waveform=signal.read_wav(r["wav"]), labels=r["labels"], sample_id=r["id"])
                       for r in rows]
            if rate is None and samples:
                rate = samples[0].waveform.sample_rate
                cfg = _cochlea_config(args, rate)
            pipeline.write_event_dataset(samples, cfg, args.out, split)
            counts[split] = len(samples)
        if rate is None:
            raise FileNotFoundError(f"no train/test manifests in {args.audio}")
        summary = {"events_dir": str(args.out), **{f"n_{k}": v for k, v in counts.items()}}
    if args.save_config:
        cochlea.save_config(cfg, args.save_config)
    return summary


def cmd_featurize(args):
    fcfg = features.FeatureConfig(args.window_ms, args.stride_ms, args.bands if args.wav else cochlea.N_CHANNELS)
    if args.wav:
        feats = features.log_mel(signal.read_wav(args.wav), fcfg)
    else:
        ev = cochlea.read_events_csv(args.events)
        dur = args.duration_us if args.duration_us is not None else (int(ev.t_us[-1]) if len(ev) else 0)
        feats = features.tbsc(ev, fcfg, dur)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    features.write_features(feats, args.out)
    if not args.no_report:
        from . import plotting

        plotting.plot_features(feats, args.out.with_suffix(".png"), f"{'Log-Mel' if args.wav else 'TBSC'} {fcfg.tag}")
    return {"features": str(args.out), "rows": len(feats), "cols": int(feats.frames.shape[1]), "config": fcfg.tag}


def cmd_align(args):
    wav = signal.read_wav(args.wav)
    ev = cochlea.read_events_csv(args.events)
    fa = features.log_mel(wav, features.FeatureConfig(args.window_ms, args.stride_ms))
    fcfg = features.FeatureConfig(args.window_ms, args.stride_ms, cochlea.N_CHANNELS)
    dur = max(wav.duration_us, int(ev.t_us[-1]) if len(ev) else 0)
    fs = features.tbsc(ev, fcfg, dur)
    path = align.dtw(align.envelope(fa.frames), align.envelope(fs.frames))
    rep = align.WarpReport()
    warped = align.warp_events(ev, path, fa.timestamps, fs.timestamps, rep)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    cochlea.write_events_csv(warped, args.out)
    report = {"sample_id": args.wav.stem, "dtw_cost": path.total_cost, "clamped_events": rep.clamped_events}
    with open(args.out.with_suffix(".align.json"), "w") as fh:
        json.dump(report, fh)
        fh.write("\n")
    return {"events": str(args.out), **report}


def _corpus(args, cfg, audio=None, events=None, need_events=True):
    if audio is None and events is None:
        return pipeline.build_corpus(cfg, with_events=need_events)
    return pipeline.load_corpus(audio, events, cfg)


def cmd_pretrain(args):
    cfg = _experiment_config(args, "lr_supervised")
    corpus = _corpus(args, cfg, audio=args.audio, need_events=False)
    nets, doc, runs = pipeline.run_pretrain(cfg, corpus, args.jobs)
    return _write_runs(args.out, "pt", nets, doc, runs, not args.no_report, "CTC loss")


def cmd_train_sn(args):
    cfg = _experiment_config(args, "lr_supervised")
    corpus = _corpus(args, cfg, events=args.events)
    nets, doc, runs = pipeline.run_supervised_events(cfg, corpus, args.jobs)
    return _write_runs(args.out, "sn", nets, doc, runs, not args.no_report, "CTC loss")


def _load_pretrained(paths, runs):
    nets = [autonet.load_checkpoint(p) for p in paths]
    if len(nets) not in (1, runs):
        raise UsageError(f"give one pretrained checkpoint or one per run ({runs}), got {len(nets)}")
    return nets if len(nets) == runs else nets * runs


def cmd_graft(args):
    cfg = _experiment_config(args, "lr_tnga")
    if (args.events is None) != (args.audio is None):
        raise UsageError("--events and --audio go together (or omit both to synthesize from config)")
    pts = _load_pretrained(args.pretrained, cfg.runs)
    corpus = _corpus(args, cfg, audio=args.audio, events=args.events)
    nets, doc, runs = pipeline.run_graft(cfg, pts, corpus, args.jobs)
    return _write_runs(args.out, "gn", nets, doc, runs, not args.no_report, "T-NGA loss")


def cmd_eval(args):
    kind = "audio" if args.audio else "events"
    fcfg = features.FeatureConfig(args.window_ms, args.stride_ms)
    cfg = pipeline.ExperimentConfig(audio_features=fcfg, event_features=replace(fcfg, n_bands=cochlea.N_CHANNELS))
    corpus = pipeline.load_corpus(args.audio, args.events, cfg)
    items = corpus.test if args.split == "test" else corpus.train
    if not items:
        raise FileNotFoundError(f"no {args.split} samples found")
    runs = []
    for i, path in enumerate(args.checkpoint):
        net = autonet.load_checkpoint(path)
        seed = autonet.read_checkpoint_header(path)["meta"].get("seed", i)
        runs.append(pipeline.RunMetrics(seed, test_wer=pipeline.evaluate(net, items, kind)))
    tag = args.tag or autonet.read_checkpoint_header(args.checkpoint[0])["meta"].get("model_tag", "model")
    doc = pipeline.summarize(tag, fcfg if kind == "audio" else cfg.event_features, runs)
    doc["split"] = args.split
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"eval-{args.split}.metrics.json"
    pipeline.write_metrics(doc, path)
    return {"metrics": str(path), "wer_mean": doc["wer_mean"], "wer_std": doc["wer_std"]}


def cmd_nonideal(args):
    cfg = _experiment_config(args, "lr_tnga")
    if args.lr_sn is not None:
        cfg = replace(cfg, lr_supervised=args.lr_sn)
    cfg = replace(cfg, mismatch_seed=args.seed)
    pts = _load_pretrained(args.pretrained, cfg.runs)
    report = pipeline.nonideality_study(cfg, pts, args.sigma_theta, args.sigma_q, args.jobs)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_metrics(report, out / "nonideal.json")
    rows = pipeline.nonideality_rows(report)
    with open(out / "nonideal.csv", "w") as fh:
        fh.write("condition,model,wer_mean,wer_std\n")
        for r in rows:
            fh.write(f"{r['condition']},{r['model']},{r['wer_mean']:.6f},{r['wer_std']:.6f}\n")
    if not args.no_report:
        from . import plotting

        plotting.plot_wer_bars(rows, out / "nonideal.png")
    return {"report": str(out / "nonideal.json"), "ideal_gap": report["ideal"]["gap"],
            "mismatch_gap": report["mismatch"]["gap"], "gap_widened": report["gap_widened"]}


def cmd_decode_states(args):
    pt = autonet.load_checkpoint(args.pretrained)
    feats = features.read_features(args.features)
    source = pt if args.self_check else autonet.load_checkpoint(args.grafted)
    states = autonet.forward_front(source, feats)
    res = pipeline.decode_states(pt, states, args.iters, args.lr, args.clip, record_every=max(1, args.iters // 100))
    decoded = features.Features(res.frames, feats.timestamps, features.FeatureConfig())
    args.out.parent.mkdir(parents=True, exist_ok=True)
    features.write_features(decoded, args.out)
    if not args.no_report:
        from . import plotting

        ref = features.read_features(args.reference).frames if args.reference else (feats.frames if args.self_check else None)
        plotting.plot_decoded(ref, res.frames, args.out.with_suffix(".png"), args.clip)
    return {"decoded": str(args.out), "initial_loss": res.losses[0], "final_loss": res.losses[-1],
            "reduction": res.reduction, "converged": res.converged}


COMMANDS = {
    "synth": cmd_synth, "cochlea": cmd_cochlea, "featurize": cmd_featurize, "align": cmd_align,
    "pretrain": cmd_pretrain, "train-sn": cmd_train_sn, "graft": cmd_graft, "eval": cmd_eval,
    "nonideal": cmd_nonideal, "decode-states": cmd_decode_states,
}


def _setup_logging():
    level = os.environ.get("GRAFT_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG", "WARNING"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "jobs", 1) < 1:
        print("tnga: error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tnga {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"tnga {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "status": "ok", **summary}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())

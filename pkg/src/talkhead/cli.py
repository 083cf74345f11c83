"""Command-line entry point: ``talkhead <command> [--flags]``.

Exit status is 0 on success, 2 for usage errors (bad or missing flags,
unreadable inputs) and 1 for failures while running.  Log verbosity is
taken from the ``TALKHEAD_LOG`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import audio, data, face, geometry, metrics, render, trainer

logger = logging.getLogger("talkhead")


class UsageError(Exception):
    pass


_TRAIN_HELP = {
    "epochs": "training epochs",
    "batch_size": "utterances per batch",
    "lr": "Adam learning rate",
    "val_fraction": "validation fraction per speaker",
    "eval_every": "epochs between validation passes",
    "memory": "memory mode: wo, w or cs",
    "n_components": "mixture components M (1..8)",
    "regression": "regression target: f_tt or f_a",
    "context_frames": "content frames on each side fed to the MDN",
    "sfe_hidden": "Bi-GRU hidden size",
    "feature_dim": "content/identity feature size",
    "content_slots": "content memory slots",
    "identity_slots": "identity memory slots",
    "address_hidden": "addresser hidden size",
    "n_mels": "fbank channels",
    "mdn_hidden": "MDN hidden size",
    "sfe_bypass": "train the MDN on pooled fbank instead of SFE features",
    "finetune_sfe": "fine-tune the SFE during the MDN stage",
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags given here override it (default: none)")
    p.add_argument("--seed", type=int, help="RNG seed (required, here or in --config)")
    defaults = {f.name: f.default for f in dataclasses.fields(trainer.TrainConfig) if f.name not in ("seed", "stage")}
    for name, default in defaults.items():
        flag = "--" + name.replace("_", "-")
        kind = type(default)
        if kind is bool:
            p.add_argument(flag, choices=["true", "false"], default=None,
                           help=f"{_TRAIN_HELP[name]} (default: {str(default).lower()})")
        else:
            p.add_argument(flag, type=kind, default=None, help=f"{_TRAIN_HELP[name]} (default: {default})")


def _train_config(args, stage: str) -> trainer.TrainConfig:
    values = {}
    if args.config:
        try:
            values.update(trainer.read_config_file(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    for f in dataclasses.fields(trainer.TrainConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            values[f.name] = val
    values["stage"] = stage
    if "seed" not in values:
        raise UsageError("a seed is required (--seed or seed = ... in --config)")
    try:
        return trainer.TrainConfig.from_mapping(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_data(path: str) -> list[data.Utterance]:
    result = data.load_dataset(_existing(path, "manifest"))
    for err in result.errors:
        logger.warning("skipped: %s", err)
    if not result.utterances:
        raise UsageError(f"no usable utterances in {path}")
    return result.utterances


def _log_writer(path):
    if not path:
        return None, None
    fh = open(path, "w")

    def sink(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
    return sink, fh


def _run_training(args, stage: str) -> int:
    cfg = _train_config(args, stage)
    utts = _load_data(args.data)
    out = Path(args.out)
    last = out.with_name(out.name + ".last")
    resume = None
    if args.resume:
        resume = trainer.load_checkpoint(_existing(args.resume, "checkpoint"))
    sink, fh = _log_writer(args.log)
    if sink is not None and resume is not None:
        for rec in resume.meta.get("log", []):
            sink(rec)
    try:
        if stage == "sfe":
            res = trainer.train_sfe(cfg, utts, resume=resume, stop_after=args.stop_after, log_sink=sink)
        else:
            sfe_ck = None
            if not cfg.sfe_bypass:
                if not args.sfe:
                    raise UsageError("--sfe is required unless --sfe-bypass true")
                sfe_ck = trainer.load_checkpoint(_existing(args.sfe, "SFE checkpoint"))
            res = trainer.train_mdn(cfg, utts, sfe_checkpoint=sfe_ck, resume=resume,
                                    stop_after=args.stop_after, log_sink=sink)
    finally:
        if fh is not None:
            fh.close()
    trainer.save_checkpoint(last, res.checkpoint)
    trainer.save_checkpoint(out, res.checkpoint)
    meta = res.checkpoint.meta
    print(f"{stage}: epoch {meta['epoch']}/{cfg.epochs}, best epoch {meta['best_epoch']}, "
          f"best {json.dumps(meta['best_metrics'], sort_keys=True)}, config {cfg.hash()}")
    return 0


def cmd_synth_data(args) -> int:
    spec = data.SyntheticSpec(n_speakers=args.n_speakers, n_utterances=args.n_utterances,
                              modes_per_phone=args.modes_per_phone, noise_sigma=args.noise_sigma,
                              seed=args.seed, head_motion=args.head_motion)
    manifest = data.write_dataset(data.generate_synthetic(spec), args.out)
    print(f"wrote {args.n_utterances} utterances, manifest {manifest}")
    return 0


def cmd_train_sfe(args) -> int:
    return _run_training(args, "sfe")


def cmd_train_mdn(args) -> int:
    return _run_training(args, "mdn")


def _load_models(mdn_path: str, sfe_path: str | None):
    mdn_ck = trainer.load_checkpoint(_existing(mdn_path, "MDN checkpoint"))
    cfg = trainer.TrainConfig.from_mapping(mdn_ck.config)
    mdn_model = trainer.load_mdn(mdn_ck)
    sfe_model = None
    if not cfg.sfe_bypass:
        if not sfe_path:
            raise UsageError("--sfe is required for an MDN trained on SFE features")
        sfe_model = trainer.load_sfe(trainer.load_checkpoint(_existing(sfe_path, "SFE checkpoint")))
    return cfg, mdn_model, sfe_model


def cmd_infer(args) -> int:
    cfg, mdn_model, sfe_model = _load_models(args.mdn, args.sfe)
    try:
        wav = audio.read_wav(_existing(args.wav, "wav file"))
        ref_track = data.read_landmarks(_existing(args.reference, "reference track"))
    except (audio.AudioError, data.DataError) as exc:
        raise UsageError(str(exc)) from exc
    scale = float(np.mean([face.interocular_distance(f) for f in ref_track]))
    n_frames = args.frames or wav.samples.size // data.SAMPLES_PER_VIDEO_FRAME
    if n_frames < 1:
        raise UsageError("audio shorter than one video frame")
    track = trainer.predict_track(mdn_model, sfe_model, wav, ref_track[0] / scale, n_frames,
                                  cfg.context_frames, use_mixture=args.mixture)
    data.write_landmarks(args.out, track * scale)
    print(f"wrote {n_frames} frames to {args.out}")
    return 0


def _pairs(args) -> list[tuple[Path, Path]]:
    if len(args.generated) != len(args.reference):
        raise UsageError("--generated and --reference need the same number of tracks")
    return [(_existing(g, "generated track"), _existing(r, "reference track"))
            for g, r in zip(args.generated, args.reference)]


def cmd_eval(args) -> int:
    pairs = _pairs(args)
    gens, refs = [], []
    for g, r in pairs:
        try:
            gen, ref = data.read_landmarks(g), data.read_landmarks(r)
        except data.DataError as exc:
            raise UsageError(str(exc)) from exc
        if gen.shape != ref.shape:
            raise UsageError(f"{g} and {r} differ in shape: {gen.shape} vs {ref.shape}")
        scale = float(np.mean([face.interocular_distance(f) for f in ref]))
        gens.append(gen / scale)
        refs.append(ref / scale)
    gen, ref = np.concatenate(gens), np.concatenate(refs)
    config_hash = None
    if args.mdn:
        mdn_ck = trainer.load_checkpoint(_existing(args.mdn, "MDN checkpoint"))
        template = trainer.load_mdn(mdn_ck).buffers["template"]
        config_hash = trainer.TrainConfig.from_mapping(mdn_ck.config).hash()
    else:
        template = geometry.generalized_procrustes(ref)
    theta_g = [geometry.align(f, template).pose.theta for f in gen]
    theta_r = [geometry.align(f, template).pose.theta for f in ref]
    spec = render.RenderSpec(width=args.width, height=args.height)
    ssims, psnrs = [], []
    for a, b in zip(gen, ref):
        ia, ib = render.rasterize(a, spec), render.rasterize(b, spec)
        ssims.append(metrics.ssim(ia, ib))
        psnrs.append(metrics.psnr(ia, ib))
    results = [("lmd", metrics.lmd(gen, ref)), ("rd", metrics.rd(theta_g, theta_r)),
               ("wireframe_ssim", float(np.mean(ssims))), ("wireframe_psnr", float(np.mean(psnrs)))]
    records = [{"metric": m, "value": v, "config_hash": config_hash, "frames": int(gen.shape[0])}
               for m, v in results]
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    labels = {"lmd": "LMD", "rd": "RD (rad)", "wireframe_ssim": "wireframe-SSIM", "wireframe_psnr": "wireframe-PSNR (dB)"}
    print(f"{'metric':<22}{'value':>14}")
    for m, v in results:
        print(f"{labels[m]:<22}{v:>14.6f}")
    print(f"frames: {gen.shape[0]}  config: {config_hash or '-'}")
    return 0


def cmd_ablate(args) -> int:
    utts = _load_data(args.data)
    eval_set = _load_data(args.eval_data) if args.eval_data else None
    base = _train_config(args, "mdn")
    sfe_base = base.replace(stage="sfe", epochs=args.sfe_epochs or base.epochs)
    try:
        components = [int(x) for x in args.components.split(",")]
    except ValueError as exc:
        raise UsageError(f"--components: {exc}") from exc
    memories = args.memories.split(",")
    regressions = args.regressions.split(",")
    for m in memories:
        if m not in ("wo", "w", "cs"):
            raise UsageError(f"unknown memory mode {m!r}")
    for r in regressions:
        if r not in ("f_tt", "f_a"):
            raise UsageError(f"unknown regression mode {r!r}")
    report = trainer.run_ablation(utts, sfe_base, base, components, memories, regressions,
                                  eval_set=eval_set, workers=args.workers)
    checks = trainer.check_trends(report, memory=memories[0], regression=regressions[0])
    if args.out:
        lines = [json.dumps(r.as_dict(), sort_keys=True) for r in report.rows]
        lines += [json.dumps({"trend": c.name, "passed": c.passed, "detail": c.detail}) for c in checks]
        Path(args.out).write_text("\n".join(lines) + "\n")

    def fmt(v):
        return "-" if v is None else f"{v:.4f}"
    print(f"{'config':<14}{'stage':<6}{'mem':<5}{'M':>3} {'reg':<6}{'LMD':>9}{'RD':>9}{'EER':>9}")
    for r in report.rows:
        print(f"{r.config_hash:<14}{r.stage:<6}{r.memory:<5}{r.n_components or '-':>3} {r.regression or '-':<6}"
              f"{fmt(r.lmd):>9}{fmt(r.rd):>9}{fmt(r.eer):>9}" + (f"  error: {r.error}" if r.error else ""))
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    return 0


def cmd_render(args) -> int:
    try:
        track = data.read_landmarks(_existing(args.track, "track"))
    except data.DataError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = render.RenderSpec(width=args.width, height=args.height)
    for i, frame in enumerate(track):
        render.write_pgm(out / f"{args.prefix}{i:05d}.pgm", render.rasterize(frame, spec))
    print(f"wrote {len(track)} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkhead", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory (required)")
    p.add_argument("--n-speakers", type=int, default=4, help="speakers (default: 4)")
    p.add_argument("--n-utterances", type=int, default=8, help="utterances (default: 8)")
    p.add_argument("--modes-per-phone", type=int, default=1, help="realisations per phone (default: 1)")
    p.add_argument("--noise-sigma", type=float, default=0.01, help="landmark noise (default: 0.01)")
    p.add_argument("--head-motion", type=float, default=1.0, help="head pose scale (default: 1.0)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.set_defaults(func=cmd_synth_data)

    for name, func, stage in (("train-sfe", cmd_train_sfe, "sfe"), ("train-mdn", cmd_train_mdn, "mdn")):
        p = sub.add_parser(name, help=f"train the {stage.upper()} stage")
        p.add_argument("--data", required=True, help="dataset manifest (required)")
        p.add_argument("--out", required=True, help="checkpoint path; <out>.last is also written (required)")
        if stage == "mdn":
            p.add_argument("--sfe", help="SFE checkpoint (default: none)")
        p.add_argument("--resume", help="checkpoint to resume from (default: none)")
        p.add_argument("--stop-after", type=int, default=None, help="stop after this epoch (default: run to the end)")
        p.add_argument("--log", help="metric log, one JSON record per line (default: none)")
        _add_train_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="predict a landmark track from a wav and a reference track")
    p.add_argument("--mdn", required=True, help="MDN checkpoint (required)")
    p.add_argument("--sfe", help="SFE checkpoint (default: none; needed unless the MDN bypassed the SFE)")
    p.add_argument("--wav", required=True, help="16 kHz mono PCM16 wav (required)")
    p.add_argument("--reference", required=True, help="landmark track; its first frame is the reference (required)")
    p.add_argument("--out", required=True, help="output landmark track (required)")
    p.add_argument("--frames", type=int, default=None, help="output frames (default: from audio length)")
    p.add_argument("--mixture", action="store_true", help="use the mixture mean instead of the top component (default: off)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score generated tracks against references")
    p.add_argument("--generated", nargs="+", required=True, help="generated tracks (required)")
    p.add_argument("--reference", nargs="+", required=True, help="reference tracks, same order (required)")
    p.add_argument("--mdn", help="MDN checkpoint supplying the alignment template (default: fit one to the references)")
    p.add_argument("--out", help="JSON-lines metric report (default: none)")
    p.add_argument("--width", type=int, default=256, help="wireframe width (default: 256)")
    p.add_argument("--height", type=int, default=256, help="wireframe height (default: 256)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--data", required=True, help="dataset manifest (required)")
    p.add_argument("--eval-data", help="manifest for speaker-verification EER (default: SFE validation split)")
    p.add_argument("--components", default="3", help="comma-separated M values (default: 3)")
    p.add_argument("--memories", default="cs", help="comma-separated memory modes (default: cs)")
    p.add_argument("--regressions", default="f_tt", help="comma-separated regression modes (default: f_tt)")
    p.add_argument("--sfe-epochs", type=int, default=None, help="SFE epochs (default: same as --epochs)")
    p.add_argument("--workers", type=int, default=1, help="parallel MDN cells (default: 1)")
    p.add_argument("--out", help="JSON-lines report (default: none)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="rasterise a landmark track to numbered PGM files")
    p.add_argument("--track", required=True, help="landmark track (required)")
    p.add_argument("--out-dir", required=True, help="output directory (required)")
    p.add_argument("--prefix", default="frame_", help="file name prefix (default: frame_)")
    p.add_argument("--width", type=int, default=256, help="canvas width (default: 256)")
    p.add_argument("--height", type=int, default=256, help="canvas height (default: 256)")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TALKHEAD_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: simulate, train, enhance, decode, score.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure. Failures print
one JSON object on a single stderr line.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import ComplexTensor, SingularMatrixError
from .config import ExperimentConfig, load_config, preset
from .corpus import DataError, ManifestRecord, load_utterances, read_manifest, write_manifest
from .ctccrf import decode_tokens, edit_distance, error_rate, read_units, write_units
from .frontend import DegenerateStatisticsError, beamform, beamform_with_masks, oracle_masks
from .nn import constant
from .roomsim import ArraySpec, RoomSpec, array_rirs, simulate
from .signal.stft import ComplexSpectrogram, istft, stft
from .signal.wavio import read_wav, write_wav
from .trainer import CheckpointError, Trainer
from .trainer.data import Utterance
from .toy import ToySpec, make_multi, make_single, toy_units, write_corpus
from .trainer.loop import NumericalFailure

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ROLES = ("multi", "single", "dev")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def _seed(args) -> int:
    return int(args.seed) if args.seed is not None else int(time.time_ns() % (2**31))


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return preset("desk")
    if not Path(args.config).is_file():
        raise DataError(f"config {args.config} not found")
    try:
        return load_config(args.config)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{args.config}: {exc}") from None


def _units(args, cfg: ExperimentConfig, required: bool = True) -> list[str] | None:
    path = getattr(args, "units", None) or cfg.units
    if path is None:
        if required:
            raise UsageError("a units file is needed (--units or config 'units')")
        return None
    try:
        return read_units(path)
    except OSError as exc:
        raise DataError(f"cannot read units file {path}: {exc}") from None


def _roles(specs: list[str]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {r: [] for r in ROLES}
    for spec in specs or []:
        role, sep, path = spec.partition(":")
        if not sep:
            role, path = "multi", spec
        if role not in ROLES:
            raise UsageError(f"manifest role {role!r} not in {ROLES}")
        out[role].append(path)
    return out


def _coords(text: str | None):
    if text is None:
        return None
    try:
        xyz = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected x,y,z coordinates, got {text!r}") from None
    if len(xyz) != 3:
        raise UsageError(f"expected x,y,z coordinates, got {text!r}")
    return xyz


# -- simulate ---------------------------------------------------------------
def cmd_simulate(args) -> int:
    rng = np.random.default_rng(_seed(args))
    records = read_manifest(args.manifest[0]) if args.manifest else []
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    noise = read_wav(args.noise) if args.noise else None
    if noise is not None and noise.channels != 1:
        raise DataError("--noise must be a mono wav")
    src = _coords(args.source) or (2.5, 3.73, 1.76)
    noise_pos = _coords(args.noise_position)
    center = _coords(args.array_center) or (5.0, 2.25, 1.0)
    cache: dict[int, tuple] = {}
    out = []
    for rec in records:
        if rec.channels != 1:
            raise DataError(f"{rec.utt_id}: simulation input must be mono")
        wave = read_wav(rec.audio_path, rec.sample_rate)
        if rec.sample_rate not in cache:
            room = RoomSpec(absorption=args.absorption, max_order=args.max_order, fs=rec.sample_rate)
            array = ArraySpec.tablet(center)
            try:
                cache[rec.sample_rate] = (room, array, array_rirs(room, array, src))
            except ValueError as exc:
                raise DataError(str(exc)) from None
        room, array, rirs = cache[rec.sample_rate]
        if noise is not None and noise.sample_rate != rec.sample_rate:
            raise DataError(f"{rec.utt_id}: noise rate {noise.sample_rate} != {rec.sample_rate}")
        try:
            mix, parts = simulate(
                wave, room, array, src, noise, args.snr_db if noise is not None else None,
                noise_pos, rng, rirs=rirs, return_parts=True,
            )
        except ValueError as exc:
            raise DataError(f"{rec.utt_id}: {exc}") from None
        wav_path = out_dir / f"{rec.utt_id}.wav"
        write_wav(wav_path, mix)
        clean_path = None
        if noise is not None:
            clean_path = out_dir / f"{rec.utt_id}.clean.wav"
            write_wav(clean_path, type(mix)(parts["speech"], mix.sample_rate))
        out.append(ManifestRecord(rec.utt_id, str(wav_path), mix.channels, mix.sample_rate, rec.transcript,
                                  "simulated", None if clean_path is None else str(clean_path)))
    write_manifest(out_dir / "manifest.jsonl", out)
    print(json.dumps({"manifest": str(out_dir / "manifest.jsonl"), "utterances": len(out)}))
    return EXIT_OK


# -- train -------------------------------------------------------------------
def _load_role(paths: list[str], units, with_clean: bool = False) -> list[Utterance]:
    utts: list[Utterance] = []
    for p in paths:
        utts.extend(load_utterances(read_manifest(p), units, with_clean))
    return utts


def cmd_train(args) -> int:
    started = time.time()
    roles = _roles(args.manifest)
    if args.checkpoint:
        trainer = Trainer.restore(args.checkpoint)
        cfg = trainer.cfg
        seed = trainer.seed
    else:
        cfg = _config(args)
        seed = _seed(args)
    units = trainer.meta.get("units") if args.checkpoint else None
    units = units or _units(args, cfg)
    multi = _load_role(roles["multi"], units, with_clean=args.stage == "frontend")
    single = _load_role(roles["single"], units)
    dev = _load_role(roles["dev"], units)
    for u in multi + dev:
        if u.channels < 2 and args.stage != "backend":
            raise DataError(f"{u.utt_id}: multi/dev manifests need >= 2 channels")
    for u in single:
        if u.channels != 1:
            raise DataError(f"{u.utt_id}: single manifests need mono audio")
    if len(units) != cfg.am.vocab:
        raise DataError(f"units file has {len(units)} entries, config vocab is {cfg.am.vocab}")
    if not args.checkpoint:
        trainer = Trainer.create(cfg, [u.labels for u in multi + single], seed)
        trainer.meta["units"] = list(units)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = args.epochs if args.epochs is not None else cfg.train.epochs
    first = trainer.epoch
    if args.stage == "joint":
        if not multi:
            raise DataError("joint training needs at least one multi: manifest")
        trainer.fit(multi, single, dev, epochs, out_dir)
    elif args.stage == "backend":
        if not single:
            raise DataError("back-end pre-training needs a single: manifest")
        trainer.pretrain_backend(single, epochs - trainer.epoch, out_dir)
    else:
        if not multi or any(u.clean is None for u in multi):
            raise DataError("front-end pre-training needs multi: records with clean_path")
        trainer.pretrain_frontend(multi, epochs - trainer.epoch)
        trainer.save(out_dir / f"frontend{trainer.epoch:03d}.ckpt")
    report = run_report(trainer, time.time() - started, first)
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"report": str(out_dir / "report.json"), "epochs": trainer.epoch, "steps": trainer.steps}))
    return EXIT_OK


def run_report(trainer: Trainer, wall_time: float, first_epoch: int = 0) -> dict:
    hist = trainer.history
    joint = sum(h.get("counts", {}).get("joint", 0) for h in hist)
    multi = joint + sum(h.get("counts", {}).get("channel", 0) for h in hist)
    devs = [h["dev"] for h in hist if h.get("dev")]
    return {
        "seed": trainer.seed,
        "config": trainer.cfg.to_dict(),
        "epochs": hist,
        "resumed_from_epoch": first_epoch or None,
        "steps": trainer.steps,
        "skip_fraction_observed": None if multi == 0 else joint / multi,
        "dev": devs[-1] if devs else None,
        "aborted_steps": trainer.failures,
        "wall_time": wall_time,
    }


# -- enhance / decode / score ------------------------------------------------------
def cmd_enhance(args) -> int:
    if args.checkpoint is None and not args.oracle:
        raise UsageError("enhance needs --checkpoint or --oracle")
    trainer = Trainer.restore(args.checkpoint) if args.checkpoint else None
    cfg = trainer.cfg if trainer else _config(args)
    fc = cfg.features
    records = read_manifest(args.manifest[0]) if args.manifest else []
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for u, rec in zip(load_utterances(records, None, with_clean=args.oracle), records):
        spec = stft(u.wave, fc.fft_size, fc.frame_shift)
        x = ComplexTensor.from_numpy(spec.numpy())
        if args.oracle:
            if u.clean is None:
                raise DataError(f"{u.utt_id}: --oracle needs clean_path")
            clean = stft(u.clean, fc.fft_size, fc.frame_shift).numpy()
            bf = beamform_with_masks(x, *oracle_masks(spec.numpy(), clean), cfg.frontend)
        else:
            bf = beamform(x, constant(trainer.params), cfg.frontend)
        s_hat = ComplexTensor.from_numpy(bf.enhanced.numpy()[..., None])
        y = istft(ComplexSpectrogram(s_hat, spec.frame_shift, spec.frame_length, u.wave.sample_rate, u.wave.n_samples))
        path = out_dir / f"{u.utt_id}.wav"
        write_wav(path, y)
        out.append(ManifestRecord(u.utt_id, str(path), 1, y.sample_rate, rec.transcript, rec.source_tag))
    write_manifest(out_dir / "manifest.jsonl", out)
    print(json.dumps({"manifest": str(out_dir / "manifest.jsonl"), "utterances": len(out)}))
    return EXIT_OK


def cmd_decode(args) -> int:
    if args.checkpoint is None:
        raise UsageError("decode needs --checkpoint")
    trainer = Trainer.restore(args.checkpoint)
    units = trainer.meta.get("units") or _units(args, trainer.cfg)
    records = []
    for p in args.manifest or []:
        records.extend(read_manifest(p))
    utts = load_utterances(records, None)
    report = trainer.evaluate_hyps(utts)
    lines = [json.dumps({"utt_id": k, "hypothesis": " ".join(decode_tokens(v, units))}) for k, v in report.items()]
    text = "".join(ln + "\n" for ln in lines)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def read_hypotheses(path: str | Path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"hypothesis file {path} not found")
    hyps = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            text = rec["hypothesis"] if "hypothesis" in rec else rec["transcript"]
            hyps[str(rec["utt_id"])] = str(text).split()
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"{path}:{lineno}: expected {{utt_id, hypothesis}}") from None
    return hyps


def score_report(hyps: dict[str, list[str]], refs: dict[str, list[str]]) -> dict:
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise DataError(f"no hypothesis for {len(missing)} utterances, e.g. {missing[0]}")
    ids = sorted(refs)
    stats = error_rate([hyps[i] for i in ids], [refs[i] for i in ids])
    if stats.ref_len == 0:
        raise DataError("references contain no tokens")
    return {
        "utterances": len(ids),
        "ref_tokens": stats.ref_len,
        "errors": stats.distance,
        "substitutions": stats.substitutions,
        "insertions": stats.insertions,
        "deletions": stats.deletions,
        "token_error_rate": stats.rate,
        "per_utterance": {i: edit_distance(hyps[i], refs[i]).distance for i in ids},
    }


def cmd_score(args) -> int:
    if not args.hyp or not args.ref:
        raise UsageError("score needs --hyp and --ref")
    refs = {r.utt_id: r.transcript.split() for r in read_manifest(args.ref, check_files=False)}
    report = score_report(read_hypotheses(args.hyp), refs)
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_toy(args) -> int:
    seed = _seed(args)
    spec = ToySpec(vocab=args.vocab, snr_db=args.snr_db)
    units = toy_units(spec.vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_units(out / "units.txt", units)
    paths = {
        "multi": write_corpus(make_multi(args.n_multi, seed, spec, "tr"), out, units, "multi"),
        "dev": write_corpus(make_multi(args.n_dev, seed + 1, spec, "dv"), out, units, "dev"),
    }
    if args.n_single:
        paths["single"] = write_corpus(make_single(args.n_single, seed, spec), out, units, "single")
    print(json.dumps({"units": str(out / "units.txt"), "seed": seed, **paths}))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcbeam", description="Multi-channel beamforming ASR toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (may start from 'preset: <name>')")
        sp.add_argument("--seed", type=int, help="single source of randomness; time-derived if omitted")
        sp.add_argument("--manifest", action="append", help="JSONL manifest; train accepts multi:/single:/dev: prefixes")
        sp.add_argument("--checkpoint", help="trainer checkpoint")
        sp.add_argument("--out", help="output directory or file")
        sp.add_argument("--units", help="units file, one token per line, blank first")

    s = sub.add_parser("simulate", help="render mono utterances through a simulated room")
    common(s)
    s.add_argument("--noise", help="mono noise wav")
    s.add_argument("--snr-db", type=float, default=0.0)
    s.add_argument("--noise-position", help="x,y,z of a directional noise source")
    s.add_argument("--source", help="x,y,z of the speaker")
    s.add_argument("--array-center", help="x,y,z of the tablet array centre")
    s.add_argument("--absorption", type=float, default=0.3)
    s.add_argument("--max-order", type=int, default=10)
    s.set_defaults(func=cmd_simulate, needs_out=True)

    t = sub.add_parser("train", help="joint training, or --stage backend/frontend pre-training")
    common(t)
    t.add_argument("--epochs", type=int, help="total epochs (overrides config)")
    t.add_argument("--stage", choices=("joint", "backend", "frontend"), default="joint")
    t.set_defaults(func=cmd_train, needs_out=True)

    e = sub.add_parser("enhance", help="beamform to mono wavs")
    common(e)
    e.add_argument("--oracle", action="store_true", help="use ideal binary masks from clean_path")
    e.set_defaults(func=cmd_enhance, needs_out=True)

    d = sub.add_parser("decode", help="greedy decoding to a hypothesis JSONL")
    common(d)
    d.set_defaults(func=cmd_decode, needs_out=False)

    c = sub.add_parser("score", help="token error rate of hypotheses against a reference manifest")
    c.add_argument("--hyp", help="hypothesis JSONL")
    c.add_argument("--ref", help="reference manifest")
    c.add_argument("--out", help="write the JSON report here too")
    c.set_defaults(func=cmd_score, needs_out=False)
    y = sub.add_parser("toy", help="write a synthetic toy corpus (multi, dev, single manifests + units)")
    y.add_argument("--seed", type=int)
    y.add_argument("--out", help="output directory")
    y.add_argument("--vocab", type=int, default=7)
    y.add_argument("--snr-db", type=float, default=0.0)
    y.add_argument("--n-multi", type=int, default=160)
    y.add_argument("--n-dev", type=int, default=40)
    y.add_argument("--n-single", type=int, default=0)
    y.set_defaults(func=cmd_toy, needs_out=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.needs_out and not args.out:
            raise UsageError(f"{args.command} needs --out")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (DataError, CheckpointError, OSError, EOFError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (DegenerateStatisticsError, SingularMatrixError, NumericalFailure, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())

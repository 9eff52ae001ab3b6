"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .audio_io import AudioSignal, load_wav, save_wav
from .corpus import MANIFEST_NAME, MixtureRecipe, build_manifest, verify_manifest
from .errors import ConfigurationError, InvalidInputError, NumericalError, SpxError
from .manifest import read_manifest
from .model import TINY_CONFIG, SpxConfig, SpxModel, forward, load_checkpoint, save_checkpoint
from .reinforcement import DEFAULT_SIGMAS, UNPROCESSED, alpha_for_sigma, format_sigma, parse_sigma, remix
from .training import LossSpec, TrainConfig, grad_check, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SNR_VERIFY_TOL_DB = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sigma_arg(token: str):
    try:
        return parse_sigma(token)
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _sigmas_arg(token: str):
    out = [_sigma_arg(t) for t in token.split(",") if t.strip()]
    if not out:
        raise argparse.ArgumentTypeError("empty sigma list")
    if UNPROCESSED in out:
        raise argparse.ArgumentTypeError("'unprocessed' is always reported; do not list it")
    return out


def _read_json(path, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{what} {path}: expected a JSON object")
    return data


# -- enhance / remix / sweep --------------------------------------------------------

def _enhance(model: SpxModel, mixture: AudioSignal, enrolment: AudioSignal) -> AudioSignal:
    est = forward(model, mixture, enrolment)
    if not np.all(np.isfinite(est.samples)):
        raise NumericalError("model output contains non-finite samples")
    return est


def cmd_enhance(args) -> int:
    model = load_checkpoint(args.model)
    mixture, enrolment = load_wav(args.mixture), load_wav(args.enrolment)
    est = _enhance(model, mixture, enrolment)
    z = remix(est, mixture, alpha_for_sigma(est, mixture, args.sigma))
    save_wav(z, args.out)
    return EXIT_OK


def cmd_remix(args) -> int:
    enhanced, mixture = load_wav(args.enhanced), load_wav(args.mixture)
    save_wav(remix(enhanced, mixture, alpha_for_sigma(enhanced, mixture, args.sigma)), args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = load_checkpoint(args.model)
    mixture, enrolment = load_wav(args.mixture), load_wav(args.enrolment)
    target = load_wav(args.target) if args.target else None
    est = _enhance(model, mixture, enrolment)
    outputs = [(s, remix(est, mixture, alpha_for_sigma(est, mixture, s))) for s in args.sigmas]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s, z in outputs:
        save_wav(z, out_dir / f"sigma_{format_sigma(s)}.wav")
    if target is not None:
        rows = [_metric_row("", s, target, z) for s, z in outputs]
        rows.append(_metric_row("", UNPROCESSED, target, mixture))
        print(format_table(rows))
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------------

@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"record": "row", **r}, sort_keys=True) for r in self.rows]
        lines += [json.dumps({"record": "aggregate", **a}, sort_keys=True) for a in self.aggregates]
        return "".join(line + "\n" for line in lines)


def _metric_row(uid: str, sigma, clean: AudioSignal, z: AudioSignal) -> dict:
    try:
        stoi = metrics.stoi(clean, z).value
    except SpxError as exc:
        warnings.warn(f"{uid}: STOI unavailable ({exc})", stacklevel=2)
        stoi = None
    return {"utterance_id": uid, "sigma": format_sigma(sigma), "sisdr_db": metrics.sisdr(clean, z).value,
            "stoi": stoi, "snr_db": metrics.snr(clean, z).value}


def aggregate(rows: list[dict], order: list[str]) -> list[dict]:
    out = []
    for s in order:
        sel = [r for r in rows if r["sigma"] == s]
        agg = {"sigma": s, "count": len(sel)}
        for key in ("sisdr_db", "stoi", "snr_db"):
            vals = [r[key] for r in sel if r[key] is not None]
            agg[key] = float(np.mean(vals)) if vals else None
        out.append(agg)
    return out


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def format_table(rows: list[dict]) -> str:
    lines = [f"{'sigma':>12} {'n':>5} {'SISDR dB':>10} {'STOI':>8} {'SNR dB':>10}"]
    for r in rows:
        n = r.get("count", 1)
        lines.append(f"{r['sigma']:>12} {n:>5} {_fmt(r['sisdr_db'], '10.3f')} {_fmt(r['stoi'], '8.4f')} "
                     f"{_fmt(r['snr_db'], '10.3f')}")
    return "\n".join(lines)


def evaluate(model: SpxModel, manifest, sigmas, jobs: int = 1) -> MetricsReport:
    entries = read_manifest(manifest)
    usable = []
    for e in entries:
        if e.target_path is None or not Path(e.target_path).exists():
            warnings.warn(f"{e.id}: no clean reference; skipped", stacklevel=2)
        else:
            usable.append(e)

    def one(e):
        mixture, clean, enrolment = load_wav(e.mixture_path), load_wav(e.target_path), load_wav(e.enrolment_path)
        est = _enhance(model, mixture, enrolment)
        rows = [_metric_row(e.id, s, clean, remix(est, mixture, alpha_for_sigma(est, mixture, s))) for s in sigmas]
        rows.append(_metric_row(e.id, UNPROCESSED, clean, mixture))
        return rows

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            per_utt = list(pool.map(one, usable))
    else:
        per_utt = [one(e) for e in usable]
    rows = [r for rs in per_utt for r in rs]
    order = [format_sigma(s) for s in sigmas] + [format_sigma(UNPROCESSED)]
    return MetricsReport(rows, aggregate(rows, order))


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.model)
    report = evaluate(model, args.manifest, args.sigmas, args.jobs)
    Path(args.report).write_text(report.to_jsonl(), encoding="utf-8")
    print(format_table(report.aggregates))
    return EXIT_OK


# -- train --------------------------------------------------------------------------

TRAIN_REQUIRED = ("model", "loss")


def _model_config(m) -> SpxConfig:
    if m == "tiny":
        return TINY_CONFIG
    if m == "default":
        return SpxConfig()
    if isinstance(m, dict):
        return SpxConfig.from_dict(m)
    raise ConfigurationError("config field 'model' must be 'tiny', 'default' or an object")


def parse_train_config(data: dict) -> tuple[SpxConfig, LossSpec, TrainConfig]:
    """Validate a training config object.

    ``model`` is ``"tiny"``, ``"default"`` or an object of model fields;
    ``loss`` is ``"sisdr_only"`` or ``"sisdr_plus_stoi"``. Optional:
    ``stoi_weight`` and any TrainConfig field.
    """
    for key in TRAIN_REQUIRED:
        if key not in data:
            raise ConfigurationError(f"config is missing required field '{key}'")
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - set(TRAIN_REQUIRED) - train_keys - {"stoi_weight"}
    if unknown:
        raise ConfigurationError(f"config has unknown field(s): {', '.join(sorted(unknown))}")
    cfg = _model_config(data["model"])
    loss = LossSpec(data["loss"], float(data.get("stoi_weight", 1.0)))
    return cfg, loss, TrainConfig(**{k: data[k] for k in train_keys if k in data})


def cmd_train(args) -> int:
    cfg, loss, tcfg = parse_train_config(_read_json(args.config, "config"))
    if args.seed is not None:
        tcfg = TrainConfig(**{**tcfg.__dict__, "seed": args.seed})
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    if log_path.exists():
        log_path.unlink()
    model = SpxModel(cfg, seed=tcfg.seed)
    model, history = train(model, args.train, args.cv, loss, tcfg, log_path)
    save_checkpoint(model, args.out, meta={"loss": loss.kind, "epochs": len(history),
                                           "final_cv_loss": history[-1].cv_loss})
    return EXIT_OK


# -- synth --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    data = _read_json(args.recipe, "recipe") if args.recipe else {}
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        recipe = MixtureRecipe.from_dict(data)
    except TypeError as exc:
        raise ConfigurationError(f"recipe: {exc}") from exc
    out_dir = Path(args.out_dir)
    records = build_manifest(args.clean_dir, args.noise_dir, recipe, out_dir, jobs=args.jobs)
    print(f"wrote {len(records)} mixtures to {out_dir / MANIFEST_NAME}")
    if args.verify:
        worst = 0.0
        for uid, want, got in verify_manifest(out_dir / MANIFEST_NAME):
            worst = max(worst, abs(want - got))
            if abs(want - got) > SNR_VERIFY_TOL_DB:
                print(f"{uid}: manifest {want:.9f} dB, measured {got:.9f} dB", file=sys.stderr)
        print(f"max SNR deviation {worst:.3e} dB")
        if worst > SNR_VERIFY_TOL_DB:
            raise NumericalError(f"SNR verification failed (tolerance {SNR_VERIFY_TOL_DB} dB)")
    return EXIT_OK


# -- grad-check ---------------------------------------------------------------------

def cmd_grad_check(args) -> int:
    cfg = TINY_CONFIG
    if args.config:
        # a training config (with a "model" field) or a bare object of model fields
        data = _read_json(args.config, "model config")
        cfg = _model_config(data.get("model", data))
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    rate = 16000
    target = AudioSignal(0.5 * rng.standard_normal(args.samples), rate)
    mixture = target.with_samples(target.samples + 0.5 * rng.standard_normal(args.samples))
    enrolment = AudioSignal(0.5 * rng.standard_normal(args.samples), rate)
    model = SpxModel(cfg, seed=seed)
    failed = False
    for kind in args.loss:
        report = grad_check(model, mixture, enrolment, target, LossSpec(kind), per_tensor=args.per_tensor, seed=seed)
        print(report.format())
        failed |= not report.passed(args.tol)
    if failed:
        raise NumericalError(f"gradient check failed (tolerance {args.tol:g})")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spxremix", description="Target speaker extraction with speaker reinforcement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("enhance", help="extract the target speaker and remix with the mixture")
    e.add_argument("--model", required=True)
    e.add_argument("--mixture", required=True)
    e.add_argument("--enrolment", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--sigma", type=_sigma_arg, default=0.0, help="remix ratio in dB, or 'inf' (default 0)")
    e.set_defaults(func=cmd_enhance)

    r = sub.add_parser("remix", help="remix an already enhanced signal with its mixture")
    r.add_argument("--enhanced", required=True)
    r.add_argument("--mixture", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--sigma", type=_sigma_arg, default=0.0)
    r.set_defaults(func=cmd_remix)

    default_sigmas = ",".join(format_sigma(s) for s in DEFAULT_SIGMAS)
    s = sub.add_parser("sweep", help="write one remixed output per sigma")
    s.add_argument("--model", required=True)
    s.add_argument("--mixture", required=True)
    s.add_argument("--enrolment", required=True)
    s.add_argument("--target", help="clean reference; prints a metrics table when given")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sigmas", type=_sigmas_arg, default=list(DEFAULT_SIGMAS), help=f"default {default_sigmas}")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("evaluate", help="score a manifest over a sigma grid")
    v.add_argument("--manifest", required=True)
    v.add_argument("--model", required=True)
    v.add_argument("--report", required=True, help="JSON-lines report path")
    v.add_argument("--sigmas", type=_sigmas_arg, default=list(DEFAULT_SIGMAS), help=f"default {default_sigmas}")
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_evaluate)

    t = sub.add_parser("train", help="train a model from manifests")
    t.add_argument("--train", required=True, help="training manifest")
    t.add_argument("--cv", required=True, help="cross-validation manifest")
    t.add_argument("--config", required=True, help="JSON training config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="epoch log (default: <out>.log.jsonl)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    y = sub.add_parser("synth", help="generate a noisy mixture corpus")
    y.add_argument("--clean-dir", required=True)
    y.add_argument("--noise-dir", required=True)
    y.add_argument("--recipe", help="JSON recipe (snr_range_db, length_range_s, seed, num_utterances, encoding)")
    y.add_argument("--out-dir", required=True)
    y.add_argument("--seed", type=int)
    y.add_argument("--jobs", type=int, default=1)
    y.add_argument("--verify", action="store_true", help="re-measure every mixture's SNR after writing")
    y.set_defaults(func=cmd_synth)

    g = sub.add_parser("grad-check", help="finite-difference gradient check on random inputs")
    g.add_argument("--config", help="JSON model config (default: tiny)")
    g.add_argument("--loss", nargs="+", choices=("sisdr_only", "sisdr_plus_stoi"),
                   default=["sisdr_only", "sisdr_plus_stoi"])
    g.add_argument("--samples", type=int, default=6400)
    g.add_argument("--per-tensor", type=int, default=50)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for name in ("jobs",):
        if getattr(args, name, 1) < 1:
            parser.error(f"--{name} must be >= 1")
    try:
        return args.func(args)
    except SpxError as exc:
        print(f"spxremix {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"spxremix {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command line interface: ``gtfnmf <verb> [options]``.

Verbs: simulate, analyze, denoise, inpaint, separate, train, bench.  Every
option can also be given in a ``--config`` file (key = value, one section per
verb plus an optional ``[common]`` section; keys use the long option names
with dashes or underscores).  Command line flags win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tasks
from .audio import AudioBuffer, export_csv, read_mask_csv, read_wav, write_wav
from .ep import EpConfig
from .exceptions import ConfigurationError, GTFError
from .learning import HyperParams

logger = logging.getLogger("gtfnmf")

VERBS = ("simulate", "analyze", "denoise", "inpaint", "separate", "train", "bench")

# (flag, type, default, help); defaults are applied after config merging
COMMON = [
    ("backend", str, "ep", "inference backend: ep, ekf or ihgp"),
    ("iters", int, 20, "EP / EKF iterations"),
    ("eta", float, 0.75, "power EP exponent in (0, 1]"),
    ("damping", float, 0.1, "site damping in (0, 1]"),
    ("seed", int, 0, "random seed"),
    ("out_dir", str, ".", "output directory"),
]
VERB_OPTS = {
    "simulate": [("preset", str, "sim", "sim (D=5, N=2) or harmonic"),
                 ("model", str, None, "hyperparameter JSON (overrides preset)"),
                 ("length", int, 5000, "number of samples"),
                 ("noise_var", float, None, "observation noise variance")],
    "analyze": [("model", str, None, "hyperparameter JSON; trained on the input when absent"),
                ("mask", str, None, "CSV of missing (start_sample, end_sample) ranges"),
                ("subbands", int, 16, "D when training on the fly"),
                ("modulators", int, 3, "N when training on the fly")],
    "denoise": [("model", str, None, "hyperparameter JSON; trained on the input when absent"),
                ("noise_var", float, None, "noise variance in input units (required)"),
                ("clean", str, None, "clean reference WAV for metrics"),
                ("subbands", int, 16, "D when training on the fly"),
                ("modulators", int, 3, "N when training on the fly")],
    "inpaint": [("model", str, None, "hyperparameter JSON; trained on observed samples when absent"),
                ("mask", str, None, "CSV of missing (start_sample, end_sample) ranges (required)"),
                ("clean", str, None, "clean reference WAV for metrics"),
                ("subbands", int, 16, "D when training on the fly"),
                ("modulators", int, 3, "N when training on the fly")],
    "separate": [("source", str, None, "comma-separated hyperparameter JSON files, one per source"),
                 ("reference", str, None, "comma-separated reference WAVs, one per source"),
                 ("noise_var", float, None, "noise variance in input units"),
                 ("state_cap", int, tasks.DEFAULT_STATE_CAP, "largest state dimension for ep/ekf")],
    "train": [("subbands", int, 16, "number of subbands D"),
              ("modulators", int, 3, "number of modulators N"),
              ("noise_var", float, None, "noise variance in input units"),
              ("optimize", str, "false", "tune hyperparameters on the ADF evidence (true/false)"),
              ("free", str, "noise_var", "comma-separated parameter groups to tune"),
              ("max_evals", int, 100, "optimizer evaluation budget"),
              ("spacing", str, "mel", "initial centre-frequency spacing: mel or linear")],
    "bench": [("which", str, "all", "sim, missing or all"),
              ("length", int, None, "samples per signal (default 5000 sim, 4000 missing)"),
              ("seeds", str, "11,12,13,14", "comma-separated seeds for the missing-data signals")],
}
INPUT_VERBS = ("analyze", "denoise", "inpaint", "separate", "train")
# common options whose default differs for one verb
VERB_DEFAULTS = {"separate": {"backend": "ihgp"}}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtfnmf", description="Gaussian time-frequency NMF audio models")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb)
        if verb in INPUT_VERBS:
            sp.add_argument("input", help="16-bit PCM mono WAV")
        sp.add_argument("--config", help="key = value configuration file")
        for name, typ, _, hlp in COMMON + VERB_OPTS[verb]:
            kw = {"choices": tasks.BACKENDS} if name == "backend" else {}
            shown = VERB_DEFAULTS.get(verb, {}).get(name, _default(name, verb))
            if shown is not None:
                hlp = f"{hlp} (default {shown})"
            sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=hlp, **kw)
    return p


def _default(name, verb):
    for n, _, d, _ in COMMON + VERB_OPTS[verb]:
        if n == name:
            return d
    return None


def resolve(args) -> dict:
    """Merge defaults, config file and flags (in increasing priority)."""
    opts = COMMON + VERB_OPTS[args.verb]
    values = {name: default for name, _, default, _ in opts}
    values.update(VERB_DEFAULTS.get(args.verb, {}))
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config, encoding="utf-8"):
            raise ConfigurationError(f"cannot read config file {args.config}")
        types = {name: typ for name, typ, _, _ in opts}
        for section in ("common", args.verb):
            if not cp.has_section(section):
                continue
            for key, raw in cp.items(section):
                name = key.replace("-", "_")
                if name not in types:
                    raise ConfigurationError(f"{args.config}: unknown key {key!r} in [{section}]")
                try:
                    values[name] = types[name](raw)
                except ValueError:
                    raise ConfigurationError(f"{args.config}: bad value for {key}: {raw!r}") from None
    for name, *_ in opts:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if values["backend"] not in tasks.BACKENDS:
        raise ConfigurationError(f"backend must be one of {tasks.BACKENDS}")
    return values


def _cfg(o) -> EpConfig:
    return EpConfig(power=o["eta"], damping=o["damping"], iterations=o["iters"])


def _bool(s) -> bool:
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {s!r}")


def _load_input(path):
    """Read and normalise; returns (buffer, normalised buffer)."""
    raw = read_wav(path)
    return raw, raw.normalized()


def _load_model(path, buf: AudioBuffer) -> HyperParams:
    hp = HyperParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    if abs(1.0 / hp.dt - buf.sample_rate) > 1e-6 * buf.sample_rate:
        logger.warning("model sample rate %.6g Hz differs from the input's %.6g Hz", 1.0 / hp.dt, buf.sample_rate)
    return hp


def _model_or_train(o, buf, noise_var=None):
    if o.get("model"):
        hp = _load_model(o["model"], buf)
        return hp if noise_var is None else _replace_noise(hp, noise_var)
    hp, _ = tasks.initialize(buf.samples, o["subbands"], o["modulators"], buf.sample_rate,
                             noise_var=noise_var, seed=o["seed"])
    return hp


def _replace_noise(hp, noise_var):
    d = hp.to_dict()
    d["noise_var"] = float(noise_var)
    return HyperParams.from_dict(d)


def _save_model(path, hp):
    Path(path).write_text(json.dumps(hp.to_dict(), indent=1), encoding="utf-8")


def _finish(report, out: Path, o, extra=None):
    report.settings.update({k: o[k] for k in ("iters", "eta", "damping", "seed")})
    if extra:
        report.settings.update(extra)
    path = out / f"{report.task}_report.txt"
    report.outputs.append(str(path))
    report.write(path)
    print(report.to_text(), end="")
    return report


def cmd_simulate(o, out):
    if o["model"]:
        spec = HyperParams.from_dict(json.loads(Path(o["model"]).read_text(encoding="utf-8"))).to_spec()
    elif o["preset"] == "sim":
        spec = tasks.sim_preset()
    elif o["preset"] == "harmonic":
        spec = tasks.harmonic_preset()
    else:
        raise ConfigurationError(f"unknown preset {o['preset']!r}")
    if o["noise_var"] is not None:
        spec = spec.with_noise(o["noise_var"])
    _, report = tasks.task_simulate(spec, o["length"], o["seed"], out)
    _save_model(out / "sim_model.json", HyperParams.from_spec(spec))
    report.outputs.append(str(out / "sim_model.json"))
    return _finish(report, out, o)


def cmd_analyze(o, out, args):
    raw, buf = _load_input(args.input)
    mask = read_mask_csv(o["mask"], len(buf)) if o["mask"] else None
    hp = _model_or_train(o, buf)
    _, report = tasks.task_analyze(buf.samples, hp.to_spec(), o["backend"], _cfg(o), mask, out)
    return _finish(report, out, o, {"input_scale": buf.scale})


def cmd_denoise(o, out, args):
    raw, buf = _load_input(args.input)
    if o["noise_var"] is None:
        raise ConfigurationError("denoise needs --noise-var")
    nv = o["noise_var"] * buf.scale**2
    hp = _model_or_train(o, buf, nv)
    clean = read_wav(o["clean"]).samples * buf.scale if o["clean"] else None
    est, report = tasks.task_denoise(buf.samples, hp.to_spec(), nv, o["backend"], _cfg(o), clean)
    est = est / buf.scale
    write_wav(out / "denoised.wav", est, buf.sample_rate)
    export_csv(out / "denoised.csv", {"input": raw.samples, "denoised": est})
    report.outputs += [str(out / "denoised.wav"), str(out / "denoised.csv")]
    return _finish(report, out, o, {"input_scale": buf.scale})


def cmd_inpaint(o, out, args):
    raw, buf = _load_input(args.input)
    if not o["mask"]:
        raise ConfigurationError("inpaint needs --mask")
    mask = read_mask_csv(o["mask"], len(buf))
    if o["model"]:
        hp = _load_model(o["model"], buf)
    else:
        hp, _ = tasks.initialize(buf.samples[mask], o["subbands"], o["modulators"], buf.sample_rate, seed=o["seed"])
    clean = read_wav(o["clean"]).samples * buf.scale if o["clean"] else None
    res, report = tasks.task_inpaint(buf.samples, mask, hp.to_spec(), o["backend"], _cfg(o), clean)
    s = buf.scale
    filled = np.where(mask, raw.samples, res.mean / s)
    write_wav(out / "inpainted.wav", filled, buf.sample_rate)
    export_csv(out / "inpainted.csv", {"observed": mask.astype(float), "input": raw.samples,
                                       "mean": res.mean / s, "lower": res.lower / s, "upper": res.upper / s})
    report.outputs += [str(out / "inpainted.wav"), str(out / "inpainted.csv")]
    return _finish(report, out, o, {"input_scale": s})


def cmd_separate(o, out, args):
    raw, buf = _load_input(args.input)
    if not o["source"]:
        raise ConfigurationError("separate needs --source model1.json,model2.json,...")
    sources = [_load_model(p, buf) for p in o["source"].split(",")]
    refs = None
    if o["reference"]:
        refs = [read_wav(p).samples * buf.scale for p in o["reference"].split(",")]
    nv = None if o["noise_var"] is None else o["noise_var"] * buf.scale**2
    outs, report = tasks.task_separate(buf.samples, sources, nv, o["backend"], _cfg(o), o["state_cap"], refs)
    cols = {}
    for i, sig in enumerate(outs):
        path = out / f"source{i + 1}.wav"
        write_wav(path, sig / buf.scale, buf.sample_rate)
        report.outputs.append(str(path))
        cols[f"source{i + 1}"] = sig / buf.scale
    export_csv(out / "sources.csv", cols)
    report.outputs.append(str(out / "sources.csv"))
    return _finish(report, out, o, {"input_scale": buf.scale})


def cmd_train(o, out, args):
    raw, buf = _load_input(args.input)
    nv = None if o["noise_var"] is None else o["noise_var"] * buf.scale**2
    hp, report = tasks.task_train(buf.samples, o["subbands"], o["modulators"], buf.sample_rate, nv,
                                  _bool(o["optimize"]), tuple(o["free"].split(",")), o["max_evals"],
                                  _cfg(o), o["seed"], o["spacing"])
    _save_model(out / "model.json", hp)
    report.outputs.append(str(out / "model.json"))
    return _finish(report, out, o, {"input_scale": buf.scale})


def cmd_bench(o, out):
    cfg = _cfg(o)
    sim = missing = None
    if o["which"] in ("sim", "all"):
        sim = tasks.bench_sim(T=o["length"] or 5000, cfg=cfg)
    if o["which"] in ("missing", "all"):
        seeds = tuple(int(s) for s in o["seeds"].split(","))
        missing = tasks.bench_missing(T=o["length"] or 4000, seeds=seeds, cfg=cfg)
    if sim is None and missing is None:
        raise ConfigurationError("--which must be sim, missing or all")
    table = tasks.bench_table(sim, missing)
    (out / "bench_table.txt").write_text(table, encoding="utf-8")
    report = tasks.RunReport("bench")
    for label, d in (("sim_rmse", sim), ("missing_gap_snr_db", missing)):
        for k, v in (d or {}).items():
            report.metrics[f"{label}_{k}"] = v
    report.outputs.append(str(out / "bench_table.txt"))
    print(table, end="")
    return _finish(report, out, o)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        o = resolve(args)
        out = Path(o["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "simulate":
            cmd_simulate(o, out)
        elif args.verb == "bench":
            cmd_bench(o, out)
        else:
            globals()[f"cmd_{args.verb}"](o, out, args)
    except GTFError as exc:
        print(f"gtfnmf {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"gtfnmf {args.verb}: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

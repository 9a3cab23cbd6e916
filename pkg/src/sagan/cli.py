"""Command-line entry point: ``sagan {train,adapt,eval,gradcheck,synth}``.

Runs are configured by a flat ``key = value`` text file plus ``--key value``
overrides. Every run directory receives the fully resolved configuration and
its hash, and is never silently reused.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

from . import geometry as geo
from .data import DataError, SyntheticDomainSpec, export_pair, load_reid_dir, save_image, synth_pair
from .losses import LossError, LossWeights
from .networks import ModelConfig
from .training import CheckpointError, NumericalAbort, TrainConfig, adapt, models_from_checkpoint, train

log = logging.getLogger("sagan")

RUN_ROOT_ENV = "SAGAN_RUN_ROOT"
CONFIG_NAME = "config.txt"
HASH_NAME = "config.sha256"

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

class UsageError(Exception):
    pass

# --- flat configuration -------------------------------------------------------

def _defaults() -> Dict[str, object]:
    tc, mc, wts, sd = TrainConfig(), ModelConfig(), LossWeights(), SyntheticDomainSpec()
    d: Dict[str, object] = {"run_name": "run"}
    for f in fields(TrainConfig):
        if f.name not in ("weights", "model", "betas"):
            d[f.name] = getattr(tc, f.name)
    d["beta1"], d["beta2"] = tc.betas
    for f in fields(LossWeights):
        d[f.name] = getattr(wts, f.name)
    for f in fields(ModelConfig):
        if f.name != "size":
            d[f.name] = getattr(mc, f.name)
    d["height"], d["width"] = mc.size
    d.update({
        "data_x": "", "data_y": "",
        "synth_seed": sd.seed, "synth_family": sd.gt_transform_family,
        "synth_rotation_deg": sd.rotation_deg, "synth_perspective": sd.perspective,
        "synth_translation": sd.translation, "synth_base_min_frac": sd.base_min_frac,
        "synth_jitter_frac": sd.jitter_frac, "synth_gain_min": sd.gain_range[0], "synth_gain_max": sd.gain_range[1],
        "synth_bias_min": sd.bias_range[0], "synth_bias_max": sd.bias_range[1], "synth_color_shift": sd.color_shift,
        "synth_noise_std": sd.noise_std, "synth_identities": sd.n_identities, "synth_views": sd.n_views,
        "eval_M": 10, "embed_steps": 300, "embed_lr": 2e-3, "embed_batch_size": 64, "sweep_M": "",
    })
    return d

DEFAULTS = _defaults()

def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw

def parse_config_text(text: str) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out

def format_config(cfg: Dict[str, object]) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"

def config_hash(cfg: Dict[str, object]) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()

def parse_overrides(tokens: List[str]) -> Dict[str, object]:
    out: Dict[str, object] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or i + 1 >= len(tokens):
            raise UsageError(f"expected '--key value', got {tok!r}")
        key = tok[2:].replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = _coerce(key, tokens[i + 1])
        i += 2
    return out

def resolve_config(config_path: Optional[str], overrides: List[str]) -> Dict[str, object]:
    cfg = dict(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg.update(parse_config_text(path.read_text()))
    cfg.update(parse_overrides(overrides))
    return cfg

def train_config(cfg: Dict[str, object]) -> TrainConfig:
    model = ModelConfig(**{f.name: cfg[f.name] for f in fields(ModelConfig) if f.name != "size"},
                        size=(cfg["height"], cfg["width"]))
    weights = LossWeights(**{f.name: cfg[f.name] for f in fields(LossWeights)})
    kw = {f.name: cfg[f.name] for f in fields(TrainConfig) if f.name not in ("weights", "model", "betas")}
    return TrainConfig(**kw, betas=(cfg["beta1"], cfg["beta2"]), weights=weights, model=model)

def synth_spec(cfg: Dict[str, object]) -> SyntheticDomainSpec:
    return SyntheticDomainSpec(
        gt_transform_family=cfg["synth_family"], rotation_deg=cfg["synth_rotation_deg"],
        perspective=cfg["synth_perspective"], translation=cfg["synth_translation"],
        base_min_frac=cfg["synth_base_min_frac"], jitter_frac=cfg["synth_jitter_frac"],
        gain_range=(cfg["synth_gain_min"], cfg["synth_gain_max"]),
        bias_range=(cfg["synth_bias_min"], cfg["synth_bias_max"]), color_shift=cfg["synth_color_shift"],
        noise_std=cfg["synth_noise_std"], n_identities=cfg["synth_identities"], n_views=cfg["synth_views"],
        size=(cfg["height"], cfg["width"]), channels=cfg["channels"], seed=cfg["synth_seed"],
    )

def load_domains(cfg: Dict[str, object]):
    """(x, y, synthetic pair or None) from data directories, or synthetic data when none are given."""
    if bool(cfg["data_x"]) != bool(cfg["data_y"]):
        raise UsageError("data_x and data_y must be given together")
    if cfg["data_x"]:
        size = (cfg["height"], cfg["width"])
        x = load_reid_dir(cfg["data_x"], size).batch
        y = load_reid_dir(cfg["data_y"], size).batch
        return x, y, None
    pair = synth_pair(synth_spec(cfg))
    return pair.x, pair.y, pair

# --- run directories ---------------------------------------------------------

def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))

def prepare_run_dir(cfg: Dict[str, object], overwrite: bool) -> Path:
    run_dir = run_root() / str(cfg["run_name"])
    if run_dir.exists():
        if not overwrite:
            raise UsageError(f"run directory {run_dir} exists; pass --overwrite to replace it")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    (run_dir / CONFIG_NAME).write_text(format_config(cfg))
    (run_dir / HASH_NAME).write_text(config_hash(cfg) + "\n")
    return run_dir

# --- commands ----------------------------------------------------------------

def cmd_train(args, extra: List[str]) -> int:
    cfg = resolve_config(args.config, extra)
    try:
        tcfg = train_config(cfg)
    except (ValueError, LossError) as exc:
        raise UsageError(str(exc)) from None
    x, y, pair = load_domains(cfg)
    if args.resume:
        run_dir = run_root() / str(cfg["run_name"])
        stored = run_dir / HASH_NAME
        if not stored.is_file() or stored.read_text().strip() != config_hash(cfg):
            raise UsageError(f"cannot resume: {run_dir} was created with a different configuration")
    else:
        run_dir = prepare_run_dir(cfg, args.overwrite)
    eval_fn = None
    if pair is not None:
        from .evaluation import homography_recovery_eval

        def eval_fn(models):
            return homography_recovery_eval(models, pair.x, pair.gt)
    train(tcfg, x, y, run_dir=run_dir, eval_fn=eval_fn, resume=args.resume)
    print(run_dir)
    return EXIT_OK

def cmd_adapt(args, extra: List[str]) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    if args.M < 1:
        raise UsageError("--M must be >= 1")
    models, tcfg = models_from_checkpoint(args.checkpoint)
    ds = load_reid_dir(args.input_dir, tcfg.model.size, labelled=False)
    out = Path(args.out_dir)
    targets = [out / f"{name}_m{k}.png" for name in ds.names for k in range(1, args.M + 1)]
    clash = [t for t in targets if t.exists()]
    if clash and not args.overwrite:
        raise UsageError(f"{clash[0]} exists; pass --overwrite to replace outputs")
    out.mkdir(parents=True, exist_ok=True)
    outs = adapt(models, ds.batch, args.M, args.seed)
    for k, batch in enumerate(outs, 1):
        for i, name in enumerate(ds.names):
            save_image(batch.values[i], out / f"{name}_m{k}.png")
    print(f"wrote {len(targets)} images to {out}")
    return EXIT_OK

def cmd_eval(args, extra: List[str]) -> int:
    from .evaluation import (EmbedderConfig, homography_recovery_eval, m_sweep, plot_sweep,
                             retrieval_with_adaptation, write_table)

    cfg = resolve_config(args.config, extra)
    models, tcfg = models_from_checkpoint(args.checkpoint)
    cfg["height"], cfg["width"] = tcfg.model.size
    x, y, pair = load_domains(cfg)
    if pair is None:
        from .data import SyntheticPair

        pair = SyntheticPair(x, y, None, None, None, None, None)
    run_dir = prepare_run_dir(cfg, args.overwrite)
    ecfg = EmbedderConfig(steps=cfg["embed_steps"], batch_size=cfg["embed_batch_size"], lr=cfg["embed_lr"],
                          seed=cfg["seed"])
    seed, M = cfg["seed"], cfg["eval_M"]
    base = retrieval_with_adaptation(None, pair, 1, seed, ecfg)
    adapted = retrieval_with_adaptation(models, pair, M, seed, ecfg)
    rows = [base.row("source only"), adapted.row(f"adapted (M={M})")]
    write_table(rows, run_dir / "metrics.csv")
    for r in rows:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    if pair.gt is not None:
        rec = homography_recovery_eval(models, pair.x, pair.gt, seed)
        untrained = float(geo.corner_error(geo.Transform(pair.gt.kind, geo.identity_params(pair.gt.kind)
                                                           .expand_as(pair.gt.params)), pair.gt, pair.x.size).mean())
        rec_rows = [{"Method": "identity", "corner_mean": untrained},
                    {"Method": "S1", "corner_mean": rec["corner_mean"], "corner_median": rec["corner_median"]}]
        write_table(rec_rows, run_dir / "recovery.csv", ("Method", "corner_mean", "corner_median"))
        print(f"corner error: identity={untrained:.3f}px S1={rec['corner_mean']:.3f}px")
    if cfg["sweep_M"]:
        try:
            Ms = [int(v) for v in str(cfg["sweep_M"]).split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"sweep_M must be a comma-separated list of integers, got {cfg['sweep_M']!r}") from None
        sweep, rho = m_sweep(models, [pair], Ms, seed, ecfg)
        write_table(sweep, run_dir / "m_sweep.csv", ("M", "R-1", "mAP"))
        plot_sweep(sweep, run_dir / "m_sweep.png")
        print(f"M sweep Spearman rho = {rho:.3f}")
    print(run_dir)
    return EXIT_OK

def cmd_gradcheck(args, extra: List[str]) -> int:
    from .gradcheck import format_report, run_checks

    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    results = run_checks(args.seed, args.tol)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC

def cmd_synth(args, extra: List[str]) -> int:
    cfg = resolve_config(args.config, extra)
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise UsageError(f"{out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    try:
        spec = synth_spec(cfg)
    except DataError as exc:
        raise UsageError(str(exc)) from None
    export_pair(synth_pair(spec), out)
    (out / CONFIG_NAME).write_text(format_config(cfg))
    print(out)
    return EXIT_OK

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sagan", allow_abbrev=False, description="Spatial + pixel unsupervised domain adaptation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", allow_abbrev=False, help="train a model; extra --key value pairs override the config")
    t.add_argument("config", help="flat key = value config file")
    t.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue a run from one of its checkpoints")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", allow_abbrev=False, help="write M adapted versions of every image in a directory")
    a.add_argument("checkpoint")
    a.add_argument("input_dir")
    a.add_argument("out_dir")
    a.add_argument("--M", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--overwrite", action="store_true")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", allow_abbrev=False, help="retrieval metrics (and corner error on synthetic data) for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="flat key = value config describing the evaluation data")
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", allow_abbrev=False, help="finite-difference gradient checks in double precision")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-3)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", allow_abbrev=False, help="write a synthetic domain pair with ground-truth transforms")
    s.add_argument("out_dir")
    s.add_argument("--config")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p

def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except UsageError as exc:
        print(f"sagan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"sagan {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalAbort as exc:
        print(f"sagan {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

if __name__ == "__main__":
    sys.exit(main())

"""Experiment runner CLI: synth / train / eval / trace / report.

A run is fully determined by a flat key-value config (JSON file plus
command-line overrides) and a master seed. Every subcommand is
deterministic given those inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import statistics
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as dat
from . import metrics as diag
from .model import VaeModel
from .nn import default_init_spec, offset_init_spec
from .training import (MODES, AnnealSchedule, RngStreams, TrainConfig,
                       TrainState, make_optimizer, train)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    mode: str = "basic"
    beta: float = 1.0
    anneal_start: float = 0.1
    anneal_end: float = 1.0
    anneal_span: int = 10
    anneal_unit: str = "epochs"
    inner_patience: int = 10
    inner_budget: int | None = None
    inner_max: int = 100
    encoder_lr: float = 0.01
    decoder_lr: float = 1.0
    optimizer: str = "sgd"
    encoder_optimizer: str = "adam"
    lr_decay_factor: float = 2.0
    lr_decay_patience: int = 2
    lr_max_decays: int = 5
    clip_norm: float | None = 5.0
    batch_size: int = 32
    max_epochs: int = 60
    seed: int = 0
    monitor_iw_samples: int = 50
    monitor_iw_every: int = 1
    mi_samples_per_x: int = 1
    checkpoint_every: int = 1
    # model
    latent_dim: int = 1
    hidden_size: int = 50
    embed_dim: int = 50
    init: str = "default"  # or "offset"
    dropout: float = 0.5
    # data (synth subcommand)
    preset: str = "small"  # or "full"
    vocab_size: int | None = None
    seq_length: int | None = None
    data_seed: int = 0
    # evaluation
    eval_iw_samples: int = 500
    eval_repeats: int = 1
    snapshot_points: int = 500
    grid_low: float = -20.0
    grid_high: float = 20.0
    grid_stride: float = 0.01


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def load_run_config(path: Path | None = None,
                    overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a flat object")
        values.update(raw)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**values)
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode '{cfg.mode}'; valid: {', '.join(MODES)}")
    if cfg.init not in ("default", "offset"):
        raise ConfigError(f"unknown init '{cfg.init}'")
    if cfg.preset not in ("small", "full"):
        raise ConfigError(f"unknown preset '{cfg.preset}'")
    return cfg


def train_config_of(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        mode=cfg.mode, beta=cfg.beta,
        anneal=AnnealSchedule(cfg.anneal_start, cfg.anneal_end,
                              cfg.anneal_span, cfg.anneal_unit),
        inner_patience=cfg.inner_patience, inner_budget=cfg.inner_budget,
        inner_max=cfg.inner_max,
        encoder_lr=cfg.encoder_lr, decoder_lr=cfg.decoder_lr,
        optimizer=cfg.optimizer, encoder_optimizer=cfg.encoder_optimizer,
        lr_decay_factor=cfg.lr_decay_factor,
        lr_decay_patience=cfg.lr_decay_patience,
        lr_max_decays=cfg.lr_max_decays, clip_norm=cfg.clip_norm,
        batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, seed=cfg.seed,
        monitor_iw_samples=cfg.monitor_iw_samples,
        monitor_iw_every=cfg.monitor_iw_every,
        mi_samples_per_x=cfg.mi_samples_per_x)


def build_model(cfg: RunConfig, vocab_size: int,
                rng: np.random.Generator) -> VaeModel:
    spec = default_init_spec() if cfg.init == "default" else offset_init_spec()
    return VaeModel(vocab_size=vocab_size, embed_dim=cfg.embed_dim,
                    hidden_size=cfg.hidden_size, latent_dim=cfg.latent_dim,
                    spec=spec, rng=rng, dropout=cfg.dropout)


def grid_of(cfg: RunConfig) -> diag.RiemannGrid:
    return diag.RiemannGrid(cfg.grid_low, cfg.grid_high, cfg.grid_stride)


def default_out_root() -> Path:
    return Path(os.environ.get("SEQVAE_OUT", "runs"))


# -- synth ----------------------------------------------------------------


def synth_spec_of(cfg: RunConfig) -> dat.SyntheticSpec:
    spec = (dat.SyntheticSpec(seed=cfg.data_seed) if cfg.preset == "full"
            else dat.small_spec(seed=cfg.data_seed))
    if cfg.vocab_size is not None:
        spec.vocab_size = cfg.vocab_size
    if cfg.seq_length is not None:
        spec.length = cfg.seq_length
    return spec


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    spec = synth_spec_of(cfg)
    ds = dat.generate_synthetic(spec)
    out = Path(args.out)
    dat.save_dataset(ds, out, spec)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} examples to {out}")
    return 0


# -- train ----------------------------------------------------------------


def run_training(cfg: RunConfig, data_dir: Path, out_dir: Path,
                 resume: Path | None = None, quiet: bool = False) -> list:
    ds = dat.load_dataset(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_dict = {**asdict(cfg), "vocab_size_actual": ds.vocab_size}
    tconf = train_config_of(cfg)

    rngs = RngStreams(cfg.seed)
    model = build_model(cfg, ds.vocab_size, rngs["init"])
    state = None
    history: list[diag.MetricsRecord] = []

    if resume is not None:
        header = ckpt.load_checkpoint(resume)
        if header["config_digest"] != ckpt.config_digest(config_dict):
            raise ConfigError(
                f"{resume}: config drift detected; checkpoint digest "
                f"{header['config_digest'][:12]} does not match this run")
        theta, phi, opt_t, opt_p = ckpt.split_arrays(header)
        _load_params(model.generator_parameters(), theta)
        _load_params(model.inference_parameters(), phi)
        rngs.load_state_dict(header["rng_states"])
        state = TrainState(**header["train_state"])
        history = [diag.MetricsRecord(**h) for h in header["history"]]
        resume_opts = (opt_t, opt_p)
    else:
        resume_opts = None

    opt_theta = make_optimizer(cfg.optimizer, cfg.decoder_lr)
    opt_phi = make_optimizer(cfg.encoder_optimizer, cfg.encoder_lr)

    run_records: list[diag.MetricsRecord] = []

    def on_epoch(st, mdl, record, streams):
        run_records.append(record)
        history_all = history + run_records
        if cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0:
            _save(out_dir / f"epoch_{st.epoch:04d}.ckpt", st, history_all)
        _save(out_dir / "last.ckpt", st, history_all)
        diag.write_metrics_csv(history_all, out_dir / "metrics.csv")

    def _save(path, st, history_all):
        ckpt.save_checkpoint(
            path, config_dict=config_dict, epoch=st.epoch,
            theta={k: v.data for k, v in model.generator_parameters().items()},
            phi={k: v.data for k, v in model.inference_parameters().items()},
            opt_theta_state=opt_theta.state_dict(),
            opt_phi_state=opt_phi.state_dict(),
            rng_states=rngs.state_dict(), train_state=st,
            history=[asdict(h) for h in history_all])

    trained_history: list[diag.MetricsRecord] = []

    if resume_opts is not None:
        opt_theta.load_state_dict(resume_opts[0], model.generator_parameters())
        opt_phi.load_state_dict(resume_opts[1], model.inference_parameters())

    try:
        _, trained_history = train(model, ds, tconf, rngs=rngs, state=state,
                                   optimizers=(opt_theta, opt_phi),
                                   on_epoch=on_epoch, quiet=quiet)
    except KeyboardInterrupt:
        print("interrupted; latest epoch checkpoint is in "
              f"{out_dir}", file=sys.stderr)
        return history + trained_history

    full = history + trained_history
    diag.write_metrics_csv(full, out_dir / "metrics.csv")
    return full


def _load_params(params: dict, arrays: dict) -> None:
    for name, p in params.items():
        if name not in arrays:
            raise ckpt.CheckpointError(f"checkpoint missing parameter '{name}'")
        if p.data.shape != arrays[name].shape:
            raise ckpt.CheckpointError(
                f"parameter '{name}' shape mismatch: "
                f"{p.data.shape} vs {arrays[name].shape}")
        p.data = arrays[name].copy()


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    data_dir = Path(args.data)
    if not (data_dir / "train.txt").exists():
        print(f"error: no dataset at {data_dir}", file=sys.stderr)
        return 2
    out_root = Path(args.out) if args.out else default_out_root()
    if args.seeds is not None:
        for seed in args.seeds:
            run_cfg = dataclasses.replace(cfg, seed=seed)
            run_dir = out_root / f"seed{seed}"
            run_training(run_cfg, data_dir, run_dir,
                         quiet=args.quiet)
            print(f"seed {seed} done -> {run_dir}")
        return 0
    run_training(cfg, data_dir, out_root,
                 resume=Path(args.resume) if args.resume else None,
                 quiet=args.quiet)
    print(f"run complete -> {out_root}")
    return 0


# -- eval -----------------------------------------------------------------


def load_model_from_checkpoint(path: Path) -> tuple[VaeModel, RunConfig, dict]:
    header = ckpt.load_checkpoint(path)
    raw_cfg = dict(header["config"])
    vocab = raw_cfg.pop("vocab_size_actual")
    cfg = RunConfig(**raw_cfg)
    model = build_model(cfg, vocab, np.random.default_rng(0))
    theta, phi, _, _ = ckpt.split_arrays(header)
    _load_params(model.generator_parameters(), theta)
    _load_params(model.inference_parameters(), phi)
    return model, cfg, header


def evaluate_model(model: VaeModel, split: np.ndarray, cfg: RunConfig,
                   seed: int) -> dict:
    rng = np.random.default_rng(seed)
    neg_elbo, kl = diag.validation_elbo(model, split, rng)
    mi, agg_kl = diag.mutual_info(model, split, cfg.mi_samples_per_x, rng)
    au, _ = diag.active_units(model, split)
    iw = diag.iw_nll(model, split, cfg.eval_iw_samples, rng)
    return {"iw_nll": iw, "neg_elbo": neg_elbo, "kl": kl,
            "mi": mi, "agg_kl": agg_kl, "au": au}


def cmd_eval(args) -> int:
    model, cfg, header = load_model_from_checkpoint(Path(args.checkpoint))
    ds = dat.load_dataset(Path(args.data))
    if ds.vocab_size != header["config"]["vocab_size_actual"]:
        print("error: checkpoint/dataset vocabulary mismatch", file=sys.stderr)
        return 2
    split = ds.split(args.split)
    repeats = args.repeat or cfg.eval_repeats
    base_seed = args.seed if args.seed is not None else cfg.seed
    reports = [evaluate_model(model, split, cfg, base_seed + i)
               for i in range(repeats)]
    summary: dict = {"split": args.split, "repeats": repeats}
    for key in ("iw_nll", "neg_elbo", "kl", "mi", "agg_kl", "au"):
        vals = [r[key] for r in reports]
        summary[key] = vals[0] if repeats == 1 else statistics.fmean(vals)
        if repeats > 1:
            summary[f"{key}_variance"] = statistics.pvariance(vals)
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2))
    return 0


# -- trace ----------------------------------------------------------------


def cmd_trace(args) -> int:
    ds = dat.load_dataset(Path(args.data))
    out_dir = Path(args.out) if args.out else default_out_root() / "trace"
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.checkpoints:
        path = Path(path)
        if not path.exists():
            print(f"error: missing checkpoint {path}", file=sys.stderr)
            return 2
    for path in args.checkpoints:
        path = Path(path)
        model, cfg, _ = load_model_from_checkpoint(path)
        if model.latent_dim != 1:
            print(f"error: {path}: posterior-mean tracing needs a scalar "
                  "latent", file=sys.stderr)
            return 2
        grid = grid_of(cfg)
        points = diag.mean_space_snapshot(model, ds.val, grid,
                                          max_points=cfg.snapshot_points)
        label = path.stem
        diag.write_snapshot_csv(points, out_dir / f"snapshot_{label}.csv")
        diag.write_scatter_svg([(p.mu_model, p.mu_inference) for p in points],
                               out_dir / f"snapshot_{label}.svg")
        print(f"snapshot {label}: {len(points)} points")
    return 0


# -- report ---------------------------------------------------------------


def cmd_report(args) -> int:
    """Aggregate final metrics across run directories into NLL-vs-AU files."""
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir) / "metrics.csv"
        if not path.exists():
            print(f"error: no metrics.csv in {run_dir}", file=sys.stderr)
            return 2
        history = diag.load_metrics_csv(path)
        last = history[-1]
        rows.append((str(run_dir), last.iw_nll, last.au, last.mi, last.kl))
    out_dir = Path(args.out) if args.out else default_out_root() / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    import csv as _csv
    with (out_dir / "nll_vs_au.csv").open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(("run", "iw_nll", "au", "mi", "kl"))
        writer.writerows(rows)
    diag.write_scatter_svg([(r[2], r[1]) for r in rows],
                           out_dir / "nll_vs_au.svg",
                           xlabel="active units", ylabel="iw_nll",
                           diagonal=False)
    print(f"aggregated {len(rows)} runs -> {out_dir}")
    return 0


# -- argument plumbing ----------------------------------------------------


def _overrides(args) -> dict:
    keys = ("mode", "seed", "preset", "max_epochs", "latent_dim",
            "batch_size", "beta", "data_seed")
    return {k: getattr(args, k, None) for k in keys}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run-config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--beta", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqvae",
        description="Sequence VAE training and collapse diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _add_config_args(p)
    p.add_argument("--preset", choices=("small", "full"))
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seeds", type=int, nargs="+",
                   help="batch mode: one run directory per seed")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--repeat", type=int,
                   help="repeat evaluation over N seeds, report mean/variance")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="posterior-mean-space snapshots")
    p.add_argument("--checkpoints", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("report", help="aggregate metrics across runs")
    p.add_argument("--runs", required=True, nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ckpt.CheckpointError, dat.ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: dataset synthesis, training, evaluation, sampling,
gradient checking, and ablation sweeps.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric
abort. Configs are JSON documents with strict unknown-key rejection;
command-line flags override individual fields.
"""

import argparse
import csv
import dataclasses
import json
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, restore_params
from .data import (SequenceBatch, compute_norm_stats, gen_bimodal_walk,
                   gen_stroke_toy, normalize, read_swn, write_sidecar, write_swn)
from .errors import ConfigError, EmptyError, FormatError, NumericsError, TrainingAbort
from .model import ModelConfig, ablate, generate, init_params, param_count
from .objective import elbo_terms
from .rng import fold_seed
from .svg import render_svg
from .tensor import finite_diff_report
from .training import TrainConfig, evaluate, split_train_val, train

_MODEL_TYPES = {
    "layers": int,
    "stochastic_layers": int,
    "hidden_dim": int,
    "latent_total": int,
    "frame_dim": int,
    "min_log_var": float,
    "seed": int,
}
_TRAIN_TYPES = {
    "batch_size": int,
    "epochs": int,
    "lr_max": float,
    "lr_min": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "anneal_kind": str,
    "anneal_steps": int,
    "clip_norm": float,
    "val_fraction": float,
}
_TOP_TYPES = {"model": dict, "train": dict, "data": str, "out_csv": str,
              "out_checkpoint": str, "normalize": bool}

_MODEL_DEFAULTS = {"layers": 3, "stochastic_layers": 2, "hidden_dim": 32,
                   "latent_total": 8, "frame_dim": 1, "min_log_var": -14.0, "seed": 0}
_TRAIN_DEFAULTS = {"batch_size": 32, "epochs": 1, "lr_max": 1e-3, "lr_min": 1e-5,
                   "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "anneal_kind": "cosine",
                   "anneal_steps": 0, "clip_norm": 0.0, "val_fraction": 0.1}


def _checked_section(doc, types, prefix):
    out = {}
    for key, value in doc.items():
        if key not in types:
            raise ConfigError(f"unknown config field '{prefix}{key}'")
        want = types[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, want) or (want in (int, float) and isinstance(value, bool)):
            raise ConfigError(f"config field '{prefix}{key}' must be {want.__name__}")
        out[key] = value
    return out


def parse_run_config(doc):
    """Validate a raw JSON document into (ModelConfig, TrainConfig, epochs, io)."""
    top = _checked_section(doc, _TOP_TYPES, "")
    model_doc = dict(_MODEL_DEFAULTS)
    model_doc.update(_checked_section(top.get("model", {}), _MODEL_TYPES, "model."))
    train_doc = dict(_TRAIN_DEFAULTS)
    train_doc.update(_checked_section(top.get("train", {}), _TRAIN_TYPES, "train."))
    epochs = train_doc.pop("epochs")
    io = {"data": top.get("data"), "out_csv": top.get("out_csv"),
          "out_checkpoint": top.get("out_checkpoint"),
          "normalize": top.get("normalize", False)}
    return ModelConfig(**model_doc), TrainConfig(**train_doc), epochs, io


def _load_config_doc(args):
    doc = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    overrides = {
        "model": {k: getattr(args, k) for k in _MODEL_TYPES
                  if getattr(args, k, None) is not None},
        "train": {k: getattr(args, k) for k in _TRAIN_TYPES
                  if getattr(args, k, None) is not None},
    }
    for section, vals in overrides.items():
        if vals:
            doc.setdefault(section, {}).update(vals)
    for key in ("data", "out_csv", "out_checkpoint"):
        if getattr(args, key, None) is not None:
            doc[key] = getattr(args, key)
    if getattr(args, "normalize", False):
        doc["normalize"] = True
    return doc


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON run config; flags override its fields")
    for key, typ in _MODEL_TYPES.items():
        sub.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)
    for key, typ in _TRAIN_TYPES.items():
        sub.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)
    sub.add_argument("--data", default=None)
    sub.add_argument("--out-csv", dest="out_csv", default=None)
    sub.add_argument("--out-checkpoint", dest="out_checkpoint", default=None)
    sub.add_argument("--normalize", action="store_true", default=False)


def _model_sidecar(model_cfg, extra=None):
    payload = {"model": dataclasses.asdict(model_cfg)}
    if extra:
        payload.update(extra)
    return payload


def _load_model_from_checkpoint(path):
    sidecar_path = path + ".json"
    try:
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read checkpoint sidecar {sidecar_path}: {err}") from err
    model_cfg = ModelConfig(**sidecar["model"])
    gen, inf = init_params(model_cfg)
    restore_params(gen, inf, load_checkpoint(path))
    return model_cfg, gen, inf, sidecar


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_data(args):
    if args.task == "bimodal":
        batch = gen_bimodal_walk(args.n, args.t, args.seed)
        params = {"step": 0.5, "persistence": 0.9, "noise_std": 0.1}
    else:
        batch = gen_stroke_toy(args.n, args.t, args.seed)
        params = {"mean_stroke_len": 12.0}
    write_swn(args.out, batch)
    write_sidecar(args.out, {"task": args.task, "n": args.n, "T": args.t,
                             "seed": args.seed, "generator": params})
    print(f"wrote {batch.batch_size} sequences to {args.out}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg, epochs, io = parse_run_config(_load_config_doc(args))
    if not io["data"]:
        raise ConfigError("config field 'data' (dataset path) is required")
    dataset = read_swn(io["data"])
    if dataset.batch_size == 0:
        raise EmptyError(f"dataset {io['data']} is empty")
    if dataset.frame_dim != model_cfg.frame_dim:
        raise ConfigError(f"dataset frame_dim {dataset.frame_dim} != model frame_dim "
                          f"{model_cfg.frame_dim}")
    stats = None
    if io["normalize"]:
        train_part, _ = split_train_val(dataset, train_cfg.val_fraction, model_cfg.seed)
        stats = compute_norm_stats(train_part)
        dataset = normalize(dataset, stats)
    report = train(model_cfg, train_cfg, dataset, epochs,
                   csv_path=io["out_csv"], checkpoint_path=io["out_checkpoint"])
    if io["out_checkpoint"]:
        extra = {"train": {**dataclasses.asdict(train_cfg), "epochs": epochs},
                 "data": io["data"], "normalize": io["normalize"],
                 "best_val_elbo": report.best_val_elbo, "best_epoch": report.best_epoch}
        if stats is not None:
            extra["norm_stats"] = {"mean": stats.mean.tolist(), "std": stats.std.tolist()}
        write_sidecar(io["out_checkpoint"], _model_sidecar(model_cfg, extra))
    print(f"trained {len(report.steps)} steps; best validation ELBO "
          f"{report.best_val_elbo!r} at epoch {report.best_epoch}")
    return 0


def cmd_eval(args):
    model_cfg, gen, inf, sidecar = _load_model_from_checkpoint(args.checkpoint)
    dataset = read_swn(args.data)
    if dataset.batch_size == 0:
        raise EmptyError(f"dataset {args.data} is empty")
    if dataset.frame_dim != model_cfg.frame_dim:
        raise ConfigError(f"dataset frame_dim {dataset.frame_dim} != model frame_dim "
                          f"{model_cfg.frame_dim}")
    if args.estimator == "exact" and model_cfg.stochastic_layers != 0:
        raise ConfigError("exact log-likelihood needs a model with no latent layers")
    if sidecar.get("normalize"):
        stats_doc = sidecar["norm_stats"]
        from .data import NormStats
        dataset = normalize(dataset, NormStats(np.array(stats_doc["mean"]),
                                               np.array(stats_doc["std"])))
    value = evaluate(gen, inf, model_cfg, dataset, mode=args.mode,
                     segment_len=args.segment_len, seed=args.seed)
    label = "exact log-likelihood" if args.estimator == "exact" else "ELBO"
    print(f"{value!r}  # {args.mode} {label}, {dataset.batch_size} sequences, "
          f"checkpoint={args.checkpoint}, data={args.data}, seed={args.seed}")
    return 0


def cmd_sample(args):
    model_cfg, gen, _, _ = _load_model_from_checkpoint(args.checkpoint)
    if args.svg and model_cfg.frame_dim != 3:
        raise ConfigError(f"SVG export needs 3-channel stroke frames, model has "
                          f"frame_dim={model_cfg.frame_dim}")
    batch = generate(gen, model_cfg, args.t, args.n, args.temperature, args.seed)
    write_swn(args.out, batch)
    write_sidecar(args.out, {"checkpoint": args.checkpoint, "n": args.n, "T": args.t,
                             "temperature": args.temperature, "seed": args.seed})
    if args.svg:
        quantized = read_swn(args.out)
        with open(args.svg, "w", encoding="utf-8") as fh:
            fh.write(render_svg(quantized))
    print(f"wrote {args.n} samples of length {args.t} to {args.out}")
    return 0


def cmd_gradcheck(args):
    model_cfg, _, _, _io = parse_run_config(_load_config_doc(args))
    gen, inf = init_params(model_cfg)
    n_params = param_count(gen) + param_count(inf)
    if n_params > 20000:
        raise ConfigError(f"gradient check capped at 20000 parameters, config has {n_params}")
    rng = np.random.default_rng(fold_seed(model_cfg.seed, 555))
    t_len, batch = args.t, args.batch
    frames = rng.normal(0.0, 1.0, size=(batch, t_len, model_cfg.frame_dim))
    lengths = [t_len] * batch
    if batch > 1:
        lengths[-1] = max(1, t_len - 3)
        frames[-1, lengths[-1]:] = 0.0
    x = SequenceBatch(frames, lengths)
    params = {"gen." + k: p for k, p in gen.items()}
    params.update({"inf." + k: p for k, p in inf.items()})

    def f():
        return elbo_terms(x, gen, inf, model_cfg, lam=0.7,
                          seed=fold_seed(model_cfg.seed, 556)).objective

    report = finite_diff_report(f, params, epsilon=1e-5)
    if args.inject_grad_error:
        first = next(iter(report))
        report[first] = max(report[first], 1.0)
    failed = False
    for name, err in report.items():
        status = "ok" if err < 1e-5 else "FAIL"
        failed = failed or err >= 1e-5
        print(f"{name}: max_rel_error={err:.3e} {status}")
    print(f"checked {len(report)} parameter groups, {n_params} parameters")
    return 1 if failed else 0


def cmd_ablate(args):
    model_cfg, train_cfg, epochs, io = parse_run_config(_load_config_doc(args))
    if not io["data"]:
        raise ConfigError("config field 'data' (dataset path) is required")
    if (args.s_list is None) == (args.d_list is None):
        raise ConfigError("exactly one of --s-list / --d-list is required")
    dataset = read_swn(io["data"])
    if io["normalize"]:
        train_part, _ = split_train_val(dataset, train_cfg.val_fraction, model_cfg.seed)
        dataset = normalize(dataset, compute_norm_stats(train_part))
    if args.s_list is not None:
        values = [int(v) for v in args.s_list.split(",")]
        configs = [ablate(model_cfg, s) for s in values]
    else:
        values = [int(v) for v in args.d_list.split(",")]
        configs = [dataclasses.replace(model_cfg, latent_total=d) for d in values]
    rows = []
    for value, cfg in zip(values, configs):
        begin = time.perf_counter()
        report = train(cfg, train_cfg, dataset, epochs)
        rows.append((value, cfg.latent_per_layer, report.best_val_elbo,
                     time.perf_counter() - begin))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "latent_per_layer", "final_val_elbo", "wall_clock"])
        for setting, per_layer, val_elbo, wall in rows:
            writer.writerow([setting, per_layer, repr(val_elbo), f"{wall:.3f}"])
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="swavenet",
                                     description="Stochastic WaveNet toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    make = subs.add_parser("make-data", help="synthesize a dataset")
    make.add_argument("--task", choices=["bimodal", "stroke"], required=True)
    make.add_argument("-n", type=int, required=True)
    make.add_argument("-t", "--t", type=int, required=True, help="frames per sequence")
    make.add_argument("--seed", type=int, default=0)
    make.add_argument("--out", required=True)
    make.set_defaults(func=cmd_make_data)

    tr = subs.add_parser("train", help="train a model from a run config")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--mode", choices=["per_sequence", "per_segment"],
                    default="per_sequence")
    ev.add_argument("--segment-len", dest="segment_len", type=int, default=None)
    ev.add_argument("--estimator", choices=["elbo", "exact"], default="elbo")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    sa = subs.add_parser("sample", help="draw sequences from a checkpoint")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("-n", type=int, default=1)
    sa.add_argument("-t", "--t", type=int, required=True)
    sa.add_argument("--temperature", type=float, default=1.0)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--out", required=True)
    sa.add_argument("--svg", default=None)
    sa.set_defaults(func=cmd_sample)

    gc = subs.add_parser("gradcheck", help="compare analytic gradients with "
                                           "finite differences on a tiny model")
    _add_config_flags(gc)
    gc.add_argument("--t", type=int, default=16)
    gc.add_argument("--batch", type=int, default=2)
    gc.add_argument("--inject-grad-error", action="store_true",
                    help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    ab = subs.add_parser("ablate", help="train one model per latent setting")
    _add_config_flags(ab)
    ab.add_argument("--s-list", dest="s_list", default=None,
                    help="comma-separated stochastic layer counts")
    ab.add_argument("--d-list", dest="d_list", default=None,
                    help="comma-separated total latent dims")
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 3
    except NumericsError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, EmptyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

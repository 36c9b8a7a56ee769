"""Command-line front end: reproducible runs driven by a JSON config.

Commands: ``idmask train-model | protect | evaluate | bench``. Every run
echoes its fully resolved configuration to ``config.resolved.json`` in
the output directory, so the written artifacts carry their provenance.
Perturbation sizes in the config file are on the familiar 0..255 byte
scale and are divided by 255 at this boundary.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 post-hoc
invariant audit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .baselines import DiversityConfig
from .embedding import TrainConfig, load_model, make_linear_model, save_model, train_mlp_model
from .image_io import ImageFileError, quantize_unit, read_image_file, write_image_file, write_tensor_file
from .masking import AttackConfig, protect_batch, protect_single
from .metrics import psnr, ssim
from .protocol import (
    BenchmarkConfig,
    build_benchmark,
    clean_identification_rate,
    normalize_method,
    run_experiment,
    synthesize_identities,
)
from .validation import BUDGET_ATOL, perturbation_norm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_AUDIT = 4


class ConfigError(ValueError):
    pass


class AuditError(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "attack": {
        "norm": "linf",
        "epsilon": 12.0,
        "alpha": 1.5,
        "iterations": 50,
        "momentum": 1.0,
        "gamma": 0.0,
        "selection": "greedy",
        "target_index": 0,
        "bandwidths": None,
        "mmd_batch": 50,
    },
    "benchmark": {
        "protected_identities": 50,
        "images_per_identity": 4,
        "target_identities": 10,
        "target_images_per_identity": 3,
        "distractor_identities": 50,
        "distractor_images_per_identity": 1,
        "height": 48,
        "width": 48,
        "channels": 1,
        "seed": None,
    },
    "train": {
        "identities": 150,
        "images_per_identity": 10,
        "hidden_units": 128,
        "epochs": 600,
        "learning_rate": 1.0,
        "seed": None,
        "dataset_seed": None,
    },
    "linear": {"components": 32, "seed": None},
    "diversity": {"probability": 0.5, "scale_min": 0.8, "scale_max": 1.0, "seed": None},
    "evaluate": {"methods": ["tip-im"], "gammas": None, "target_counts": None, "mmd_batch": 10},
    "paths": {"surrogate_model": None},
}


def _merge(defaults, overrides, path=""):
    if not isinstance(overrides, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    merged = {}
    for key, default in defaults.items():
        if key in overrides and isinstance(default, dict):
            merged[key] = _merge(default, overrides[key], f"{path}{key}.")
        elif key in overrides:
            merged[key] = overrides[key]
        else:
            merged[key] = default
    for key in overrides:
        if key not in defaults:
            raise ConfigError(f"unknown config key {path}{key}")
    return merged


def load_config(path=None, overrides=None):
    """Parse, validate against the documented key set, and resolve seeds."""
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = _merge(DEFAULT_CONFIG, user)
    if overrides:
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if key:
                cfg[section][key] = value
            else:
                cfg[section] = value
    seed = int(cfg["seed"])
    if cfg["benchmark"]["seed"] is None:
        cfg["benchmark"]["seed"] = seed
    bench_seed = int(cfg["benchmark"]["seed"])
    if cfg["train"]["seed"] is None:
        cfg["train"]["seed"] = 205 + bench_seed
    if cfg["train"]["dataset_seed"] is None:
        cfg["train"]["dataset_seed"] = 1000 + bench_seed
    if cfg["linear"]["seed"] is None:
        cfg["linear"]["seed"] = 11 + bench_seed
    if cfg["diversity"]["seed"] is None:
        cfg["diversity"]["seed"] = 77 + bench_seed
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be at least 1")
    return cfg


def attack_config(cfg):
    a = cfg["attack"]
    try:
        return AttackConfig(
            norm_type=str(a["norm"]),
            epsilon=float(a["epsilon"]) / 255.0,
            alpha=min(float(a["alpha"]), float(a["epsilon"])) / 255.0,
            iterations=int(a["iterations"]),
            momentum=float(a["momentum"]),
            gamma=float(a["gamma"]),
            selection=str(a["selection"]),
            target_index=int(a["target_index"]),
            bandwidths=None if a["bandwidths"] is None else tuple(a["bandwidths"]),
        )
    except ValueError as exc:
        raise ConfigError(f"attack config: {exc}") from exc


def benchmark_config(cfg):
    b = cfg["benchmark"]
    try:
        return BenchmarkConfig(
            protected_identities=int(b["protected_identities"]),
            images_per_identity=int(b["images_per_identity"]),
            target_identities=int(b["target_identities"]),
            target_images_per_identity=int(b["target_images_per_identity"]),
            distractor_identities=int(b["distractor_identities"]),
            distractor_images_per_identity=int(b["distractor_images_per_identity"]),
            height=int(b["height"]),
            width=int(b["width"]),
            channels=int(b["channels"]),
            seed=int(b["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(f"benchmark config: {exc}") from exc


def train_config(cfg):
    t = cfg["train"]
    try:
        return TrainConfig(
            epochs=int(t["epochs"]),
            learning_rate=float(t["learning_rate"]),
            seed=int(t["seed"]),
            hidden_units=int(t["hidden_units"]),
            n_identities=int(t["identities"]),
            images_per_identity=int(t["images_per_identity"]),
        )
    except ValueError as exc:
        raise ConfigError(f"train config: {exc}") from exc


def diversity_config(cfg):
    d = cfg["diversity"]
    try:
        return DiversityConfig(
            probability=float(d["probability"]),
            scale_min=float(d["scale_min"]),
            scale_max=float(d["scale_max"]),
            seed=int(d["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(f"diversity config: {exc}") from exc


def _echo_config(cfg, outdir):
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "config.resolved.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _image_shape(cfg):
    b = cfg["benchmark"]
    return int(b["height"]), int(b["width"]), int(b["channels"])


def _train_population(cfg):
    tc = train_config(cfg)
    return synthesize_identities(
        tc.n_identities,
        tc.images_per_identity,
        _image_shape(cfg),
        seed=int(cfg["train"]["dataset_seed"]),
    )


def _surrogate(cfg):
    path = cfg["paths"]["surrogate_model"]
    if path is not None:
        return load_model(path)
    return train_mlp_model(_train_population(cfg), train_config(cfg))


def cmd_train_model(cfg, outdir):
    _echo_config(cfg, outdir)
    model = train_mlp_model(_train_population(cfg), train_config(cfg))
    save_model(model, outdir / "surrogate.embm")
    with open(outdir / "training_summary.txt", "w") as fh:
        fh.write(f"identities: {cfg['train']['identities']}\n")
        fh.write(f"images_per_identity: {cfg['train']['images_per_identity']}\n")
        fh.write(f"hidden_units: {model.hidden_units}\n")
        fh.write(f"epochs: {model.epochs}\n")
        fh.write(f"train_accuracy: {model.train_accuracy_!r}\n")
    print(f"model written to {outdir / 'surrogate.embm'} "
          f"(train accuracy {model.train_accuracy_:.4f})")
    return EXIT_OK


def _audit_protection(outdir, originals, protected, attack):
    byte_budget = round(attack.epsilon * 255.0) + 1
    for i in range(originals.shape[0]):
        reread = read_image_file(outdir / f"protected_{i:03d}.png")
        diff = np.abs(
            np.rint(reread * 255.0) - np.rint(quantize_unit(originals[i]) * 255.0)
        )
        if attack.norm_type == "linf" and diff.max() > byte_budget:
            raise AuditError(
                f"protected_{i:03d}.png: byte deviation {diff.max()} exceeds budget"
            )
        delta = protected[i] - originals[i]
        if perturbation_norm(delta, attack.norm_type) > attack.epsilon + BUDGET_ATOL:
            raise AuditError(f"item {i}: stored mask exceeds epsilon")
        if reread.min() < 0.0 or reread.max() > 1.0:
            raise AuditError(f"protected_{i:03d}.png: pixels out of range")


def cmd_protect(cfg, outdir, inputs=None, use_benchmark=False):
    _echo_config(cfg, outdir)
    attack = attack_config(cfg)
    model = _surrogate(cfg)

    if use_benchmark:
        bench = build_benchmark(benchmark_config(cfg))
        originals = np.stack([p.image for p in bench.probes])
        targets = bench.target_set
    else:
        if not inputs:
            raise ConfigError("protect needs --input files or --benchmark")
        images = [read_image_file(p) for p in inputs]
        shapes = {img.shape for img in images}
        if len(shapes) != 1:
            raise ConfigError(f"input images must share one shape, got {sorted(shapes)}")
        originals = np.stack(images)
        bench = build_benchmark(benchmark_config(cfg))
        targets = bench.target_set

    if originals.shape[1:] != model.input_shape_:
        raise ConfigError(
            f"model expects {model.input_shape_}, images are {originals.shape[1:]}"
        )

    if originals.shape[0] == 1:
        protected_one, mask = protect_single(
            originals[0],
            targets,
            model,
            attack,
            batch_size=int(cfg["attack"]["mmd_batch"]),
            seed=int(cfg["seed"]),
        )
        protected = protected_one[None]
        deltas = mask.delta[None]
    elif use_benchmark:
        # same optimization chunking as the evaluation harness
        chunk = int(cfg["evaluate"]["mmd_batch"])
        pieces = []
        deltas = []
        for start in range(0, originals.shape[0], chunk):
            piece, masks = protect_batch(
                originals[start : start + chunk], targets, model, attack
            )
            pieces.append(piece)
            deltas.extend(m.delta for m in masks)
        protected = np.concatenate(pieces)
        deltas = np.stack(deltas)
    else:
        protected, masks = protect_batch(originals, targets, model, attack)
        deltas = np.stack([m.delta for m in masks])

    for i in range(protected.shape[0]):
        write_image_file(protected[i], outdir / f"protected_{i:03d}.png")
    write_tensor_file(deltas, outdir / "masks.imsk")
    write_tensor_file(protected, outdir / "protected.imsk")

    can_ssim = min(protected.shape[1], protected.shape[2]) >= 11
    with open(outdir / "quality.csv", "w") as fh:
        fh.write("index,psnr,ssim\n")
        for i in range(protected.shape[0]):
            s = ssim(protected[i], originals[i]) if can_ssim else float("nan")
            fh.write(f"{i},{psnr(protected[i], originals[i])!r},{s!r}\n")

    _audit_protection(outdir, originals, protected, attack)
    print(f"protected {protected.shape[0]} image(s) into {outdir}")
    return EXIT_OK


def _write_report(report, outdir, stem):
    with open(outdir / f"{stem}.txt", "w") as fh:
        fh.write(report.to_text())
    with open(outdir / f"{stem}.csv", "w") as fh:
        fh.write(report.to_csv())


def cmd_evaluate(cfg, outdir, gamma_sweep=None):
    _echo_config(cfg, outdir)
    attack = attack_config(cfg)
    bench = build_benchmark(benchmark_config(cfg))
    surrogate = _surrogate(cfg)
    holdout = make_linear_model(
        int(cfg["linear"]["seed"]), _image_shape(cfg), int(cfg["linear"]["components"])
    )
    models = {"surrogate": surrogate, "holdout": holdout}
    diversity = diversity_config(cfg)

    with open(outdir / "calibration.txt", "w") as fh:
        for name, model in models.items():
            rate = clean_identification_rate(bench, model)
            fh.write(f"clean_rank1_identification.{name}: {rate!r}\n")

    chunk = int(cfg["evaluate"]["mmd_batch"])
    methods = [normalize_method(m) for m in cfg["evaluate"]["methods"]]
    for method in methods:
        reports = run_experiment(
            bench, method, surrogate, models, attack,
            diversity=diversity, mmd_batch=chunk,
        )
        for name, report in reports.items():
            _write_report(report, outdir, f"report_{method}_{name}")

    gammas = gamma_sweep if gamma_sweep is not None else cfg["evaluate"]["gammas"]
    if gammas:
        for gamma in gammas:
            cfg_g = dc_replace(attack, gamma=float(gamma))
            reports = run_experiment(
                bench, "tip-im", surrogate, models, cfg_g, mmd_batch=chunk
            )
            for name, report in reports.items():
                _write_report(report, outdir, f"report_gamma{gamma:g}_tip-im_{name}")

    counts = cfg["evaluate"]["target_counts"]
    if counts:
        for count in counts:
            view = bench.with_target_subset(int(count))
            reports = run_experiment(
                view, "tip-im", surrogate, models, attack, mmd_batch=chunk
            )
            for name, report in reports.items():
                _write_report(report, outdir, f"report_targets{count}_tip-im_{name}")

    print(f"evaluation reports written to {outdir}")
    return EXIT_OK


def cmd_bench(cfg, outdir):
    _echo_config(cfg, outdir)
    model = train_mlp_model(_train_population(cfg), train_config(cfg))
    save_model(model, outdir / "surrogate.embm")
    cfg = dict(cfg)
    cfg["paths"] = dict(cfg["paths"], surrogate_model=str(outdir / "surrogate.embm"))
    return cmd_evaluate(cfg, outdir)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="idmask",
        description="Generate and evaluate adversarial identity masks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="JSON config file")
        p.add_argument("-o", "--output", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--gamma", type=float, help="override attack.gamma")
        p.add_argument("--epsilon", type=float, help="override attack.epsilon (0..255)")
        p.add_argument("--threads", type=int, help="cap internal parallelism")

    p_train = sub.add_parser("train-model", help="train the embedding model")
    common(p_train)

    p_protect = sub.add_parser("protect", help="generate identity masks")
    common(p_protect)
    p_protect.add_argument("--input", nargs="+", help="input PNG image(s)")
    p_protect.add_argument(
        "--benchmark", action="store_true", help="protect the benchmark probes"
    )

    p_eval = sub.add_parser("evaluate", help="run the benchmark protocol")
    common(p_eval)
    p_eval.add_argument(
        "--gamma-sweep",
        help="comma-separated naturalness weights, one report per value",
    )

    p_bench = sub.add_parser("bench", help="train a model and evaluate in one run")
    common(p_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.gamma is not None:
        overrides["attack.gamma"] = args.gamma
    if args.epsilon is not None:
        overrides["attack.epsilon"] = args.epsilon
    if args.threads is not None:
        overrides["threads"] = args.threads
    try:
        cfg = load_config(args.config, overrides)
        outdir = Path(args.output)
        outdir.mkdir(parents=True, exist_ok=True)
        if args.command == "train-model":
            return cmd_train_model(cfg, outdir)
        if args.command == "protect":
            return cmd_protect(
                cfg, outdir, inputs=args.input, use_benchmark=args.benchmark
            )
        if args.command == "evaluate":
            sweep = None
            if args.gamma_sweep:
                sweep = [float(v) for v in args.gamma_sweep.split(",")]
            return cmd_evaluate(cfg, outdir, gamma_sweep=sweep)
        if args.command == "bench":
            return cmd_bench(cfg, outdir)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuditError as exc:
        print(f"invariant audit failed: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (FileNotFoundError, ImageFileError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

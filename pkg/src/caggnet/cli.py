"""Command-line entry point: synth, train, eval, gradcheck.

Experiments are driven by a JSON config whose keys are validated
exhaustively (unknown keys are rejected); command-line flags override
config values. Every command is deterministic given its config, and all
outputs land under the directory passed via --out.

Exit codes: 0 success, 1 configuration/data error, 2 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

THREADS_ENV = "CAGGNET_THREADS"

DEFAULT_CONFIG = {
    "seed": 0,
    "data_dir": None,
    "out_dir": "out",
    "threads": None,
    "model": {
        "arch": "caggnet",
        "levels": 3,
        "columns": 2,
        "base_channels": 8,
        "in_channels": 1,
        "upsample_mode": "nearest2",
        "wab_reduction": 2,
    },
    "loss": {
        "kind": "focal",
        "alpha": 0.25,
        "gamma": 2.0,
        "clamp_eps": 1e-7,
    },
    "optim": {
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "train": {
        "epochs_max": 100,
        "batch_size": 4,
        "patience": 32,
        "train_fraction": 0.8,
        "threshold": 0.5,
    },
}


class CliError(Exception):
    """User-facing configuration or data problem (exit code 1)."""


def _pin_threads(n: int) -> None:
    # must run before numpy is imported to take effect on the BLAS pools
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise CliError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config key {where!r} must be an object")
            out[key] = _merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise CliError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise CliError("config root must be a JSON object")
        cfg = _merge_config(cfg, user)
    return _merge_config(cfg, overrides)


def _flag_overrides(args) -> dict:
    """Translate set CLI flags into the nested config layout."""
    out: dict = {}

    def put(path: tuple[str, ...], value):
        if value is None:
            return
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    put(("seed",), args.seed)
    put(("data_dir",), args.data)
    put(("out_dir",), args.out)
    put(("threads",), args.threads)
    put(("model", "arch"), getattr(args, "arch", None))
    put(("model", "levels"), getattr(args, "levels", None))
    put(("model", "columns"), getattr(args, "columns", None))
    put(("model", "base_channels"), getattr(args, "base_channels", None))
    put(("model", "in_channels"), getattr(args, "in_channels", None))
    put(("loss", "kind"), getattr(args, "loss", None))
    put(("loss", "alpha"), getattr(args, "alpha", None))
    put(("loss", "gamma"), getattr(args, "gamma", None))
    put(("optim", "lr"), getattr(args, "lr", None))
    put(("train", "epochs_max"), getattr(args, "epochs", None))
    put(("train", "batch_size"), getattr(args, "batch_size", None))
    put(("train", "patience"), getattr(args, "patience", None))
    return out


def _resolve_threads(cfg: dict) -> int:
    threads = cfg.get("threads")
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    threads = int(threads)
    if threads < 1:
        raise CliError(f"threads must be >= 1, got {threads}")
    return threads


def _build_model(cfg: dict):
    from .models import ModelConfig, build_caggnet, build_unet

    m = cfg["model"]
    mc = ModelConfig(
        levels=int(m["levels"]),
        columns=int(m["columns"]),
        base_channels=int(m["base_channels"]),
        in_channels=int(m["in_channels"]),
        upsample_mode=m["upsample_mode"],
        wab_reduction=int(m["wab_reduction"]),
        seed=int(cfg["seed"]),
        dtype="single",
    )
    if m["arch"] == "caggnet":
        return build_caggnet(mc)
    if m["arch"] == "unet":
        return build_unet(mc)
    raise CliError(f"unknown arch {m['arch']!r}")


def _load_split_dataset(cfg: dict):
    from . import data_io

    data_dir = cfg["data_dir"]
    if data_dir is None:
        raise CliError("no dataset: set data_dir in the config or pass --data")
    if not Path(data_dir).exists():
        raise CliError(f"dataset directory not found: {data_dir}")
    samples, manifest = data_io.load_dataset(data_dir)
    if "split" in manifest:
        train, val = data_io.split_from_manifest(samples, manifest)
    else:
        train, val = data_io.split(samples, cfg["train"]["train_fraction"],
                                   seed=int(cfg["seed"]))
    return train, val


def cmd_train(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args))
    from .train import (AdamState, EarlyStopper, TrainingDiverged, make_loss,
                        train_loop)

    train_set, val_set = _load_split_dataset(cfg)
    model = _build_model(cfg)
    loss_fn = make_loss(cfg["loss"]["kind"], alpha=cfg["loss"]["alpha"],
                        gamma=cfg["loss"]["gamma"],
                        clamp_eps=cfg["loss"]["clamp_eps"])
    optim = AdamState(lr=cfg["optim"]["lr"], beta1=cfg["optim"]["beta1"],
                      beta2=cfg["optim"]["beta2"], eps=cfg["optim"]["eps"])
    stopper = EarlyStopper(patience=int(cfg["train"]["patience"]))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        log = train_loop(
            model, train_set, val_set, loss_fn, optim, stopper,
            epochs_max=int(cfg["train"]["epochs_max"]),
            batch_size=int(cfg["train"]["batch_size"]),
            seed=int(cfg["seed"]),
            threshold=float(cfg["train"]["threshold"]),
            checkpoint_dir=out_dir / "checkpoint",
        )
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2

    log.write_csv(out_dir / "train_log.csv")
    log.write_timing_csv(out_dir / "timing.csv")
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    best = log.best_val_iou
    print(f"trained {len(log.rows)} epochs; best val IoU {best:.4f} "
          f"at epoch {log.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args))
    from . import data_io
    from .metrics import binarize, evaluate_model
    from .models import load_checkpoint
    from .tensor_core import Tensor4

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)

    data_dir = cfg["data_dir"]
    if data_dir is None or not Path(data_dir).exists():
        raise CliError(f"dataset directory not found: {data_dir}")
    samples, manifest = data_io.load_dataset(data_dir)
    if args.split and "split" in manifest:
        train, val = data_io.split_from_manifest(samples, manifest)
        samples = {"train": train, "val": val}[args.split]
    if any(s.image.c != model.cfg.in_channels for s in samples):
        raise CliError(
            f"dataset channel count does not match model in_channels="
            f"{model.cfg.in_channels}"
        )

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    threshold = float(cfg["train"]["threshold"])
    report, preds = evaluate_model(model, samples, threshold=threshold,
                                   keep_predictions=True)
    report.write_csv(out_dir / "metrics.csv")
    report.write_json(out_dir / "metrics.json")
    if args.dump_masks:
        mask_dir = out_dir / "pred_masks"
        mask_dir.mkdir(exist_ok=True)
        for s, p in zip(samples, preds):
            data_io.write_netpbm(mask_dir / f"{s.id}.pgm",
                                 Tensor4(binarize(p, threshold).data.astype("float64")))
    print(f"evaluated {len(samples)} images: mean IoU {report.mean_iou:.4f}, "
          f"mean F1 {report.mean_f1:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from . import autograd, gradcheck

    scopes = ["ops", "blocks", "model"] if args.scope == "all" else [args.scope]
    restore = None
    if args.corrupt:
        # test fixture: perturb one registered backward rule
        if args.corrupt not in autograd.RULES:
            raise CliError(f"no registered op named {args.corrupt!r}")
        original = autograd.RULES[args.corrupt]

        def corrupted(node, g):
            return tuple(None if gi is None else gi * 1.01
                         for gi in original(node, g))

        autograd.RULES[args.corrupt] = corrupted
        restore = (args.corrupt, original)

    try:
        reports = []
        for scope in scopes:
            reports.extend(gradcheck.run_scope(scope))
    finally:
        if restore is not None:
            autograd.RULES[restore[0]] = restore[1]

    width = max(len(r.op) for r in reports)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        coord = f"{r.worst_coord[0]}[{r.worst_coord[1]}]"
        print(f"{r.op:<{width}}  max_rel_err={r.max_rel_err:.3e}  "
              f"worst={coord}  {status}")
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump([json.loads(r.to_json()) for r in reports], fh, indent=2)
            fh.write("\n")
    return 0 if all(r.passed for r in reports) else 1


def cmd_synth(args) -> int:
    cfg = load_config(args.config, _flag_overrides(args))
    from . import data_io

    try:
        synth = data_io.SynthConfig(
            count=args.count, size=args.size,
            blobs_min=args.blobs_min, blobs_max=args.blobs_max,
            radius_min=args.radius_min, radius_max=args.radius_max,
            noise_sigma=args.noise_sigma, seed=int(cfg["seed"]),
        )
        synth.validate()
        samples = data_io.gen_synthetic(synth)
        n_train = int(round(cfg["train"]["train_fraction"] * len(samples)))
        if args.count == 1:
            split_ids = {"train": [samples[0].id], "val": [samples[0].id]}
        else:
            ids = [s.id for s in samples]
            split_ids = {"train": ids[:n_train], "val": ids[n_train:]}
            if not split_ids["train"] or not split_ids["val"]:
                split_ids = {"train": ids[:-1], "val": ids[-1:]}
        out_dir = Path(cfg["out_dir"])
        data_io.save_dataset(out_dir, samples, split_ids)
    except (ValueError, OSError) as e:
        raise CliError(str(e))
    print(f"wrote {len(samples)} samples to {cfg['out_dir']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caggnet",
        description="Desk-scale crossing-aggregation segmentation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int,
                       help=f"intra-op threads (default ${THREADS_ENV} or 1)")

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.add_argument("--arch", choices=["caggnet", "unet"])
    p_train.add_argument("--levels", type=int)
    p_train.add_argument("--columns", type=int)
    p_train.add_argument("--base-channels", dest="base_channels", type=int)
    p_train.add_argument("--in-channels", dest="in_channels", type=int)
    p_train.add_argument("--loss", choices=["focal", "bce"])
    p_train.add_argument("--alpha", type=float)
    p_train.add_argument("--gamma", type=float)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--patience", type=int)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=["train", "val"],
                        help="restrict to one manifest split")
    p_eval.add_argument("--dump-masks", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check suites")
    common(p_grad)
    p_grad.add_argument("--scope", choices=["ops", "blocks", "model", "all"],
                        default="all")
    p_grad.add_argument("--json-out", dest="json_out")
    p_grad.add_argument("--corrupt", help=argparse.SUPPRESS)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--count", type=int, default=8)
    p_synth.add_argument("--size", type=int, default=32)
    p_synth.add_argument("--blobs-min", dest="blobs_min", type=int, default=1)
    p_synth.add_argument("--blobs-max", dest="blobs_max", type=int, default=3)
    p_synth.add_argument("--radius-min", dest="radius_min", type=int, default=3)
    p_synth.add_argument("--radius-max", dest="radius_max", type=int, default=6)
    p_synth.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                         default=0.03)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        # thread pinning must precede the first numpy import
        threads = _resolve_threads({"threads": args.threads})
        if "numpy" not in sys.modules:
            _pin_threads(threads)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: train, eval, compress, channel-bench, sweep.

Every run writes a manifest (resolved config, seeds, config hash, commit id)
next to its outputs so results can be reproduced. Dataset paths may be
relative to the SWINSIT_DATA_ROOT environment variable; the pseudo-path
``synthetic:N`` generates N structured random images in CIFAR format.
"""

import argparse
import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import torch
import yaml

from . import data as data_mod
from .channel import seeded_generator, snr_to_noise_var
from .ceac import synth_estimate_pairs, train_refiner, estimator_mse_table, DnCNN
from .compression import compress, save_compressed, report_model_stats
from .report import export_report, write_csv
from .training import (
    TrainConfig,
    build_variant,
    train,
    finetune,
    evaluate,
    save_checkpoint,
    load_checkpoint,
)

DEFAULT_SNR_GRID = (1.0, 4.0, 7.0, 10.0, 13.0)


def _resolve_dataset(spec, seed=0, kind=None):
    if spec.startswith("synthetic:"):
        count = int(spec.split(":", 1)[1])
        return data_mod.synthetic_images(count, seed=seed)
    root = os.environ.get("SWINSIT_DATA_ROOT", "")
    path = spec if os.path.isabs(spec) or not root else os.path.join(root, spec)
    if kind is None:
        kind = "cifar10-binary" if not os.path.isdir(path) or any(
            f.endswith(".bin") for f in os.listdir(path)
        ) else "image-folder"
    return data_mod.ingest_dataset(path, kind)


def _config_from_file(path, overrides):
    cfg = {}
    if path:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(cfg)


def _write_manifest(out_dir, args, cfg_dict=None):
    os.makedirs(out_dir, exist_ok=True)
    try:
        commit = subprocess.check_output(
            ["git", "rev-parse", "HEAD"], stderr=subprocess.DEVNULL, text=True
        ).strip()
    except Exception:
        commit = "unknown"
    manifest = {
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": cfg_dict,
        "commit": commit,
    }
    if cfg_dict is not None:
        canon = json.dumps(cfg_dict, sort_keys=True).encode()
        manifest["config_sha256"] = hashlib.sha256(canon).hexdigest()
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return path


def _parse_grid(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_train(args):
    cfg = _config_from_file(
        args.config,
        {
            "seed": args.seed,
            "variant": args.variant,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
        },
    )
    images = _resolve_dataset(args.dataset, seed=cfg.seed)
    refiner = None
    if cfg.variant == "full":
        if args.refiner and os.path.exists(args.refiner):
            refiner = DnCNN()
            refiner.load_state_dict(torch.load(args.refiner, weights_only=True))
        else:
            refiner = _train_default_refiner(cfg, args.out)
    _write_manifest(args.out, args, cfg.to_dict())
    model, history = train(
        cfg, images, refiner=refiner, out_dir=args.out, log=print
    )
    path = os.path.join(args.out, "best.pt")
    save_checkpoint(path, model, cfg)
    with open(os.path.join(args.out, "history.json"), "w") as fh:
        json.dump(history, fh, indent=2)
    print(f"checkpoint written to {path}")


def _train_default_refiner(cfg, out_dir):
    """Train the estimate denoiser on synthetic pairs over the SNR range."""
    g = seeded_generator(cfg.seed + 77)
    n_grids = 1500
    snrs = cfg.snr_low_db + (cfg.snr_high_db - cfg.snr_low_db) * torch.rand(
        n_grids, generator=g
    )
    noise_var = snr_to_noise_var(snrs) / cfg.pilot_len
    clean, noisy = synth_estimate_pairs(n_grids, 8, noise_var, g)
    refiner, _ = train_refiner(clean, noisy, epochs=20, seed=cfg.seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        torch.save(refiner.state_dict(), os.path.join(out_dir, "refiner.pt"))
    return refiner


def cmd_eval(args):
    model, cfg = load_checkpoint(args.checkpoint)
    images = _resolve_dataset(args.dataset, seed=cfg.seed + 1)
    _write_manifest(args.out, args, cfg.to_dict())
    rows = evaluate(
        model,
        images,
        snr_grid=_parse_grid(args.snr_grid),
        seeds=range(args.seeds),
    )
    export_report(rows, args.out, "eval")
    print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'eval.csv')}")


def cmd_compress(args):
    model, cfg = load_checkpoint(args.checkpoint)
    images = _resolve_dataset(args.dataset, seed=cfg.seed)
    _write_manifest(args.out, args, cfg.to_dict())
    images_t = torch.as_tensor(images, dtype=torch.float32)
    g = seeded_generator(cfg.seed + 5)
    calib = [
        images_t[i : i + cfg.batch_size]
        for i in range(0, min(len(images_t), args.calib_batches * cfg.batch_size), cfg.batch_size)
    ]

    def run_batch(m, batch):
        snr = cfg.snr_low_db + (cfg.snr_high_db - cfg.snr_low_db) * torch.rand(
            batch.shape[0], generator=g
        )
        m(batch, snr, generator=g)

    steps = max(1, int(args.finetune_steps))
    cm = compress(
        model,
        sparsity=args.sparsity,
        bits=args.bits,
        calib_batches=calib,
        forward=run_batch,
        finetune=lambda m: finetune(cfg, m, images_t, steps),
        ste_finetune=lambda m: finetune(cfg, m, images_t, steps),
    )
    out_path = os.path.join(args.out, "compressed.npz")
    save_compressed(cm, out_path)
    with open(os.path.join(args.out, "compression_stats.json"), "w") as fh:
        json.dump(cm.stats, fh, indent=2)
    print(json.dumps(cm.stats, indent=2))
    print(f"compressed model written to {out_path}")


def cmd_channel_bench(args):
    """Standalone estimator benchmark: MSE vs SNR for raw and refined ML."""
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args)
    g = seeded_generator(args.seed)
    # train a refiner at the benchmark's own estimate-noise level
    snrs = 1.0 + 12.0 * torch.rand(args.train_grids, generator=g)
    noise_var = snr_to_noise_var(snrs) / args.pilot_len
    clean, noisy = synth_estimate_pairs(args.train_grids, 8, noise_var, g)
    refiner, _ = train_refiner(clean, noisy, epochs=15, seed=args.seed)
    rows = estimator_mse_table(
        _parse_grid(args.snr_grid),
        trials=args.trials,
        pilot_len=args.pilot_len,
        refiner=refiner,
        seed=args.seed,
    )
    path = os.path.join(args.out, "estimator_mse.csv")
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(row)
    print(f"wrote {path}")


def cmd_sweep(args):
    """Evaluate several variant checkpoints over the SNR grid; export figures."""
    checkpoints = {}
    for spec in args.checkpoints:
        name, _, path = spec.partition("=")
        checkpoints[name] = path
    missing = [n for n, p in checkpoints.items() if not os.path.exists(p)]
    if missing:
        raise SystemExit(f"missing checkpoints for variants: {', '.join(missing)}")
    _write_manifest(args.out, args)
    dataset = None
    all_rows = []
    for name, path in checkpoints.items():
        model, cfg = load_checkpoint(path)
        if dataset is None:
            dataset = _resolve_dataset(args.dataset, seed=cfg.seed + 1)
        rows = evaluate(
            model,
            dataset,
            snr_grid=_parse_grid(args.snr_grid),
            seeds=range(args.seeds),
            variant=name,
        )
        all_rows.extend(rows)
    export_report(all_rows, args.out, "sweep")
    print(f"wrote sweep results for {len(checkpoints)} variants to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="swinsit",
        description="Semantic image transmission over a simulated Rayleigh channel",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant end to end")
    p.add_argument("--config", help="YAML config with TrainConfig keys")
    p.add_argument("--dataset", required=True, help="path or synthetic:N")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("full", "no_ceac", "snr_unaware"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--refiner", help="path to a trained refiner state dict")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over an SNR grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snr-grid", default="1,4,7,10,13")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compress", help="prune + quantize a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sparsity", type=float, default=0.6)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--calib-batches", dest="calib_batches", type=int, default=4)
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int, default=50)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("channel-bench", help="standalone estimator MSE benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--snr-grid", default="1,4,7,10,13")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--pilot-len", dest="pilot_len", type=int, default=1)
    p.add_argument("--train-grids", dest="train_grids", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_channel_bench)

    p = sub.add_parser("sweep", help="multi-variant SNR sweep with figures")
    p.add_argument(
        "--checkpoints",
        nargs="+",
        required=True,
        metavar="NAME=PATH",
        help="variant checkpoints, e.g. full=runs/full/best.pt",
    )
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snr-grid", default="1,4,7,10,13")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()

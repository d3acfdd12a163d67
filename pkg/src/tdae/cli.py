"""Command-line interface.

Subcommands
-----------
synth      generate a synthetic segmentation dataset on disk
train      fit a model; writes last.tdck, best.tdck, and runlog.json
eval       score a checkpoint against a dataset; prints a JSON report
predict    run one image through a checkpoint; writes a u8 label mask
gradcheck  finite-difference verification of every block type
bench      attention FLOP/wall-time scaling table plus fitted exponents

Config files are JSON with optional top-level "model" and "train"
sections. The TDAE_SEED environment variable overrides the configured
seed for train, synth, and gradcheck. Exit codes: 0 success, 1 contract
or configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from .attention import (
    EfficientAttentionParams,
    ReducedAttentionParams,
    efficient_attention,
    reduced_spatial_attention,
    standard_attention,
)
from .data.synth import SynthSpec, load_dataset, save_dataset, synth_generate
from .data.tensorfile import read_tensor, write_tensor
from .engine.tensor import Tensor
from .errors import ConfigurationError, ContractError
from .flops import (
    efficient_attention_flops,
    fit_exponent,
    reduced_attention_flops,
    standard_attention_flops,
)
from .metrics import evaluate
from .model import ModelConfig
from .train import TrainConfig, load_model_checkpoint, predict_masks, train_run


class _Parser(argparse.ArgumentParser):
    # argparse's default error path calls sys.exit(2); 2 is reserved for
    # numeric failures here, so bad arguments must surface as exit 1.
    def error(self, message):
        raise ConfigurationError(message)


def _env_seed(default: int) -> int:
    raw = os.environ.get("TDAE_SEED", "")
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"TDAE_SEED must be an integer, got {raw!r}") from None


def _load_config(path) -> tuple[ModelConfig, TrainConfig]:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{p}: top level must be an object")
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ConfigurationError(f"{p}: unknown config sections {sorted(unknown)}")
    if "model" not in raw:
        raise ConfigurationError(f"{p}: missing 'model' section")
    return ModelConfig.from_dict(raw["model"]), TrainConfig.from_dict(raw.get("train", {}))


def _load_split(data_dir) -> tuple[list, list | None]:
    """Dataset dir is either flat or holds train/ plus optional val/."""
    root = Path(data_dir)
    if (root / "train").is_dir():
        train, _ = load_dataset(root / "train")
        val = load_dataset(root / "val")[0] if (root / "val").is_dir() else None
        return train, val
    train, _ = load_dataset(root)
    return train, None


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    seed = _env_seed(args.seed)
    spec = SynthSpec(
        size=(args.size, args.size), num_classes=args.classes, seed=seed
    )
    out = Path(args.out)
    if args.val_count > 0:
        save_dataset(out / "train", synth_generate(spec, args.count), spec)
        val_spec = dataclasses.replace(spec, seed=seed + 1)
        save_dataset(out / "val", synth_generate(val_spec, args.val_count), val_spec)
        written = {"train": args.count, "val": args.val_count}
    else:
        save_dataset(out, synth_generate(spec, args.count), spec)
        written = {"train": args.count}
    print(json.dumps({"out": str(out), "seed": seed, "written": written}))
    return 0


def cmd_train(args) -> int:
    cfg, tc = _load_config(args.config)
    tc = dataclasses.replace(tc, seed=_env_seed(tc.seed))
    train_set, val_set = _load_split(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, log = train_run(
        cfg, tc, train_set, val_set=val_set, out_dir=out, resume=args.resume
    )
    (out / "runlog.json").write_text(json.dumps(log.to_dict(), indent=2) + "\n")
    best = max((e.val_dice for e in log.epochs), default=float("nan"))
    print(
        json.dumps(
            {
                "out": str(out),
                "epochs_run": len(log.epochs),
                "stop_reason": log.stop_reason,
                "final_train_loss": log.epochs[-1].train_loss if log.epochs else None,
                "best_val_dice": best,
            }
        )
    )
    return 0


def cmd_eval(args) -> int:
    cfg, params, _header, _tensors = load_model_checkpoint(args.ckpt)
    samples, _ = _load_split(args.data)
    if samples and samples[0][0].shape != cfg.input_size:
        raise ContractError(
            f"dataset images {samples[0][0].shape} do not match model input {cfg.input_size}"
        )
    preds = predict_masks(params, cfg, [s[0] for s in samples], batch_size=args.batch_size)
    report = evaluate(preds, [s[1] for s in samples], cfg.num_classes)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_predict(args) -> int:
    cfg, params, _header, _tensors = load_model_checkpoint(args.ckpt)
    img = read_tensor(args.image)
    if img.ndim not in (2, 3):
        raise ContractError(f"expected a (H, W) or (H, W, C) image, got rank {img.ndim}")
    h, w = img.shape[:2]
    if h % 32 or w % 32:
        raise ConfigurationError(f"image sides must be divisible by 32, got {h}x{w}")
    if (h, w) != cfg.input_size:
        raise ContractError(f"image {h}x{w} does not match model input {cfg.input_size}")
    mask = predict_masks(params, cfg, [img], batch_size=1)[0]
    write_tensor(args.out, mask.astype(np.uint8))
    print(json.dumps({"out": str(args.out), "shape": list(mask.shape)}))
    return 0


def cmd_gradcheck(args) -> int:
    components = args.components.split(",") if args.components else None
    report = checks.run_gradient_suite(
        seed=_env_seed(args.seed), eps=args.eps, components=components
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["pass"] else 2


def _bench_inputs(kernel: str, n: int, d: int, ratio: int, rng):
    x = Tensor(rng.normal(size=(1, n, d)) * 0.1)
    if kernel == "standard":
        return lambda: standard_attention(x, x, x)
    if kernel == "efficient":
        p = EfficientAttentionParams(
            w_q=Tensor(rng.normal(size=(d, d // 2)) * 0.1),
            w_k=Tensor(rng.normal(size=(d, d // 2)) * 0.1),
            w_v=Tensor(rng.normal(size=(d, d)) * 0.1),
            w_out=Tensor(rng.normal(size=(d, d)) * 0.1),
        )
        return lambda: efficient_attention(x, p)
    p = ReducedAttentionParams(
        heads=4,
        ratio=ratio,
        w_q=Tensor(rng.normal(size=(d, d)) * 0.1),
        w_k=Tensor(rng.normal(size=(d, d)) * 0.1),
        w_v=Tensor(rng.normal(size=(d, d)) * 0.1),
        w_out=Tensor(rng.normal(size=(d, d)) * 0.1),
        w_reduce=Tensor(rng.normal(size=(d * ratio, d)) * 0.1),
    )
    return lambda: reduced_spatial_attention(x, p)


def _bench_wall_ns(fn, repeats: int) -> int:
    fn()  # warm caches before timing
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return int(best)


def cmd_bench(args) -> int:
    ns = [int(v) for v in args.n.split(",")]
    ratios = [int(v) for v in args.R.split(",")]
    if any(n < 2 for n in ns):
        raise ConfigurationError(f"token counts must be >= 2, got {ns}")
    d = args.d
    rng = np.random.default_rng(0)
    rows = []
    flops_by_kernel: dict[str, list[int]] = {"standard": [], "efficient": []}
    reduced_quadratic: dict[int, dict[int, int]] = {}
    for n in ns:
        fl_std = standard_attention_flops(n, d, d)["total"]
        fl_eff = efficient_attention_flops(n, d)["total"]
        flops_by_kernel["standard"].append(fl_std)
        flops_by_kernel["efficient"].append(fl_eff)
        rows.append(("standard", n, d, 1, fl_std, _bench_wall_ns(_bench_inputs("standard", n, d, 1, rng), args.repeats)))
        rows.append(("efficient", n, d, 1, fl_eff, _bench_wall_ns(_bench_inputs("efficient", n, d, 1, rng), args.repeats)))
        for r in ratios:
            counts = reduced_attention_flops(n, d, r, heads=4)
            reduced_quadratic.setdefault(n, {})[r] = counts["quadratic"]
            rows.append(("reduced", n, d, r, counts["total"], _bench_wall_ns(_bench_inputs("reduced", n, d, r, rng), args.repeats)))

    csv_lines = ["kernel,n,d,R,flops,wall_ns"]
    csv_lines += [",".join(str(v) for v in row) for row in rows]
    csv_text = "\n".join(csv_lines) + "\n"

    # dominant-term cost of compression ratio r relative to no compression
    ratio_vs_r1 = {}
    for r in ratios:
        if r == 1:
            continue
        vals = [
            reduced_quadratic[n][r] / reduced_attention_flops(n, d, 1, heads=4)["quadratic"]
            for n in ns
        ]
        ratio_vs_r1[str(r)] = float(np.mean(vals))
    summary = {
        "n": ns,
        "d": d,
        "flops_exponent": {
            "standard": fit_exponent(ns, flops_by_kernel["standard"]),
            "efficient": fit_exponent(ns, flops_by_kernel["efficient"]),
        },
        "reduced_quadratic_ratio_vs_r1": ratio_vs_r1,
    }
    if args.out:
        Path(args.out).write_text(csv_text)
        summary["csv"] = str(args.out)
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        sys.stdout.write(csv_text)
        print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return 0


# --------------------------------------------------------------------------
# parser wiring

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdae", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--val-count", type=int, default=0)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a model")
    tp.add_argument("--config", required=True)
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--resume", default=None)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", default=None)
    ep.add_argument("--batch-size", type=int, default=8)
    ep.set_defaults(func=cmd_eval)

    pp = sub.add_parser("predict", help="predict a label mask for one image")
    pp.add_argument("--ckpt", required=True)
    pp.add_argument("--image", required=True)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_predict)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--eps", type=float, default=1e-4)
    gp.add_argument("--components", default=None, help="comma-separated subset")
    gp.set_defaults(func=cmd_gradcheck)

    bp = sub.add_parser("bench", help="attention scaling benchmark")
    bp.add_argument("--n", default="64,128,256,512,1024")
    bp.add_argument("--d", type=int, default=64)
    bp.add_argument("--R", default="1,2,4")
    bp.add_argument("--repeats", type=int, default=3)
    bp.add_argument("--out", default=None, help="write the CSV here instead of stdout")
    bp.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ValueError, OSError) as e:
        # covers contract, configuration, dimension, parameter, and
        # tensor-file errors plus filesystem failures
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ArithmeticError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())

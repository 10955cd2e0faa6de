"""Command-line entry points for the pipeline.

Subcommands: factorize, reconstruct, train, sample, eval, cost, run.
All exit 0 on success and 1 on any reported error; file formats are the
binary grid/pyramid/checkpoint containers plus JSON manifests.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import factorize as fz
from .cost import CostModelParams, StageCost, flops_cost
from .errors import MsfError
from .experiment import load_experiment_config, run_experiment
from .grid import load_grid, save_grid
from .metrics import eval_metrics, median_bandwidth, rbf_mmd2
from .sampler import SampleConfig, generate
from .training import prepare_training_set, train_stage
from .velocity import init_params, load_checkpoint, save_checkpoint


def _cmd_factorize(args) -> int:
    image = load_grid(args.input)
    schedule = fz.ScaleSchedule.parse(args.scales)
    codec = fz.Codec.parse(args.codec)
    pyramid = fz.extract_residuals(image, None, schedule, codec)
    fz.save_pyramid(args.out, pyramid)
    print(f"wrote {len(schedule)} residual scales to {args.out}")
    return 0


def _cmd_reconstruct(args) -> int:
    pyramid = fz.load_pyramid(args.input)
    save_grid(args.out, fz.reconstruct(pyramid))
    print(f"wrote reconstruction to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_experiment_config(args.config)
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stage_cfg = config.stage0 if args.stage == 0 else config.stage1
    if args.stage == 1 and args.resume is None and not stage_cfg.joint_from_scratch:
        raise MsfError(
            "stage 1 needs --resume with a stage-0 checkpoint "
            "(or joint_from_scratch = true in [train])"
        )
    if args.resume is not None:
        params = load_checkpoint(args.resume, expected_config=config.model)
    else:
        params = init_params(config.model, seed=stage_cfg.seed)

    from .dataset import synth_dataset

    data = synth_dataset(config.dataset)
    items = prepare_training_set(data.grids(), config.schedule, config.codec)
    t0 = time.perf_counter()
    result = train_stage(
        params, items, stage_cfg, stage0_checkpoint=args.resume is not None
    )
    seconds = time.perf_counter() - t0

    ckpt = out / f"stage{args.stage}.msfc"
    save_checkpoint(ckpt, params)
    losses = out / f"stage{args.stage}_losses.csv"
    header = "step,total," + ",".join(f"scale{s}" for s in sorted(result.scale_curves))
    rows = [header]
    for i, total in enumerate(result.loss_curve):
        vals = [f"{result.scale_curves[s][i]:.8e}" for s in sorted(result.scale_curves)]
        rows.append(",".join([str(i), f"{total:.8e}", *vals]))
    losses.write_text("\n".join(rows) + "\n", encoding="utf-8")

    manifest = configparser.ConfigParser(interpolation=None)
    manifest["run"] = {
        "stage": str(args.stage),
        "steps": str(stage_cfg.steps),
        "seed": str(stage_cfg.seed),
        "seconds": f"{seconds:.3f}",
        "final_loss": f"{result.loss_curve[-1]:.8e}",
        "converged": str(result.converged).lower(),
        "loss_log": losses.name,
        "checkpoint": ckpt.name,
        "config": str(args.config),
        "resume": str(args.resume) if args.resume else "",
    }
    with open(out / f"stage{args.stage}_run.ini", "w", encoding="utf-8") as f:
        manifest.write(f)
    print(f"stage {args.stage}: {stage_cfg.steps} steps, "
          f"final loss {result.loss_curve[-1]:.6f}, checkpoint {ckpt}")
    return 0


def _parse_pairs(steps: str, cfg: str) -> tuple[tuple[int, ...], tuple[float, ...]]:
    return (
        tuple(int(s) for s in steps.split(",")),
        tuple(float(g) for g in cfg.split(",")),
    )


def _cmd_sample(args) -> int:
    torch.set_num_threads(args.threads)
    params = load_checkpoint(args.ckpt)
    steps, guidance = _parse_pairs(args.steps, args.cfg)
    schedule = fz.ScaleSchedule(params.config.scale_sizes)
    codec = fz.Codec.parse(args.codec)
    config = SampleConfig(
        steps=steps, guidance=guidance, seed=args.seed,
        schedule=schedule, codec=codec,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = generate(params, args.class_id, config)
    seconds = time.perf_counter() - t0
    save_grid(out / "latent.lgrid", result.latent)
    save_grid(out / "image.lgrid", result.image)
    files = {"latent": "latent.lgrid", "image": "image.lgrid"}
    for i, r in enumerate(result.residuals):
        name = f"residual{i}.lgrid"
        save_grid(out / name, r)
        files[f"residual{i}"] = name
    for i, p in enumerate(result.priors):
        name = f"prior{i + 1}.lgrid"
        save_grid(out / name, p)
        files[f"prior{i + 1}"] = name
    manifest = {
        "class": args.class_id,
        "steps": list(steps),
        "guidance": list(guidance),
        "seed": args.seed,
        "evaluations": result.evaluations,
        "seconds": round(seconds, 3),
        "files": files,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    print(f"sampled class {args.class_id} in {seconds:.2f}s "
          f"({result.evaluations} network evaluations) -> {out}")
    return 0


def _cmd_eval(args) -> int:
    samples = fz.load_grid_set(args.samples)
    reference = fz.load_grid_set(args.reference)
    x = np.stack([g.data for g in samples])
    y = np.stack([g.data for g in reference])
    bandwidth = args.bandwidth if args.bandwidth > 0 else median_bandwidth(x, y)
    report = eval_metrics(x, y, bandwidth)
    payload = dict(report.as_dict(), mmd2=rbf_mmd2(x, y, bandwidth),
                   bandwidth=bandwidth)
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _parse_stage(text: str) -> StageCost:
    parts = text.split(":")
    if len(parts) != 3 or parts[2] not in ("cfg", "nocfg"):
        raise MsfError(
            f"bad stage {text!r}, expected tokens:steps:cfg or tokens:steps:nocfg"
        )
    return StageCost(int(parts[0]), int(parts[1]), parts[2] == "cfg")


def _cmd_cost(args) -> int:
    model = CostModelParams(args.depth, args.width)
    stages = [_parse_stage(s) for s in args.stage]
    total = flops_cost(model, stages)
    payload = {"depth": args.depth, "width": args.width, "flops": total}
    if args.baseline:
        base = flops_cost(model, [_parse_stage(s) for s in args.baseline])
        payload["baseline_flops"] = base
        payload["speedup"] = base / total
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_run(args) -> int:
    config_text = Path(args.config).read_text(encoding="utf-8")
    config = load_experiment_config(args.config)
    result = run_experiment(
        config, args.out, threads=args.threads, config_text=config_text
    )
    mean_err = max(result.report.class_mean_error)
    print(f"run complete: out={result.out_dir} "
          f"max class mean error {mean_err:.4f}, mmd2 {result.mmd2:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msf",
        description="multi-scale residual factorization diffusion pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("factorize", help="decompose a grid into residual scales")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scales", required=True, help="h0xw0,...,hNxwN")
    p.add_argument("--codec", default="identity")
    p.add_argument("--out", required=True, help="output .msfp container")
    p.set_defaults(func=_cmd_factorize)

    p = sub.add_parser("reconstruct", help="rebuild the full grid from residuals")
    p.add_argument("--in", dest="input", required=True, help="input .msfp container")
    p.add_argument("--out", required=True, help="output .lgrid file")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("train", help="train one stage from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(0, 1), required=True)
    p.add_argument("--resume", default=None, help="stage-0 checkpoint for stage 1")
    p.add_argument("--out", default="runs/train")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate one sample from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--steps", required=True, help="per-scale, e.g. 100,20")
    p.add_argument("--cfg", required=True, help="per-scale guidance, e.g. 1.3,1.0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--codec", default="identity")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="compare two grid sets")
    p.add_argument("--samples", required=True, help=".msfp set")
    p.add_argument("--reference", required=True, help=".msfp set")
    p.add_argument("--bandwidth", type=float, default=0.0,
                   help="RBF bandwidth; 0 = median heuristic")
    p.add_argument("--out", default=None, help="optional metrics JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cost", help="analytic FLOP cost of a sampling schedule")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--stage", action="append", required=True,
                   help="tokens:steps:{cfg|nocfg}, repeatable")
    p.add_argument("--baseline", action="append", default=[],
                   help="baseline stages for a speedup ratio")
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("run", help="full experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MsfError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

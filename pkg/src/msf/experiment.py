"""End-to-end experiment orchestration driven by an INI config.

A config file has [dataset] [model] [train] [sample] sections plus an
optional [cost] section; unknown sections and keys are rejected so typos
fail loudly instead of silently using a default. run_experiment wires
dataset -> factorize -> two-stage training -> autoregressive sampling ->
metrics and leaves a re-runnable manifest in the output directory.
"""

from __future__ import annotations

import configparser
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .cost import CostModelParams, StageCost, flops_cost
from .dataset import DatasetSpec, LabeledDataset, synth_dataset
from .errors import ConfigError
from .factorize import Codec, ScaleSchedule
from .grid import LatentGrid, save_grid
from .metrics import MetricsReport, eval_metrics, median_bandwidth, rbf_mmd2
from .sampler import DEFAULT_CHUNK, GenerationBatch, SampleConfig, generate_batch
from .training import TrainConfig, TrainResult, prepare_training_set, train_stage
from .velocity import VelocityConfig, VelocityField, init_params, save_checkpoint

_SECTION_KEYS = {
    "dataset": {
        "kind", "num_classes", "height", "width", "channels",
        "samples_per_class", "noise_std", "seed",
    },
    "model": {"schedule", "codec", "patch_sizes", "hidden_width", "depth", "heads"},
    "train": {
        "stage0_steps", "stage1_steps", "batch_sizes", "learning_rate",
        "cfg_dropout_prob", "seed", "loss_weights", "joint_from_scratch",
    },
    "sample": {"steps", "guidance", "seed", "samples_per_class", "chunk"},
    "cost": {
        "depth", "hidden_width", "baseline_tokens", "baseline_steps",
        "baseline_cfg", "stage_tokens", "stage_steps", "stage_cfg",
    },
}
_REQUIRED_SECTIONS = ("dataset", "model", "train", "sample")

_MISSING = object()


class _Section:
    def __init__(self, name: str, values: dict[str, str]):
        self.name = name
        self.values = values

    def _raw(self, key: str, default):
        if key in self.values:
            return self.values[key]
        if default is _MISSING:
            raise ConfigError(f"[{self.name}] is missing required key {key!r}")
        return default

    def get_str(self, key: str, default=None) -> str:
        return self._raw(key, _MISSING if default is None else default)

    def get_int(self, key: str, default=None) -> int:
        v = self._raw(key, _MISSING if default is None else default)
        if isinstance(v, int):
            return v
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {v!r} is not an integer") from None

    def get_float(self, key: str, default=None) -> float:
        v = self._raw(key, _MISSING if default is None else default)
        if isinstance(v, float):
            return v
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {v!r} is not a number") from None

    def get_bool(self, key: str, default=None) -> bool:
        v = self._raw(key, _MISSING if default is None else default)
        if isinstance(v, bool):
            return v
        low = v.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key} = {v!r} is not a boolean")

    def get_ints(self, key: str, default=None) -> tuple[int, ...]:
        v = self._raw(key, _MISSING if default is None else default)
        if not isinstance(v, str):
            return v
        try:
            return tuple(int(part) for part in v.split(","))
        except ValueError:
            raise ConfigError(
                f"[{self.name}] {key} = {v!r} is not a comma list of integers"
            ) from None

    def get_floats(self, key: str, default=None) -> tuple[float, ...]:
        v = self._raw(key, _MISSING if default is None else default)
        if not isinstance(v, str):
            return v
        try:
            return tuple(float(part) for part in v.split(","))
        except ValueError:
            raise ConfigError(
                f"[{self.name}] {key} = {v!r} is not a comma list of numbers"
            ) from None

    def get_bools(self, key: str, default=None) -> tuple[bool, ...]:
        v = self._raw(key, _MISSING if default is None else default)
        if not isinstance(v, str):
            return v
        out = []
        for part in v.split(","):
            low = part.strip().lower()
            if low in ("true", "1", "yes", "on"):
                out.append(True)
            elif low in ("false", "0", "no", "off"):
                out.append(False)
            else:
                raise ConfigError(
                    f"[{self.name}] {key} = {v!r} is not a comma list of booleans"
                )
        return tuple(out)


@dataclass(frozen=True)
class CostSpec:
    params: CostModelParams
    baseline: tuple[StageCost, ...]
    stages: tuple[StageCost, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    model: VelocityConfig
    schedule: ScaleSchedule
    codec: Codec
    stage0: TrainConfig
    stage1: TrainConfig
    sample: SampleConfig
    samples_per_class: int
    chunk: int = DEFAULT_CHUNK
    cost: CostSpec | None = None


def parse_experiment_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config syntax: {exc}") from None
    if cp.defaults():
        raise ConfigError("keys are not allowed outside a section")
    for section in cp.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    for section in _REQUIRED_SECTIONS:
        if section not in cp:
            raise ConfigError(f"missing required section [{section}]")

    ds = _Section("dataset", dict(cp["dataset"]))
    dataset = DatasetSpec(
        height=ds.get_int("height"),
        width=ds.get_int("width"),
        channels=ds.get_int("channels"),
        num_classes=ds.get_int("num_classes"),
        samples_per_class=ds.get_int("samples_per_class"),
        kind=ds.get_str("kind", "checker-frequencies"),
        noise_std=ds.get_float("noise_std", 0.1),
        seed=ds.get_int("seed", 0),
    )

    md = _Section("model", dict(cp["model"]))
    schedule = ScaleSchedule.parse(md.get_str("schedule"))
    codec = Codec.parse(md.get_str("codec", "identity"))
    patch_sizes = md.get_ints("patch_sizes")
    model = VelocityConfig(
        channels=dataset.channels,
        scale_sizes=schedule.sizes,
        patch_sizes=patch_sizes,
        hidden_width=md.get_int("hidden_width", 128),
        depth=md.get_int("depth", 4),
        heads=md.get_int("heads", 4),
        num_classes=dataset.num_classes,
    )
    r = codec.downsample_ratio
    h_n, w_n = schedule.full_size
    if (h_n * r, w_n * r) != (dataset.height, dataset.width):
        raise ConfigError(
            f"schedule full size {h_n}x{w_n} with codec ratio {r} does not "
            f"match dataset {dataset.height}x{dataset.width}"
        )

    tr = _Section("train", dict(cp["train"]))
    batch_sizes = tr.get_ints("batch_sizes", (64, 32))
    if len(batch_sizes) != len(schedule):
        raise ConfigError(
            f"need one batch size per scale: got {len(batch_sizes)} for "
            f"{len(schedule)} scales"
        )
    loss_weights = tr.get_floats("loss_weights", ())
    if loss_weights and len(loss_weights) != len(schedule):
        raise ConfigError(
            f"need one loss weight per scale: got {len(loss_weights)} for "
            f"{len(schedule)} scales"
        )
    common = dict(
        batch_sizes=batch_sizes,
        learning_rate=tr.get_float("learning_rate", 1e-4),
        cfg_dropout_prob=tr.get_float("cfg_dropout_prob", 0.1),
        seed=tr.get_int("seed", 0),
        loss_weights=loss_weights,
    )
    stage0 = TrainConfig(stage=0, steps=tr.get_int("stage0_steps"), **common)
    stage1 = TrainConfig(
        stage=1,
        steps=tr.get_int("stage1_steps"),
        joint_from_scratch=tr.get_bool("joint_from_scratch", False),
        **common,
    )

    sm = _Section("sample", dict(cp["sample"]))
    sample = SampleConfig(
        steps=sm.get_ints("steps"),
        guidance=sm.get_floats("guidance"),
        seed=sm.get_int("seed", 0),
        schedule=schedule,
        codec=codec,
    )
    samples_per_class = sm.get_int("samples_per_class")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    chunk = sm.get_int("chunk", DEFAULT_CHUNK)
    if chunk < 1:
        raise ConfigError("chunk must be >= 1")

    cost = None
    if "cost" in cp:
        co = _Section("cost", dict(cp["cost"]))
        params = CostModelParams(co.get_int("depth"), co.get_int("hidden_width"))
        baseline = (
            StageCost(
                co.get_int("baseline_tokens"),
                co.get_int("baseline_steps"),
                co.get_bool("baseline_cfg"),
            ),
        )
        tokens = co.get_ints("stage_tokens")
        steps = co.get_ints("stage_steps")
        flags = co.get_bools("stage_cfg")
        if not (len(tokens) == len(steps) == len(flags)):
            raise ConfigError("stage_tokens, stage_steps, stage_cfg lengths differ")
        stages = tuple(StageCost(t, s, f) for t, s, f in zip(tokens, steps, flags))
        cost = CostSpec(params, baseline, stages)

    return ExperimentConfig(
        dataset=dataset,
        model=model,
        schedule=schedule,
        codec=codec,
        stage0=stage0,
        stage1=stage1,
        sample=sample,
        samples_per_class=samples_per_class,
        chunk=chunk,
        cost=cost,
    )


def load_experiment_config(path) -> ExperimentConfig:
    return parse_experiment_config(Path(path).read_text(encoding="utf-8"))


def _write_loss_csv(path: Path, result: TrainResult):
    scales = sorted(result.scale_curves)
    header = "step,total," + ",".join(f"scale{s}" for s in scales)
    lines = [header]
    for i, total in enumerate(result.loss_curve):
        row = [str(i), f"{total:.8e}"]
        row += [f"{result.scale_curves[s][i]:.8e}" for s in scales]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class RunResult:
    out_dir: Path
    params: VelocityField
    dataset: LabeledDataset
    stage0: TrainResult
    stage1: TrainResult
    samples: GenerationBatch
    report: MetricsReport
    mmd2: float
    manifest: dict


def run_experiment(
    config: ExperimentConfig,
    out_dir,
    threads: int = 1,
    config_text: str | None = None,
) -> RunResult:
    """Run the full pipeline and write artifacts under out_dir.

    Every stage appends its wall time and outputs to manifest.json; a
    failure is recorded there before the exception propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"status": "running", "stages": {}, "threads": threads}
    if config_text is not None:
        (out / "config.ini").write_text(config_text, encoding="utf-8")
        manifest["config"] = "config.ini"

    def mark(stage: str, t0: float, **extra):
        entry = {"seconds": round(time.perf_counter() - t0, 3)}
        entry.update(extra)
        manifest["stages"][stage] = entry

    try:
        torch.set_num_threads(threads)
        t0 = time.perf_counter()
        data = synth_dataset(config.dataset)
        items = prepare_training_set(data.grids(), config.schedule, config.codec)
        mark("dataset", t0, examples=len(items))

        params = init_params(config.model, seed=config.stage0.seed)

        t0 = time.perf_counter()
        r0 = train_stage(params, items, config.stage0)
        ckpt0 = out / "stage0.msfc"
        save_checkpoint(ckpt0, params)
        _write_loss_csv(out / "stage0_losses.csv", r0)
        mark(
            "train_stage0", t0,
            steps=config.stage0.steps,
            final_loss=r0.loss_curve[-1],
            converged=r0.converged,
            checkpoint=ckpt0.name,
            losses="stage0_losses.csv",
        )

        t0 = time.perf_counter()
        r1 = train_stage(params, items, config.stage1, stage0_checkpoint=True)
        ckpt1 = out / "stage1.msfc"
        save_checkpoint(ckpt1, params)
        _write_loss_csv(out / "stage1_losses.csv", r1)
        mark(
            "train_stage1", t0,
            steps=config.stage1.steps,
            final_loss=r1.loss_curve[-1],
            converged=r1.converged,
            checkpoint=ckpt1.name,
            losses="stage1_losses.csv",
        )

        t0 = time.perf_counter()
        k = config.dataset.num_classes
        class_ids = np.repeat(np.arange(k, dtype=np.int64), config.samples_per_class)
        batch = generate_batch(params, class_ids, config.sample, chunk=config.chunk)
        sample_files = []
        for c in range(k):
            name = f"sample_class{c}.lgrid"
            save_grid(out / name, LatentGrid(batch.images[c * config.samples_per_class]))
            sample_files.append(name)
        mark(
            "sample", t0,
            count=int(class_ids.size),
            evaluations=batch.evaluations,
            files=sample_files,
        )

        t0 = time.perf_counter()
        bandwidth = median_bandwidth(batch.images, data.images)
        report = eval_metrics(
            batch.images,
            data.images,
            bandwidth,
            sample_labels=class_ids,
            reference_labels=data.labels,
        )
        mmd2 = rbf_mmd2(batch.images, data.images, bandwidth)
        metrics_payload = dict(report.as_dict(), mmd2=mmd2, bandwidth=bandwidth)
        (out / "metrics.json").write_text(
            json.dumps(metrics_payload, indent=2) + "\n", encoding="utf-8"
        )
        mark("eval", t0, metrics="metrics.json")

        if config.cost is not None:
            baseline = flops_cost(config.cost.params, list(config.cost.baseline))
            ours = flops_cost(config.cost.params, list(config.cost.stages))
            manifest["cost"] = {
                "baseline_flops": baseline,
                "flops": ours,
                "speedup": baseline / ours,
            }

        manifest["status"] = "complete"
        return RunResult(out, params, data, r0, r1, batch, report, mmd2, manifest)
    except BaseException as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        (out / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
        )

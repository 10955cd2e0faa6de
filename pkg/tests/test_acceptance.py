"""Acceptance suite: one test per shipped guarantee, in order.

Each test prints a single "criterion N: PASS/FAIL (...)" line with the
measured numbers and asserts both the tolerance and the runtime budget.
The end-to-end run (criterion 8) trains the full toy model and takes
around fifteen minutes single-threaded.
"""

import json
import time

import numpy as np
import torch

from msf import (
    Codec,
    DatasetSpec,
    LatentGrid,
    ResidualPyramid,
    SampleConfig,
    ScaleSchedule,
    TrainConfig,
    VelocityConfig,
    eval_metrics,
    extract_priors,
    extract_residuals,
    euler_integrate,
    generate,
    generate_batch,
    init_params,
    make_example,
    median_bandwidth,
    prepare_training_set,
    rbf_mmd2,
    reconstruct,
    replay,
    rf_loss,
    rf_loss_and_grads,
    synth_dataset,
    train_stage,
)
from msf.cost import CostModelParams, StageCost, speedup_ratio
from msf.cli import main
from msf.grid import resize


def check(n: int, ok: bool, detail: str):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n}: {detail}"


def schedules_for(h: int, w: int):
    return [
        ScaleSchedule(((h // 2, w // 2), (h, w))),
        ScaleSchedule(((h // 4, w // 4), (h // 2, w // 2), (h, w))),
    ]


def test_criterion_1_exact_reconstruction():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for h, w, c in ((8, 8, 2), (16, 16, 1), (16, 16, 4)):
        for schedule in schedules_for(h, w):
            for _ in range(100):
                src = LatentGrid(rng.standard_normal((h, w, c), dtype=np.float32))
                rec = reconstruct(extract_residuals(src, None, schedule))
                num = float(np.linalg.norm(rec.data - src.data))
                den = float(np.linalg.norm(src.data))
                worst = max(worst, num / den)
    elapsed = time.perf_counter() - t0
    check(
        1,
        worst < 1e-4 and elapsed < 10.0,
        f"max relative error {worst:.2e}, {elapsed:.1f}s",
    )


def prefix_sum_prior_oracle(pyramid: ResidualPyramid) -> list[np.ndarray]:
    # brute force: for every scale, re-sum all coarser residuals at full
    # resolution from scratch, then downsample the sum to that scale
    schedule = pyramid.schedule
    h_n, w_n = schedule.full_size
    out = []
    for i in range(1, len(schedule)):
        ups = [
            resize(pyramid.residuals[j], h_n, w_n).data.astype(np.float64)
            for j in range(i)
        ]
        acc = LatentGrid(np.sum(np.stack(ups), axis=0).astype(np.float32))
        h_i, w_i = schedule[i]
        out.append(resize(acc, h_i, w_i).data)
    return out


def test_criterion_2_prior_duality():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        schedule = schedules_for(16, 16)[trial % 2]
        c = 1 + trial % 3
        residuals = [
            LatentGrid(rng.standard_normal((h, w, c), dtype=np.float32))
            for h, w in schedule.sizes
        ]
        pyramid = ResidualPyramid(schedule, residuals)
        got = extract_priors(pyramid)
        want = prefix_sum_prior_oracle(pyramid)
        for g, w_ in zip(got.priors, want):
            worst = max(worst, float(np.max(np.abs(g.data - w_))))
    elapsed = time.perf_counter() - t0
    check(2, worst <= 1e-6 and elapsed < 10.0,
          f"max abs gap {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_teacher_forcing_consistency():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst_prior, worst_latent = 0.0, 0.0
    for sizes in (((16, 16),), ((8, 8), (16, 16))):
        schedule = ScaleSchedule(sizes)
        for _ in range(20):
            src = LatentGrid(rng.standard_normal((16, 16, 2), dtype=np.float32))
            pyramid = extract_residuals(src, None, schedule)
            priors = extract_priors(pyramid)
            result = replay(pyramid)
            for got, want in zip(result.priors, priors.priors):
                worst_prior = max(
                    worst_prior, float(np.max(np.abs(got.data - want.data)))
                )
            rel = float(
                np.linalg.norm(result.latent.data - src.data)
                / np.linalg.norm(src.data)
            )
            worst_latent = max(worst_latent, rel)
    elapsed = time.perf_counter() - t0
    check(
        3,
        worst_prior <= 1e-6 and worst_latent <= 1e-4 and elapsed < 5.0,
        f"prior gap {worst_prior:.2e}, latent rel {worst_latent:.2e}, {elapsed:.1f}s",
    )


def test_criterion_4_gradient_correctness():
    t0 = time.perf_counter()
    config = VelocityConfig(
        channels=1,
        scale_sizes=((4, 4), (8, 8)),
        patch_sizes=(2, 2),
        hidden_width=16,
        depth=1,
        heads=2,
        num_classes=3,
    )
    params = init_params(config, seed=0).double()
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # the zero-initialized output head would hide upstream errors
        for p in params.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)

    rng = np.random.default_rng(404)
    schedule = ScaleSchedule(((4, 4), (8, 8)))
    images = [
        (LatentGrid(rng.standard_normal((8, 8, 1), dtype=np.float32)), k % 3)
        for k in range(2)
    ]
    items = prepare_training_set(images, schedule, Codec())
    examples = [
        make_example(it.pyramid, it.priors, it.class_id, s, rng)
        for it in items
        for s in (0, 1)
    ]
    _, grads = rf_loss_and_grads(params, examples)

    h = 1e-4
    idx_rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in params.named_parameters():
        an = grads[name].ravel()
        flat = p.detach().view(-1)
        sel = idx_rng.choice(flat.numel(), size=min(64, flat.numel()), replace=False)
        fd = np.zeros(sel.size)
        for j, i in enumerate(sel):
            with torch.no_grad():
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(rf_loss(params, examples).detach())
                flat[i] = orig - h
                down = float(rf_loss(params, examples).detach())
                flat[i] = orig
            fd[j] = (up - down) / (2 * h)
        an_sel = an[sel]
        rel = np.linalg.norm(fd - an_sel) / max(np.linalg.norm(an_sel), 1e-12)
        worst = max(worst, float(rel))
        assert rel < 1e-3, f"parameter group {name}: relative error {rel:.2e}"
    elapsed = time.perf_counter() - t0
    check(4, worst < 1e-3 and elapsed < 60.0,
          f"worst group relative error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_5_euler_solver_oracle():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    z1 = LatentGrid(rng.standard_normal((6, 6, 2), dtype=np.float32))
    c = LatentGrid(rng.standard_normal((6, 6, 2), dtype=np.float32))
    worst_linear, worst_const = 0.0, 0.0
    const_results = []
    for steps in (1, 10, 100):
        lin = euler_integrate(lambda z, t: z, z1, steps)
        want = z1.data.astype(np.float64) * (1.0 - 1.0 / steps) ** steps
        worst_linear = max(worst_linear, float(np.max(np.abs(lin.data - want))))
        const_results.append(euler_integrate(lambda z, t: c, z1, steps).data)
    for arr in const_results[1:]:
        worst_const = max(
            worst_const, float(np.max(np.abs(arr - const_results[0])))
        )
    elapsed = time.perf_counter() - t0
    check(
        5,
        worst_linear <= 1e-6 and worst_const <= 1e-6 and elapsed < 5.0,
        f"linear gap {worst_linear:.2e}, constant-field spread {worst_const:.2e}, "
        f"{elapsed:.1f}s",
    )


def test_criterion_6_evaluation_count_contract():
    t0 = time.perf_counter()
    schedule = ScaleSchedule(((8, 8), (16, 16)))
    config = VelocityConfig(
        channels=1, scale_sizes=schedule.sizes, patch_sizes=(2, 2)
    )
    params = init_params(config, seed=0)
    sample = SampleConfig(
        steps=(100, 20), guidance=(1.3, 1.0), seed=0, schedule=schedule
    )
    result = generate(params, 0, sample)
    elapsed = time.perf_counter() - t0
    check(
        6,
        result.evaluations == 220 and elapsed < 300.0,
        f"{result.evaluations} network evaluations, {elapsed:.1f}s",
    )


def test_criterion_7_speedup_reproduction():
    t0 = time.perf_counter()
    proxy = CostModelParams(depth=28, hidden_width=1152)
    baseline = [StageCost(1024, 100, True)]
    ours = [StageCost(144, 100, True), StageCost(1024, 20, False)]
    ratio = float(speedup_ratio(proxy, baseline, ours))
    elapsed = time.perf_counter() - t0
    check(
        7,
        3.8 <= ratio <= 5.0 and elapsed < 1.0,
        f"FLOP ratio {ratio:.4f} in [3.8, 5.0], {elapsed:.2f}s",
    )


def test_criterion_8_end_to_end_toy_generation():
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    schedule = ScaleSchedule(((8, 8), (16, 16)))
    data = synth_dataset(
        DatasetSpec(
            height=16, width=16, channels=1, num_classes=8,
            samples_per_class=256, kind="checker-frequencies",
            noise_std=0.1, seed=0,
        )
    )
    items = prepare_training_set(data.grids(), schedule)
    config = VelocityConfig(channels=1, scale_sizes=schedule.sizes, patch_sizes=(2, 2))
    params = init_params(config, seed=0)
    train_stage(params, items, TrainConfig(stage=0, steps=3000, seed=0))
    train_stage(
        params, items, TrainConfig(stage=1, steps=1000, seed=0),
        stage0_checkpoint=True,
    )

    ids = np.repeat(np.arange(8), 256)
    fast = generate_batch(
        params, ids,
        SampleConfig(steps=(50, 8), guidance=(1.3, 1.0), seed=0, schedule=schedule),
    )
    slow = generate_batch(
        params, ids,
        SampleConfig(steps=(50, 50), guidance=(1.3, 1.0), seed=0, schedule=schedule),
    )

    bandwidth = median_bandwidth(data.images, data.images)
    report = eval_metrics(
        fast.images, data.images, bandwidth,
        sample_labels=ids, reference_labels=data.labels,
    )
    mean_err = max(report.class_mean_error)
    mmd2_fast = rbf_mmd2(fast.images, data.images, bandwidth)
    mmd2_slow = rbf_mmd2(slow.images, data.images, bandwidth)
    # the unbiased estimator fluctuates below zero when the sets match;
    # discrepancy is its nonnegative part, so compare the clamped values
    few_step_ok = max(mmd2_fast, 0.0) <= 1.25 * max(mmd2_slow, 0.0)
    elapsed = time.perf_counter() - t0
    check(
        8,
        mean_err < 0.15 and few_step_ok and elapsed < 1800.0,
        f"max class mean error {mean_err:.4f} < 0.15, mmd2 fast {mmd2_fast:.2e} "
        f"vs 1.25 x slow {mmd2_slow:.2e}, {elapsed:.0f}s",
    )


def test_criterion_9_determinism(tmp_path):
    config_text = (
        "[dataset]\n"
        "num_classes = 4\nheight = 16\nwidth = 16\nchannels = 1\n"
        "samples_per_class = 8\nseed = 0\n"
        "[model]\n"
        "schedule = 8x8,16x16\npatch_sizes = 2,2\n"
        "hidden_width = 32\ndepth = 1\nheads = 2\n"
        "[train]\n"
        "stage0_steps = 5\nstage1_steps = 5\nbatch_sizes = 4,2\nseed = 0\n"
        "[sample]\n"
        "steps = 3,2\nguidance = 1.3,1.0\nseed = 0\nsamples_per_class = 2\n"
    )
    config = tmp_path / "config.ini"
    config.write_text(config_text, encoding="utf-8")
    t0 = time.perf_counter()
    for out in ("a", "b"):
        rc = main([
            "run", "--config", str(config),
            "--out", str(tmp_path / out), "--threads", "1",
        ])
        assert rc == 0
    grid_files = sorted(p.name for p in (tmp_path / "a").glob("*.lgrid"))
    assert grid_files, "run emitted no grid files"
    bitwise = all(
        (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in grid_files
    )
    ma = json.loads((tmp_path / "a" / "metrics.json").read_text())
    mb = json.loads((tmp_path / "b" / "metrics.json").read_text())
    metric_gap = max(
        abs(x - y)
        for ka in ("class_mean_error", "class_cov_error")
        for x, y in zip(ma[ka], mb[ka])
    )
    metric_gap = max(metric_gap, abs(ma["mmd"] - mb["mmd"]), abs(ma["mmd2"] - mb["mmd2"]))
    elapsed = time.perf_counter() - t0
    check(
        9,
        bitwise and metric_gap <= 1e-6,
        f"{len(grid_files)} grid files bitwise identical, metric gap "
        f"{metric_gap:.2e}, {elapsed:.1f}s",
    )

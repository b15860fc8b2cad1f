"""One test per acceptance criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py). The
expensive criteria share one toy run: the full variant trained for the
end-to-end check is reused by the ablation.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import ACCEPTANCE

from mfdv2v import config as C
from mfdv2v.denoiser import load_diffusion, smoothed_curve
from mfdv2v.phantom import PhantomParams, build_dataset, load_dataset
from mfdv2v.pipeline import Run, cmd_ablate, cmd_synth_data, cmd_train, responsiveness_probe
from mfdv2v.registration import RegistrationConfig, endpoint_error, train_registration

ROOT = Path(__file__).resolve().parents[1]


def record(name, ok, detail):
    ACCEPTANCE.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


def run_suite(name, targets, limit_s):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *targets],
        cwd=ROOT,
        capture_output=True,
        text=True,
    )
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and dt < limit_s
    record(name, ok, f"{tail} in {dt:.1f} s (limit {limit_s:.0f} s)")


def test_diffusion_math_suite():
    run_suite("diffusion math suite", ["tests/test_diffusion.py"], 60)


def test_registration_suite():
    run_suite("registration suite", ["tests/test_registration.py"], 300)


def test_stme_denoiser_suite():
    run_suite("STME/denoiser suite", ["tests/test_stme.py", "tests/test_denoiser.py"], 120)


def test_metrics_suite():
    run_suite("metrics suite", ["tests/test_metrics.py"], 120)


def test_io_suite():
    run_suite("I/O round trip and rerun hashes", ["tests/test_tensorio.py", "tests/test_cli.py::test_pipeline_reproducible"], 600)


# -- registration accuracy ---------------------------------------------------


REG_RANGES = {
    "amplitude": [0.1, 0.3],
    "r_inner": [4.0, 6.0],
    "r_outer": [8.0, 11.0],
    "center_dx": [-2.0, 2.0],
    "center_dy": [-2.0, 2.0],
}


@pytest.mark.slow
def test_registration_accuracy(tmp_path):
    t0 = time.process_time()
    base = PhantomParams(height=32, width=32, frames=8)
    build_dataset(16, REG_RANGES, tmp_path / "train", seed=0, base=base)
    build_dataset(8, REG_RANGES, tmp_path / "test", seed=1, base=base)
    train = load_dataset(tmp_path / "train")
    test = load_dataset(tmp_path / "test")
    seqs = np.stack([s.cine_like for s in train])
    net, _ = train_registration(seqs, RegistrationConfig(epochs=150, seed=0))
    with torch.no_grad():
        u = net.predict_displacement(torch.from_numpy(np.stack([s.cine_like for s in test])))
    gt = torch.from_numpy(np.stack([s.gt_displacement for s in test]))
    mask = torch.from_numpy(np.stack([s.masks[1:, ..., 0] for s in test]))
    epe = float(endpoint_error(u, gt, mask))
    zero = float(endpoint_error(torch.zeros_like(gt), gt, mask))
    reduction = 1 - epe / zero
    minutes = (time.process_time() - t0) / 60
    ok = reduction >= 0.5 and minutes < 10
    record(
        "registration accuracy",
        ok,
        f"held-out myocardial EPE {epe:.3f} px vs zero-motion {zero:.3f} px, reduction {100 * reduction:.1f}% (need >= 50%), {minutes:.1f} CPU-min (limit 10)",
    )


# -- toy end-to-end and ablation --------------------------------------------------


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    cfg = C.resolve_config(preset="ablation")
    run = Run(cfg, out=tmp_path_factory.mktemp("toy"))
    t0 = time.process_time()
    cmd_synth_data(run)
    paths = cmd_train(run, "full")
    return {"run": run, "cfg": cfg, "paths": paths, "train_cpu": time.process_time() - t0}


@pytest.mark.slow
def test_toy_end_to_end(toy_run):
    t0 = time.process_time()
    cfg = toy_run["cfg"]
    model, sched, manifest = load_diffusion(toy_run["paths"]["diffusion"])
    curve = manifest["loss_curve"]
    smooth = smoothed_curve(curve, 100)
    base = PhantomParams.from_dict(cfg["data"]["phantom"])
    probe = responsiveness_probe(model, sched, base, amplitude=0.3, n_seeds=20, seed=cfg["seed"])
    minutes = (toy_run["train_cpu"] + time.process_time() - t0) / 60
    ok = len(curve) == 2000 and smooth[-1] < 0.9 and probe["p"] < 0.05 and minutes < 30
    record(
        "toy end-to-end",
        ok,
        f"{len(curve)} steps, first loss {curve[0]:.3f}, smoothed final {smooth[-1]:.4f} (need < 0.9); "
        f"frame diff strong {probe['strong'].mean():.4f} vs zero {probe['zero'].mean():.4f}, paired p = {probe['p']:.2e} (need < 0.05); "
        f"{minutes:.1f} CPU-min (limit 30)",
    )


@pytest.mark.slow
def test_toy_ablation(toy_run):
    t0 = time.process_time()
    report = cmd_ablate(toy_run["run"])
    minutes = (toy_run["train_cpu"] + time.process_time() - t0) / 60
    beats = report["full_beats"]
    rows = report["metrics"]
    ok = all(v >= 3 for v in beats.values()) and minutes < 90
    table = "; ".join(f"{v}: " + ", ".join(f"{m} {rows[v][m]:.4g}" for m in rows[v]) for v in rows)
    record(
        "toy ablation",
        ok,
        f"full beats {beats} of 4 metrics (need >= 3 each); {table}; {minutes:.1f} CPU-min incl. full training (limit 90)",
    )

"""Stage orchestration for synthesis, training, sampling and evaluation.

A run directory holds one subdirectory per stage output. Each carries a
``stage.json`` marker with a key (hash of the stage's configuration and its
inputs' keys) and the sha256 of every artifact it wrote. ``resume`` skips a
stage whose marker matches both.

Training motion comes from the trained registration network applied to
the cine videos; sampling motion comes from the reference set's ground
truth displacement (the stand-in for a DENSE acquisition) or a displacement
file. The two sources are never swapped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .denoiser import DenoiserConfig, DiffusionConfig, load_diffusion, sample, smoothed_curve, train_diffusion
from .diffusion import make_noise_schedule
from .metrics import METRICS, format_table, metric_report
from .phantom import PhantomParams, build_dataset, generate_sample, load_dataset
from .registration import RegistrationConfig, load_registration, smoothed, train_registration
from .stme import STMEConfig
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

REFERENCE_SEED_OFFSET = 1_000_003


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """A run directory plus the resolved config that produced it."""

    def __init__(self, cfg: dict, out=None, resume: bool = False, root="runs"):
        self.cfg = cfg
        self.id = C.run_id(cfg)
        if out is None:
            stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
            out = Path(root) / f"{stamp}-{self.id}"
        self.dir = Path(out)
        self.resume = resume
        # stages finished by this process; shared stages are not redone within one invocation
        self._finished: set[tuple[str, str]] = set()
        self.dir.mkdir(parents=True, exist_ok=True)
        snapshot = self.dir / "config.resolved.json"
        if resume and snapshot.exists():
            old = json.loads(snapshot.read_text())
            if old != json.loads(json.dumps(cfg)):
                log.warning("config differs from the snapshot in %s; stages with changed keys will rerun", self.dir)
        snapshot.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    # -- stage bookkeeping ---------------------------------------------------

    def stage_dir(self, *parts) -> Path:
        d = self.dir.joinpath(*parts)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def is_done(self, d: Path, key: str) -> bool:
        marker = d / "stage.json"
        if not marker.exists():
            return False
        if not self.resume and (str(d), key) not in self._finished:
            return False
        info = json.loads(marker.read_text())
        if info.get("key") != key:
            return False
        return all((d / p).exists() and sha256_file(d / p) == h for p, h in info["artifacts"].items())

    def mark_done(self, d: Path, stage: str, key: str, artifacts: list[str]) -> dict:
        info = {"stage": stage, "key": key, "run_id": self.id, "artifacts": {p: sha256_file(d / p) for p in sorted(artifacts)}}
        (d / "stage.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        self._finished.add((str(d), key))
        return info

    @staticmethod
    def key_of(d: Path) -> str:
        return json.loads((d / "stage.json").read_text())["key"]

    def require(self, d: Path, stage: str) -> str:
        if not (d / "stage.json").exists():
            raise StageError(stage, f"missing artifact {d}; run the {stage} stage first")
        return self.key_of(d)


# --------------------------------------------------------------------------
# Stage keys (what each stage's output depends on)


def _ltma_tag(cfg: dict) -> str:
    return "ltma" if cfg["registration"]["use_ltma"] else "noltma"


def _phantom_base(cfg: dict) -> PhantomParams:
    return PhantomParams.from_dict(cfg["data"]["phantom"])


# --------------------------------------------------------------------------
# Stages


def cmd_synth_data(run: Run) -> Path:
    cfg = run.cfg
    d = run.stage_dir("data")
    key = C.config_hash({"data": cfg["data"], "seed": cfg["seed"]})
    if run.is_done(d, key):
        log.info("data: up to date, skipping")
        return d / "train" / "manifest.json"
    base = _phantom_base(cfg)
    ranges = cfg["data"]["param_ranges"]
    build_dataset(cfg["data"]["n_samples"], ranges, d / "train", seed=cfg["seed"], base=base)
    build_dataset(cfg["data"]["n_reference"], ranges, d / "reference", seed=cfg["seed"] + REFERENCE_SEED_OFFSET, base=base)
    run.mark_done(d, "data", key, ["train/manifest.json", "reference/manifest.json"])
    return d / "train" / "manifest.json"


def _stack(samples, field: str) -> np.ndarray:
    return np.stack([getattr(s, field) for s in samples]).astype(np.float32)


def _train_set(run: Run):
    d = run.dir / "data"
    run.require(d, "data")
    return load_dataset(d / "train")


def _registration_config(cfg: dict) -> RegistrationConfig:
    return RegistrationConfig.from_dict({**cfg["registration"], "seed": cfg["seed"]})


def stage_registration(run: Run, cfg: dict) -> Path:
    tag = _ltma_tag(cfg)
    d = run.stage_dir("registration", tag)
    data_key = run.require(run.dir / "data", "data")
    key = C.config_hash({"registration": cfg["registration"], "seed": cfg["seed"], "data": data_key})
    ckpt = f"registration-{tag}.zip"
    if run.is_done(d, key):
        log.info("registration[%s]: up to date, skipping", tag)
        return d / ckpt
    cine = _stack(_train_set(run), "cine_like")
    extra = {"run_id": run.id, "preset": cfg["preset"], "stage_key": key}
    _, history = train_registration(cine, _registration_config(cfg), out_path=d / ckpt, extra_manifest=extra)
    _plot_curve(d / "loss.png", history, smoothed(history, 10), "registration loss", "epoch")
    run.mark_done(d, "registration", key, [ckpt])
    return d / ckpt


def _motion_with_rest_frame(u: np.ndarray, masks: np.ndarray | None) -> np.ndarray:
    """(N, T, H, W, 2) displacements -> (N, T+1, H, W, 2), frame 0 at rest, optionally masked."""
    out = np.concatenate([np.zeros_like(u[:, :1]), u], axis=1)
    if masks is not None:
        out = out * masks
    return out.astype(np.float32)


def stage_motion(run: Run, cfg: dict) -> Path:
    tag = _ltma_tag(cfg)
    reg_dir = run.dir / "registration" / tag
    reg_key = run.require(reg_dir, "registration")
    d = run.stage_dir("motion", tag)
    mask = cfg["diffusion"]["mask_motion"]
    key = C.config_hash({"registration": reg_key, "mask_motion": mask})
    if run.is_done(d, key):
        log.info("motion[%s]: up to date, skipping", tag)
        return d / "motion.mvt"
    net, _ = load_registration(reg_dir / f"registration-{tag}.zip")
    samples = _train_set(run)
    with torch.no_grad():
        u = net.predict_displacement(torch.from_numpy(_stack(samples, "cine_like"))).numpy()
    motion = _motion_with_rest_frame(u, _stack(samples, "masks") if mask else None)
    write_tensor(d / "motion.mvt", motion)
    run.mark_done(d, "motion", key, ["motion.mvt"])
    return d / "motion.mvt"


def _diffusion_config(cfg: dict) -> DiffusionConfig:
    dc = cfg["diffusion"]
    return DiffusionConfig(
        denoiser=DenoiserConfig.from_dict(dc["denoiser"]),
        stme=STMEConfig.from_dict(cfg["stme"]),
        lr=dc["lr"],
        batch_size=dc["batch_size"],
        steps=dc["steps"],
        seed=cfg["seed"],
        variance=dc["variance"],
        log_every=dc["log_every"],
    )


def _schedule(cfg: dict):
    s = cfg["diffusion"]["schedule"]
    return make_noise_schedule(s["kind"], s["T"], s.get("params") or {})


def stage_diffusion(run: Run, cfg: dict, variant: str) -> Path:
    cond = cfg["diffusion"]["denoiser"]["cond_mode"] != "none"
    d = run.stage_dir("diffusion", variant)
    parts = {"diffusion": cfg["diffusion"], "stme": cfg["stme"], "seed": cfg["seed"], "data": run.require(run.dir / "data", "data")}
    if cond:
        parts["motion"] = run.require(run.dir / "motion" / _ltma_tag(cfg), "motion")
    key = C.config_hash(parts)
    ckpt = f"diffusion-{variant}.zip"
    if run.is_done(d, key):
        log.info("diffusion[%s]: up to date, skipping", variant)
        return d / ckpt
    videos = _stack(_train_set(run), "cine_like") * 2 - 1
    motion = read_tensor(run.dir / "motion" / _ltma_tag(cfg) / "motion.mvt") if cond else None
    extra = {"run_id": run.id, "preset": cfg["preset"], "variant": variant, "stage_key": key}
    _, history = train_diffusion(videos, motion, _schedule(cfg), _diffusion_config(cfg), out_path=d / ckpt, extra_manifest=extra)
    _plot_curve(d / "loss.png", history, smoothed_curve(history, 100), f"diffusion loss ({variant})", "step")
    run.mark_done(d, "diffusion", key, [ckpt])
    return d / ckpt


def cmd_train(run: Run, variant: str = "full") -> dict:
    cfg = C.variant_config(run.cfg, variant)
    run.require(run.dir / "data", "data")
    out = {}
    if cfg["diffusion"]["denoiser"]["cond_mode"] != "none":
        out["registration"] = stage_registration(run, cfg)
        out["motion"] = stage_motion(run, cfg)
    out["diffusion"] = stage_diffusion(run, cfg, variant)
    return out


# --------------------------------------------------------------------------
# Sampling


def reference_motion(run: Run, cfg: dict, n: int) -> tuple[np.ndarray, list[int]]:
    """Ground-truth displacement of the reference phantoms, cycled to ``n`` items."""
    d = run.dir / "data"
    run.require(d, "data")
    ref = load_dataset(d / "reference")
    idx = [i % len(ref) for i in range(n)]
    masks = _stack(ref, "masks") if cfg["diffusion"]["mask_motion"] else None
    motion = _motion_with_rest_frame(_stack(ref, "gt_displacement"), masks)
    return motion[idx], idx


def load_motion_file(path) -> np.ndarray:
    """An MVT1 displacement file (T, H, W, 2) or (N, T, H, W, 2), relative to frame 0."""
    u = read_tensor(path)
    if u.ndim == 4:
        u = u[None]
    if u.ndim != 5 or u.shape[-1] != 2:
        raise ValueError(f"{path}: expected (N, T, H, W, 2) displacements, got {u.shape}")
    return _motion_with_rest_frame(u.astype(np.float32), None)


def _sample_batches(model, sched, motion, n, shape, seed, batch_size):
    out = []
    for start in range(0, n, batch_size):
        stop = min(n, start + batch_size)
        if motion is None:
            out.append(sample(model, sched, seed=seed, n=stop - start, shape=shape, first_item=start))
        else:
            out.append(sample(model, sched, torch.from_numpy(motion[start:stop]), seed=seed, first_item=start))
    return torch.cat(out).numpy()


def cmd_sample(run: Run, variant: str = "full", motion_path=None, n: int | None = None) -> Path:
    cfg = C.variant_config(run.cfg, variant)
    ckpt_dir = run.dir / "diffusion" / variant
    diff_key = run.require(ckpt_dir, "diffusion")
    model, sched, manifest = load_diffusion(ckpt_dir / f"diffusion-{variant}.zip")
    expected = _schedule(cfg)
    if expected.to_json() != sched.to_json():
        raise StageError("sample", "configured diffusion schedule does not match the checkpoint")
    shape = tuple(manifest["video_shape"])
    n = n or cfg["sampling"]["n_samples"]
    src = "reference" if motion_path is None else str(motion_path)
    motion = None
    if model.cond_mode != "none":
        if motion_path is None:
            motion, _ = reference_motion(run, cfg, n)
        else:
            motion = load_motion_file(motion_path)
            motion = motion[[i % len(motion) for i in range(n)]]
        if tuple(motion.shape[1:4]) != shape:
            raise StageError("sample", f"motion shape {tuple(motion.shape[1:4])} does not match checkpoint videos {shape}")
    sub = "samples" if motion_path is None else f"samples-{hashlib.sha256(Path(motion_path).read_bytes()).hexdigest()[:8]}"
    d = run.stage_dir(sub, variant)
    key = C.config_hash({"diffusion": diff_key, "sampling": cfg["sampling"], "n": n, "source": src, "seed": cfg["seed"],
                         "motion": None if motion is None else hashlib.sha256(motion.tobytes()).hexdigest()})
    if run.is_done(d, key):
        log.info("sample[%s]: up to date, skipping", variant)
        return d
    x = _sample_batches(model, sched, motion, n, shape, cfg["seed"], cfg["sampling"]["batch_size"])
    videos = ((x + 1) / 2).astype(np.float32)
    write_tensor(d / "samples.mvt", videos)
    save_grid_png(d / "grid.png", videos)
    save_contact_gif(d / "contact.gif", videos)
    (d / "source.json").write_text(json.dumps({"motion_source": src, "n": n, "variant": variant}, indent=2) + "\n")
    run.mark_done(d, "sample", key, ["samples.mvt", "grid.png", "contact.gif", "source.json"])
    return d


# --------------------------------------------------------------------------
# Evaluation


def reference_videos(run: Run) -> np.ndarray:
    d = run.dir / "data"
    run.require(d, "data")
    return _stack(load_dataset(d / "reference"), "cine_like")


def rank_variants(rows: dict[str, dict]) -> dict[str, int]:
    """Number of metrics on which each variant is best (smallest magnitude)."""
    wins = {n: 0 for n in rows}
    for m in METRICS:
        best = min(rows, key=lambda n: abs(rows[n][m]))
        wins[best] += 1
    return wins


def cmd_evaluate(run: Run, variants=None) -> dict:
    variants = list(variants or run.cfg["eval"]["variants"])
    ref = reference_videos(run)
    rows = {}
    for v in variants:
        d = run.dir / "samples" / v
        run.require(d, "sample")
        gen = read_tensor(d / "samples.mvt")
        if len(gen) < 2 or len(ref) < 2:
            raise StageError("evaluate", "need at least two generated and two reference videos")
        rows[v] = metric_report(gen, ref, seed=run.cfg["eval"]["extractor_seed"])
    report = {"run_id": run.id, "preset": run.cfg["preset"], "reference": "data/reference", "metrics": rows}
    if len(rows) > 1:
        report["wins"] = rank_variants(rows)
        if "full" in rows:
            others = [v for v in rows if v != "full"]
            report["full_beats"] = {
                o: sum(abs(rows["full"][m]) < abs(rows[o][m]) for m in METRICS) for o in others
            }
    (run.dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = format_table(rows)
    (run.dir / "report.txt").write_text(table + "\n")
    print(table)
    return report


def cmd_ablate(run: Run) -> dict:
    variants = run.cfg["eval"]["variants"]
    cmd_synth_data(run)
    for v in variants:
        cmd_train(run, v)
        cmd_sample(run, v)
    return cmd_evaluate(run, variants)


# --------------------------------------------------------------------------
# Motion-responsiveness probe


def responsiveness_probe(model, sched, base: PhantomParams, amplitude: float = 0.3, n_seeds: int = 20, seed: int = 0, mask: bool = True):
    """Frame-to-frame mean absolute difference of samples under strong vs zero motion.

    Both conditions share per-seed noise, so the comparison is paired.
    Returns the two difference vectors and a one-sided paired t-test.
    """
    from scipy import stats

    s = generate_sample(replace(base, amplitude=amplitude, noise=0.0, cine_noise=0.0))
    u = _motion_with_rest_frame(s.gt_displacement[None], s.masks[None] if mask else None)[0]
    strong = torch.from_numpy(u).expand(n_seeds, *u.shape)
    zero = torch.zeros_like(strong)
    diffs = []
    for m in (strong, zero):
        x = (sample(model, sched, m, seed=seed) + 1) / 2
        diffs.append((x[:, 1:] - x[:, :-1]).abs().mean(dim=(1, 2, 3, 4)).numpy())
    test = stats.ttest_rel(diffs[0], diffs[1], alternative="greater")
    return {"strong": diffs[0], "zero": diffs[1], "t": float(test.statistic), "p": float(test.pvalue)}


# --------------------------------------------------------------------------
# Figures


def _plot_curve(path, raw, smooth, title, xlabel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(len(raw)), raw, lw=0.6, alpha=0.5, label="raw")
    if len(smooth):
        off = len(raw) - len(smooth)
        ax.plot(np.arange(len(smooth)) + off, smooth, lw=1.5, label="smoothed")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _to_uint8(frame, scale):
    from PIL import Image

    img = Image.fromarray(np.clip(np.rint(frame * 255), 0, 255).astype(np.uint8), mode="L")
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def save_grid_png(path, videos: np.ndarray, max_rows: int = 8, scale: int = 4):
    """Rows are videos, columns frames."""
    from PIL import Image

    v = videos[:max_rows, ..., 0]
    n, t, h, w = v.shape
    sheet = Image.new("L", (t * w * scale, n * h * scale))
    for i in range(n):
        for j in range(t):
            sheet.paste(_to_uint8(v[i, j], scale), (j * w * scale, i * h * scale))
    sheet.save(path, format="PNG")


def save_contact_gif(path, videos: np.ndarray, cols: int = 8, scale: int = 4, ms: int = 150):
    """Animated GIF: each GIF frame tiles every video at one time step."""
    from PIL import Image

    v = videos[..., 0]
    n, t, h, w = v.shape
    rows = -(-n // cols)
    cols = min(cols, n)
    frames = []
    for j in range(t):
        sheet = Image.new("L", (cols * w * scale, rows * h * scale))
        for i in range(n):
            sheet.paste(_to_uint8(v[i, j], scale), ((i % cols) * w * scale, (i // cols) * h * scale))
        frames.append(sheet)
    frames[0].save(path, format="GIF", save_all=True, append_images=frames[1:], duration=ms, loop=0)

"""Desk-scale experiments on the toy world.

The separability experiment is the toolkit's core scientific check: train
the toy generator on caption-complete scenes, reconstruct held-out real and
fake scenes under their captions, and verify that reconstruction error
separates the classes — first as a single-feature score, then through the
trained fusion detector.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import ConditionEmbedding, HashTextEncoder
from .datasets import LABEL_FAKE, Manifest
from .errors import ParameterError
from .evaluation import (
    DetectorScorer,
    EvalReport,
    MeanSareScorer,
    ablation_grid,
    collect_pairs,
    evaluate,
)
from .fusion import AugmentationPolicy, TrainConfig, build_detector, train_detector
from .images import load_image
from .recon import ReconCache, ReconstructionConfig
from .schedule import NoiseSchedule, default_schedule
from .toyworld import (
    IdentityCodec,
    ToyDataset,
    ToyDenoiserBackend,
    make_dataset,
    train_toy_denoiser,
)

__all__ = [
    "SeparabilityConfig",
    "SeparabilityResult",
    "prepare_denoiser",
    "run_separability_experiment",
    "run_toy_ablation",
    "slice_manifest",
]

TOY_RESOLUTION = 64


@dataclass(frozen=True)
class SeparabilityConfig:
    """Sizes and knobs of the desk-scale pipeline. Defaults are tuned to
    finish on one CPU core in a few minutes while leaving clear margins."""

    n_denoiser_scenes: int = 300
    n_detector_train: int = 150  # per class
    n_eval: int = 200  # per class
    denoiser_epochs: int = 90
    denoiser_width: int = 16
    detector_epochs: int = 20
    detector_batch: int = 32
    detector_lr: float = 1e-3
    crop_size: int = 56
    strength: float = 0.5
    guidance_scale: float = 3.0
    max_steps: int = 50
    seed: int = 0


@dataclass
class SeparabilityResult:
    mean_sare_auc: float
    detector_acc: float
    detector_auc: float | None
    mean_sare_fake: float
    mean_sare_real: float
    report_mean_sare: EvalReport
    report_detector: EvalReport
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return sum(self.timings.values())


def slice_manifest(manifest: Manifest, per_class: int) -> Manifest:
    """First per_class entries of each label, preserving order."""
    kept, counts = [], {0: 0, 1: 0}
    for e in manifest.entries:
        if counts[e.label] < per_class:
            kept.append(e)
            counts[e.label] += 1
    if not kept:
        raise ParameterError("manifest slice is empty")
    from dataclasses import replace

    return replace(manifest, entries=tuple(kept))


def prepare_denoiser(
    workdir: str | Path,
    cfg: SeparabilityConfig,
    encoder: HashTextEncoder,
    schedule: NoiseSchedule,
) -> tuple[ToyDenoiserBackend, ToyDataset, list[tuple[int, int, float]]]:
    """Render the generator's training world (caption-complete scenes only)
    and fit the conditional denoiser on it."""
    workdir = Path(workdir)
    gen_data = make_dataset(
        n_real=0,
        n_fake=cfg.n_denoiser_scenes,
        fidelity=1.0,
        rng_seed=cfg.seed,
        out_dir=workdir / "generator_world",
        subset="toy",
        split="train",
        resolution=TOY_RESOLUTION,
    )
    samples: list[tuple[np.ndarray, ConditionEmbedding]] = []
    for e in gen_data.manifest.entries:
        img = load_image(e.path)
        cap = gen_data.captions[e.digest]
        samples.append((img, encoder.embed(cap.text)))
    backend, trace = train_toy_denoiser(
        samples,
        schedule,
        epochs=cfg.denoiser_epochs,
        rng_seed=cfg.seed,
        null_condition=encoder.null_embedding(),
        width=cfg.denoiser_width,
    )
    return backend, gen_data, trace


def run_separability_experiment(
    workdir: str | Path,
    cfg: SeparabilityConfig = SeparabilityConfig(),
    denoiser: ToyDenoiserBackend | None = None,
    schedule: NoiseSchedule | None = None,
) -> SeparabilityResult:
    """Full pipeline: generate -> train denoiser -> reconstruct -> train
    detector -> evaluate. Per-stage wall times are recorded so the runtime
    budget is checkable. A pre-trained denoiser can be injected to share
    work across experiments."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    schedule = schedule or default_schedule()
    encoder = HashTextEncoder()
    codec = IdentityCodec()
    cache = ReconCache(workdir / "recon_cache")
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    if denoiser is None:
        denoiser, _, _ = prepare_denoiser(workdir, cfg, encoder, schedule)
    timings["train_denoiser"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    det_data = make_dataset(
        cfg.n_detector_train, cfg.n_detector_train, 1.0, cfg.seed + 1,
        workdir / "detector_train", split="train", resolution=TOY_RESOLUTION,
    )
    eval_data = make_dataset(
        cfg.n_eval, cfg.n_eval, 1.0, cfg.seed + 2,
        workdir / "eval", split="test", resolution=TOY_RESOLUTION,
    )
    timings["generate"] = time.perf_counter() - t0

    recon_config = ReconstructionConfig(
        strength=cfg.strength,
        guidance_scale=cfg.guidance_scale,
        max_steps=cfg.max_steps,
        seed=cfg.seed,
    )

    t0 = time.perf_counter()
    train_rows = collect_pairs(
        det_data.manifest, det_data.captioner, encoder, codec, denoiser,
        recon_config, cache, schedule=schedule, long_side=TOY_RESOLUTION,
    )
    timings["reconstruct_train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    policy = AugmentationPolicy(
        crop_size=cfg.crop_size,
        noise_sigma=(0.0, 0.05),
        blur_kernel=3,
        blur_sigma=(0.1, 1.0),
        rotate_degrees=(-8.0, 8.0),
    )
    model = build_detector(input_size=cfg.crop_size, seed=cfg.seed)
    model, _ = train_detector(
        [(img, sare, label) for img, sare, label, _ in train_rows],
        TrainConfig(
            batch_size=cfg.detector_batch,
            learning_rate=cfg.detector_lr,
            epochs=cfg.detector_epochs,
            augmentation=policy,
            seed=cfg.seed,
        ),
        model,
    )
    timings["train_detector"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report_ms = evaluate(
        MeanSareScorer(), eval_data.manifest, eval_data.captioner, encoder, codec,
        denoiser, recon_config, cache, schedule=schedule, long_side=TOY_RESOLUTION,
    )
    report_det = evaluate(
        DetectorScorer(model), eval_data.manifest, eval_data.captioner, encoder, codec,
        denoiser, recon_config, cache, schedule=schedule, long_side=TOY_RESOLUTION,
    )
    timings["evaluate"] = time.perf_counter() - t0

    eval_rows = collect_pairs(
        eval_data.manifest, eval_data.captioner, encoder, codec, denoiser,
        recon_config, cache, schedule=schedule, long_side=TOY_RESOLUTION, offline=True,
    )
    fake_means = [float(np.mean(s)) for _, s, lbl, _ in eval_rows if lbl == LABEL_FAKE]
    real_means = [float(np.mean(s)) for _, s, lbl, _ in eval_rows if lbl != LABEL_FAKE]

    toy = next(r for r in report_ms.results if r.subset == "toy")
    toy_det = next(r for r in report_det.results if r.subset == "toy")
    return SeparabilityResult(
        mean_sare_auc=float(toy.auc),
        detector_acc=float(toy_det.acc),
        detector_auc=None if toy_det.auc is None else float(toy_det.auc),
        mean_sare_fake=float(np.mean(fake_means)),
        mean_sare_real=float(np.mean(real_means)),
        report_mean_sare=report_ms,
        report_detector=report_det,
        timings=timings,
    )


def run_toy_ablation(
    workdir: str | Path,
    eval_manifest: Manifest,
    captioner,
    denoiser: ToyDenoiserBackend,
    strengths=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8),
    guidance_scales=(3.0,),
    base_seed: int = 0,
    schedule: NoiseSchedule | None = None,
) -> tuple[dict, Path]:
    """Strength/guidance sweep on toy data with the mean-difference scorer;
    writes ablation.csv and a summary plot next to the cache."""
    workdir = Path(workdir)
    schedule = schedule or default_schedule()
    encoder = HashTextEncoder()
    csv_path = workdir / "ablation.csv"
    grid = ablation_grid(
        MeanSareScorer(),
        eval_manifest,
        captioner,
        encoder,
        IdentityCodec(),
        denoiser,
        ReconstructionConfig(seed=base_seed),
        ReconCache(workdir / "recon_cache"),
        strengths=strengths,
        guidance_scales=guidance_scales,
        schedule=schedule,
        long_side=TOY_RESOLUTION,
        csv_path=csv_path,
        plot_path=workdir / "ablation.png",
    )
    return grid, csv_path

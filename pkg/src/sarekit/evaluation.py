"""Metrics, per-subset report assembly, and the strength/guidance ablation grid.

Accuracy uses a fixed threshold with a >= boundary; AUC is the
Mann-Whitney statistic with half-credit ties, computed by sort-and-rank.
Reports carry per-subset numbers plus macro averages and serialize to
deterministic JSON (and a Markdown table for reading).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ._version import __version__
from .conditioning import CaptionerBackend, TextEncoderBackend, generate_caption
from .datasets import Manifest
from .errors import CacheMissError, ParameterError, UndefinedMetricError
from .fusion import DetectorModel, center_crop, detector_scores
from .images import ImageArray, load_image
from .recon import (
    LatentCodec,
    ReconCache,
    ReconstructionConfig,
    cache_key,
    cached_reconstruct,
    _effective_config,
)
from .sare import RECON_LONG_SIDE, compute_sare, prepare_sare_input, preprocess_for_recon
from .schedule import DenoiserBackend, NoiseSchedule

__all__ = [
    "ScoreSet",
    "accuracy",
    "auc",
    "SubsetResult",
    "EvalReport",
    "make_report",
    "render_markdown",
    "save_report",
    "PairScorer",
    "MeanSareScorer",
    "DetectorScorer",
    "evaluate",
    "ablation_grid",
    "DEFAULT_ABLATION_STRENGTHS",
    "DEFAULT_ABLATION_GUIDANCE",
]

DEFAULT_ABLATION_STRENGTHS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
DEFAULT_ABLATION_GUIDANCE = (1.0, 3.0, 5.0, 7.5, 10.0)


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    subset: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.shape[0] != labels.shape[0] or scores.shape[0] < 1:
            raise ParameterError(
                f"scores ({scores.shape[0]}) and labels ({labels.shape[0]}) must have equal length >= 1"
            )
        if not np.isin(labels, (0, 1)).all():
            raise ParameterError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))


def accuracy(s: ScoreSet, threshold: float = 0.5) -> float:
    """Fraction of samples where (score >= threshold) agrees with label==1."""
    pred = s.scores >= threshold
    return float(np.mean(pred == (s.labels == 1)))


def auc(s: ScoreSet) -> float:
    """Mann-Whitney AUC: P(score_fake > score_real) + 0.5 P(tie), via ranks."""
    n_fake = int(np.sum(s.labels == 1))
    n_real = int(np.sum(s.labels == 0))
    if n_fake == 0 or n_real == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes; got {n_fake} fake / {n_real} real in subset {s.subset!r}"
        )
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    ranks = np.empty(len(sorted_scores), dtype=np.float64)
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0  # mid-rank, 1-based
        i = j + 1
    rank_by_sample = np.empty_like(ranks)
    rank_by_sample[order] = ranks
    rank_sum_fake = float(rank_by_sample[s.labels == 1].sum())
    u = rank_sum_fake - n_fake * (n_fake + 1) / 2.0
    return u / (n_fake * n_real)


@dataclass(frozen=True)
class SubsetResult:
    subset: str
    acc: float
    auc: float | None  # None when a subset has a single class
    n_samples: int
    n_real: int
    n_fake: int


@dataclass(frozen=True)
class EvalReport:
    results: tuple[SubsetResult, ...]
    avg_acc: float
    avg_auc: float | None
    scorer_id: str
    recon_config: ReconstructionConfig
    threshold: float
    version: str

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "scorer_id": self.scorer_id,
            "threshold": self.threshold,
            "recon_config": asdict(self.recon_config),
            "subsets": [asdict(r) for r in self.results],
            "avg_acc": self.avg_acc,
            "avg_auc": self.avg_auc,
        }


def make_report(
    results: Sequence[SubsetResult],
    scorer_id: str,
    recon_config: ReconstructionConfig,
    threshold: float = 0.5,
) -> EvalReport:
    if not results:
        raise ParameterError("report needs at least one subset result")
    avg_acc = float(np.mean([r.acc for r in results]))
    defined = [r.auc for r in results if r.auc is not None]
    avg_auc = float(np.mean(defined)) if defined else None
    return EvalReport(
        results=tuple(results),
        avg_acc=avg_acc,
        avg_auc=avg_auc,
        scorer_id=scorer_id,
        recon_config=recon_config,
        threshold=threshold,
        version=__version__,
    )


def render_markdown(report: EvalReport) -> str:
    lines = [
        "| Subset | ACC | AUC | n |",
        "| --- | --- | --- | --- |",
    ]
    for r in report.results:
        auc_cell = "undefined" if r.auc is None else f"{r.auc:.4f}"
        lines.append(f"| {r.subset} | {r.acc:.4f} | {auc_cell} | {r.n_samples} |")
    avg_auc_cell = "undefined" if report.avg_auc is None else f"{report.avg_auc:.4f}"
    lines.append(f"| **Avg** | {report.avg_acc:.4f} | {avg_auc_cell} | |")
    return "\n".join(lines) + "\n"


def save_report(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True), encoding="utf-8")
    path.with_suffix(".md").write_text(render_markdown(report), encoding="utf-8")


# ---------------------------------------------------------------------------
# scorers


class PairScorer(Protocol):
    """Maps (image, difference-map) pairs to fake-probabilities in [0, 1]."""

    def score_pairs(self, pairs: Sequence[tuple[ImageArray, ImageArray]]) -> np.ndarray: ...

    def identifier(self) -> str: ...


class MeanSareScorer:
    """Single-feature baseline: generated images sit close to their
    caption-guided reconstruction, so a LOW mean difference indicates fake.
    The mean is squashed through a fixed logistic so scores live in (0, 1)
    with 0.5 at `pivot`; ranking (hence AUC) is unaffected by the squash."""

    def __init__(self, pivot: float = 0.05, width: float = 0.02):
        if width <= 0:
            raise ParameterError(f"width must be positive, got {width}")
        self.pivot = pivot
        self.width = width

    def score_pairs(self, pairs: Sequence[tuple[ImageArray, ImageArray]]) -> np.ndarray:
        means = np.array([float(np.mean(s)) for _, s in pairs], dtype=np.float64)
        return 1.0 / (1.0 + np.exp((means - self.pivot) / self.width))

    def identifier(self) -> str:
        return f"mean-sare-p{self.pivot:g}"


class DetectorScorer:
    """Scores with a trained fusion detector (eval mode, center crop)."""

    def __init__(self, model: DetectorModel, checkpoint_id: str = "detector"):
        self.model = model
        self.checkpoint_id = checkpoint_id

    def _prep(self, arr: ImageArray) -> ImageArray:
        size = self.model.input_size
        if arr.shape[1] < size or arr.shape[2] < size:
            return prepare_sare_input(arr, size=size)
        return center_crop(arr, size)

    def score_pairs(self, pairs: Sequence[tuple[ImageArray, ImageArray]]) -> np.ndarray:
        sized = [(self._prep(img), self._prep(sare)) for img, sare in pairs]
        return detector_scores(self.model, sized)

    def identifier(self) -> str:
        return self.checkpoint_id


# ---------------------------------------------------------------------------
# end-to-end evaluation


def collect_pairs(
    manifest: Manifest,
    captioner: CaptionerBackend,
    encoder: TextEncoderBackend,
    codec: LatentCodec,
    denoiser: DenoiserBackend,
    recon_config: ReconstructionConfig,
    cache: ReconCache | str,
    schedule: NoiseSchedule | None = None,
    long_side: int = RECON_LONG_SIDE,
    offline: bool = False,
) -> list[tuple[ImageArray, ImageArray, int, str]]:
    """Run load -> preprocess -> caption -> cached reconstruct -> difference
    map for every manifest entry; yields (image, map, label, subset) rows in
    manifest order. The shared front half of evaluation and detector-
    training data assembly.

    offline=True refuses to run backends: if any entry's reconstruction is
    not already cached the call fails up front with the missing keys.
    """
    if not isinstance(cache, ReconCache):
        cache = ReconCache(cache)
    if len(manifest) == 0:
        raise ParameterError("empty manifest")

    prepared: list[tuple[str, int, ImageArray, str]] = []  # subset, label, image, key
    captions = {}
    for e in manifest.entries:
        img = preprocess_for_recon(load_image(e.path), long_side=long_side)
        cap = generate_caption(img, captioner)
        eff = _effective_config(recon_config, codec, denoiser, encoder, cap)
        key = cache_key(cap.image_digest, cap, eff)
        prepared.append((e.subset, e.label, img, key))
        captions[key] = cap

    if offline:
        missing = sorted({k for _, _, _, k in prepared if not cache.contains(k)})
        if missing:
            raise CacheMissError(
                f"offline evaluation: {len(missing)} reconstruction(s) not cached", missing
            )

    rows: list[tuple[ImageArray, ImageArray, int, str]] = []
    for subset, label, img, key in prepared:
        rec = cached_reconstruct(
            img, captions[key], recon_config, codec, denoiser, encoder, cache, schedule=schedule
        )
        sare = compute_sare(img, rec.output)
        rows.append((img, sare.data, label, subset))
    return rows


def evaluate(
    scorer: PairScorer,
    manifest: Manifest,
    captioner: CaptionerBackend,
    encoder: TextEncoderBackend,
    codec: LatentCodec,
    denoiser: DenoiserBackend,
    recon_config: ReconstructionConfig,
    cache: ReconCache | str,
    schedule: NoiseSchedule | None = None,
    long_side: int = RECON_LONG_SIDE,
    threshold: float = 0.5,
    offline: bool = False,
) -> EvalReport:
    """Score every manifest entry through the full pipeline and assemble a
    per-subset report. Deterministic given backends + config."""
    rows = collect_pairs(
        manifest, captioner, encoder, codec, denoiser, recon_config, cache,
        schedule=schedule, long_side=long_side, offline=offline,
    )
    by_subset: dict[str, tuple[list, list]] = {}
    for img, sare, label, subset in rows:
        pairs, labels = by_subset.setdefault(subset, ([], []))
        pairs.append((img, sare))
        labels.append(label)

    results = []
    eff = replace(
        recon_config,
        codec_id=codec.identifier(),
        denoiser_id=denoiser.identifier(),
        encoder_id=encoder.identifier(),
        captioner_id=captioner.identifier(),
    )
    for subset, (pairs, labels) in by_subset.items():
        scores = scorer.score_pairs(pairs)
        ss = ScoreSet(scores=scores, labels=np.array(labels), subset=subset)
        n_fake = int(np.sum(ss.labels == 1))
        n_real = len(labels) - n_fake
        subset_auc = auc(ss) if (n_fake and n_real) else None
        results.append(
            SubsetResult(
                subset=subset,
                acc=accuracy(ss, threshold),
                auc=subset_auc,
                n_samples=len(labels),
                n_real=n_real,
                n_fake=n_fake,
            )
        )
    return make_report(results, scorer.identifier(), eff, threshold)


def ablation_grid(
    scorer: PairScorer,
    manifest: Manifest,
    captioner: CaptionerBackend,
    encoder: TextEncoderBackend,
    codec: LatentCodec,
    denoiser: DenoiserBackend,
    base_config: ReconstructionConfig,
    cache: ReconCache | str,
    strengths: Sequence[float] = DEFAULT_ABLATION_STRENGTHS,
    guidance_scales: Sequence[float] = (7.5,),
    schedule: NoiseSchedule | None = None,
    long_side: int = RECON_LONG_SIDE,
    csv_path: str | Path | None = None,
    plot_path: str | Path | None = None,
) -> dict[tuple[float, float], EvalReport | Exception]:
    """Cartesian sweep over (strength, guidance). A failed cell is recorded
    and skipped, never fatal; the CSV gets one row per (cell, subset) either
    way, with empty metric fields and status=failed for broken cells."""
    if not strengths or not guidance_scales:
        raise ParameterError("strength and guidance grids must be nonempty")
    if not isinstance(cache, ReconCache):
        cache = ReconCache(cache)
    subsets = list(manifest.subsets)
    grid: dict[tuple[float, float], EvalReport | Exception] = {}
    rows: list[dict] = []
    for s in strengths:
        for g in guidance_scales:
            cfg = replace(base_config, strength=s, guidance_scale=g)
            try:
                report = evaluate(
                    scorer, manifest, captioner, encoder, codec, denoiser, cfg, cache,
                    schedule=schedule, long_side=long_side,
                )
            except Exception as exc:  # isolate the cell
                grid[(s, g)] = exc
                for subset in subsets:
                    rows.append(
                        {"strength": s, "guidance_scale": g, "subset": subset,
                         "acc": "", "auc": "", "n_samples": 0, "status": "failed"}
                    )
                continue
            grid[(s, g)] = report
            for r in report.results:
                rows.append(
                    {"strength": s, "guidance_scale": g, "subset": r.subset,
                     "acc": repr(r.acc), "auc": "" if r.auc is None else repr(r.auc),
                     "n_samples": r.n_samples, "status": "ok"}
                )
    if csv_path is not None:
        _write_ablation_csv(rows, csv_path)
    if plot_path is not None:
        _plot_ablation(rows, plot_path)
    return grid


def _write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["strength", "guidance_scale", "subset", "acc", "auc", "n_samples", "status"]
        )
        writer.writeheader()
        writer.writerows(rows)


def _plot_ablation(rows: list[dict], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    ok = [r for r in rows if r["status"] == "ok" and r["auc"] != ""]
    keys = sorted({(r["subset"], r["guidance_scale"]) for r in ok})
    for subset, g in keys:
        pts = sorted(
            (float(r["strength"]), float(r["auc"]), float(r["acc"]))
            for r in ok
            if r["subset"] == subset and r["guidance_scale"] == g
        )
        xs = [p[0] for p in pts]
        axes[0].plot(xs, [p[1] for p in pts], marker="o", label=f"{subset} (g={g})")
        axes[1].plot(xs, [p[2] for p in pts], marker="o", label=f"{subset} (g={g})")
    axes[0].set_xlabel("strength")
    axes[0].set_ylabel("AUC")
    axes[0].set_ylim(0.0, 1.05)
    axes[1].set_xlabel("strength")
    axes[1].set_ylabel("ACC")
    axes[1].set_ylim(0.0, 1.05)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)

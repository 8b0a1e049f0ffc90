"""Batch command-line surface: caption, reconstruct, train, eval, ablate, toy.

Stages communicate only through files (manifests, caption JSONL, the
reconstruction cache, checkpoints), so each is independently re-runnable.
Exit codes: 0 success, 1 stage failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ._version import __version__
from .conditioning import (
    CaptionFileBackend,
    HashTextEncoder,
    NullCaptioner,
    SyntheticCaptioner,
    append_captions,
    captions_filename,
    generate_caption,
    read_captions,
)
from .datasets import load_manifest
from .errors import CacheMissError, SarekitError
from .evaluation import (
    DetectorScorer,
    MeanSareScorer,
    ablation_grid,
    collect_pairs,
    evaluate,
    save_report,
)
from .fusion import (
    AugmentationPolicy,
    TrainConfig,
    build_detector,
    load_checkpoint,
    save_checkpoint,
    save_loss_trace,
    train_detector,
)
from .images import image_digest, load_image
from .recon import ReconCache, ReconstructionConfig, cached_reconstruct
from .sare import RECON_LONG_SIDE, preprocess_for_recon
from .toyworld import AvgPool2xCodec, IdentityCodec, load_toy_denoiser

CODECS = {"identity": IdentityCodec, "avgpool2": AvgPool2xCodec}


def _unit_interval(text: str) -> float:
    value = float(text)
    if not (0.0 <= value <= 1.0):
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return value


def _nonnegative(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad float list {text!r}") from exc


class RunConfig:
    """defaults < config file < flags. Flags parse with default None so an
    unset flag falls through to the file value, then the hard default."""

    def __init__(self, path: str | None):
        self.parser = configparser.ConfigParser()
        if path:
            if not Path(path).is_file():
                raise SarekitError(f"config file not found: {path}")
            self.parser.read(path)

    def get(self, section: str, key: str, flag_value, default, cast=str):
        if flag_value is not None:
            return flag_value
        if self.parser.has_option(section, key):
            raw = self.parser.get(section, key)
            return cast(raw) if cast is not bool else self.parser.getboolean(section, key)
        return default


def _build_captioner(args) -> object:
    if args.backend == "null":
        return NullCaptioner()
    if args.backend == "synthetic":
        if not args.factors:
            raise SarekitError("--backend synthetic requires --factors pointing to a factor index")
        import json

        index = json.loads(Path(args.factors).read_text(encoding="utf-8"))
        return SyntheticCaptioner(index, fidelity=args.fidelity, seed=args.captioner_seed)
    raise SarekitError(f"unknown caption backend {args.backend!r}")


def _cache_dir(flag_value: str | None, run_config: RunConfig | None = None) -> str:
    if flag_value:
        return flag_value
    if run_config is not None:
        from_file = run_config.get("common", "cache_dir", None, None)
        if from_file:
            return from_file
    env = os.environ.get("SARE_CACHE_DIR")
    if env:
        return env
    return "recon_cache"


# ---------------------------------------------------------------------------
# worker-pool plumbing (reconstruction is embarrassingly parallel per image)


def _caption_chunk(payload: dict) -> dict:
    """Standalone worker: captions one chunk of manifest paths."""
    ns = argparse.Namespace(
        backend=payload["backend"],
        factors=payload["factors"],
        fidelity=payload["fidelity"],
        captioner_seed=payload["captioner_seed"],
    )
    captioner = _build_captioner(ns)
    captions, failed = [], []
    for path in payload["paths"]:
        try:
            img = preprocess_for_recon(load_image(path), long_side=payload["long_side"])
            cap = generate_caption(img, captioner)
            captions.append(
                {"text": cap.text, "captioner_id": cap.captioner_id, "image_digest": cap.image_digest}
            )
        except SarekitError as exc:
            failed.append(f"{path}: {exc}")
    return {"captions": captions, "failed": failed, "captioner_id": captioner.identifier()}


def _recon_chunk(payload: dict) -> dict:
    """Standalone worker: builds its own backends and fills the shared cache
    for one chunk of manifest paths. Safe to race: writes are atomic and
    deterministic."""
    codec = CODECS[payload["codec"]]()
    denoiser = load_toy_denoiser(payload["denoiser"])
    encoder = HashTextEncoder()
    captions = read_captions(payload["captions"])
    cache = ReconCache(payload["cache_dir"])
    config = ReconstructionConfig(**payload["config"])
    missing, failed = [], []
    for path in payload["paths"]:
        img = preprocess_for_recon(load_image(path), long_side=payload["long_side"])
        digest = image_digest(img)
        cap = captions.get(digest)
        if cap is None:
            missing.append(path)
            continue
        try:
            cached_reconstruct(img, cap, config, codec, denoiser, encoder, cache)
        except SarekitError as exc:
            failed.append(f"{path}: {exc}")
    return {"hits": cache.hits, "misses": cache.misses, "missing": missing, "failed": failed}


def _run_chunks(worker, payloads: list[dict], workers: int) -> list[dict]:
    if workers <= 1 or len(payloads) <= 1:
        return [worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, payloads))


# ---------------------------------------------------------------------------
# commands


def cmd_caption(args) -> int:
    from .conditioning import Caption

    manifest = load_manifest(args.manifest)
    paths = [e.path for e in manifest.entries]
    workers = max(1, args.workers)
    chunks = [c for c in (paths[i::workers] for i in range(workers)) if c]
    payloads = [
        {
            "paths": chunk,
            "backend": args.backend,
            "factors": args.factors,
            "fidelity": args.fidelity,
            "captioner_seed": args.captioner_seed,
            "long_side": args.long_side,
        }
        for chunk in chunks
    ]
    results = _run_chunks(_caption_chunk, payloads, workers)
    captions = [Caption(**row) for r in results for row in r["captions"]]
    failures = [line for r in results for line in r["failed"]]
    captioner_id = results[0]["captioner_id"] if results else _build_captioner(args).identifier()
    out_dir = Path(args.out) if args.out else Path(args.manifest).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / captions_filename(captioner_id)
    written = append_captions(out_path, captions)
    print(f"captioned {len(captions)} image(s), {written} new line(s) -> {out_path}")
    if failures:
        print(f"{len(failures)} image(s) failed captioning:", file=sys.stderr)
        for line in failures:
            print(f"  {line}", file=sys.stderr)
        return 1
    return 0


def cmd_reconstruct(args) -> int:
    run_config = RunConfig(args.config)
    manifest = load_manifest(args.manifest)
    config = ReconstructionConfig(
        strength=run_config.get("reconstruct", "strength", args.strength, 0.5, float),
        guidance_scale=run_config.get("reconstruct", "guidance", args.guidance, 7.5, float),
        max_steps=run_config.get("reconstruct", "steps", args.steps, 50, int),
        eta=run_config.get("reconstruct", "eta", args.eta, 0.0, float),
        seed=run_config.get("reconstruct", "seed", args.seed, 0, int),
    )
    cache_dir = _cache_dir(args.cache_dir, run_config)
    paths = [e.path for e in manifest.entries]
    workers = max(1, args.workers)
    chunks = [paths[i::workers] for i in range(workers)]
    chunks = [c for c in chunks if c]
    payloads = [
        {
            "paths": chunk,
            "codec": args.codec,
            "denoiser": args.denoiser,
            "captions": args.captions,
            "cache_dir": cache_dir,
            "config": {
                "strength": config.strength,
                "guidance_scale": config.guidance_scale,
                "max_steps": config.max_steps,
                "eta": config.eta,
                "seed": config.seed,
            },
            "long_side": args.long_side,
        }
        for chunk in chunks
    ]
    results = _run_chunks(_recon_chunk, payloads, workers)
    hits = sum(r["hits"] for r in results)
    misses = sum(r["misses"] for r in results)
    missing = [p for r in results for p in r["missing"]]
    failed = [line for r in results for line in r["failed"]]
    print(f"reconstructed {hits + misses} image(s): cache hits={hits} misses={misses}")
    if missing:
        print(f"{len(missing)} image(s) had no caption on file (skipped):", file=sys.stderr)
        for p in missing:
            print(f"  {p}", file=sys.stderr)
    if failed:
        print(f"{len(failed)} reconstruction failure(s):", file=sys.stderr)
        for line in failed:
            print(f"  {line}", file=sys.stderr)
    return 1 if (missing or failed) else 0


def cmd_train(args) -> int:
    run_config = RunConfig(args.config)
    manifest = load_manifest(args.manifest)
    captioner = CaptionFileBackend(args.captions)
    encoder = HashTextEncoder()
    codec = CODECS[args.codec]()
    denoiser = load_toy_denoiser(args.denoiser)
    cache = ReconCache(_cache_dir(args.cache_dir, run_config))
    recon_config = ReconstructionConfig(
        strength=run_config.get("reconstruct", "strength", args.strength, 0.5, float),
        guidance_scale=run_config.get("reconstruct", "guidance", args.guidance, 7.5, float),
        max_steps=run_config.get("reconstruct", "steps", args.steps, 50, int),
        seed=run_config.get("reconstruct", "seed", args.seed, 0, int),
    )
    rows = collect_pairs(
        manifest, captioner, encoder, codec, denoiser, recon_config, cache,
        long_side=args.long_side,
    )
    input_size = run_config.get("train", "input_size", args.input_size, 224, int)
    train_config = TrainConfig(
        batch_size=run_config.get("train", "batch_size", args.batch_size, 512, int),
        learning_rate=run_config.get("train", "learning_rate", args.lr, 1e-4, float),
        epochs=run_config.get("train", "epochs", args.epochs, 17, int),
        augmentation=AugmentationPolicy(crop_size=input_size),
        seed=run_config.get("train", "seed", args.seed, 0, int),
    )
    model = build_detector(input_size=input_size, seed=train_config.seed)
    model, trace = train_detector([(i, s, l) for i, s, l, _ in rows], train_config, model)
    out = Path(args.out)
    save_checkpoint(model, out, train_config)
    save_loss_trace(trace, out / "loss.csv")
    print(f"trained detector on {len(rows)} pair(s); checkpoint -> {out}")
    return 0


def _build_scorer(args):
    if args.scorer == "mean-sare":
        return MeanSareScorer()
    if not args.checkpoint:
        raise SarekitError("--scorer detector requires --checkpoint")
    return DetectorScorer(load_checkpoint(args.checkpoint), checkpoint_id=str(args.checkpoint))


def cmd_eval(args) -> int:
    run_config = RunConfig(args.config)
    manifest = load_manifest(args.manifest)
    scorer = _build_scorer(args)
    report = evaluate(
        scorer,
        manifest,
        CaptionFileBackend(args.captions),
        HashTextEncoder(),
        CODECS[args.codec](),
        load_toy_denoiser(args.denoiser),
        ReconstructionConfig(
            strength=run_config.get("reconstruct", "strength", args.strength, 0.5, float),
            guidance_scale=run_config.get("reconstruct", "guidance", args.guidance, 7.5, float),
            max_steps=run_config.get("reconstruct", "steps", args.steps, 50, int),
            seed=run_config.get("reconstruct", "seed", args.seed, 0, int),
        ),
        ReconCache(_cache_dir(args.cache_dir, run_config)),
        long_side=args.long_side,
        threshold=run_config.get("eval", "threshold", args.threshold, 0.5, float),
        offline=args.offline,
    )
    save_report(report, args.report)
    auc_text = "undefined" if report.avg_auc is None else f"{report.avg_auc:.4f}"
    print(f"avg ACC {report.avg_acc:.4f}  avg AUC {auc_text}  -> {args.report}")
    return 0


def cmd_ablate(args) -> int:
    run_config = RunConfig(args.config)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = ablation_grid(
        _build_scorer(args),
        manifest,
        CaptionFileBackend(args.captions),
        HashTextEncoder(),
        CODECS[args.codec](),
        load_toy_denoiser(args.denoiser),
        ReconstructionConfig(seed=run_config.get("reconstruct", "seed", args.seed, 0, int)),
        ReconCache(_cache_dir(args.cache_dir, run_config)),
        strengths=args.strength_grid,
        guidance_scales=args.guidance_grid,
        long_side=args.long_side,
        csv_path=out_dir / "ablation.csv",
        plot_path=out_dir / "ablation.png",
    )
    failed = {k: v for k, v in grid.items() if isinstance(v, Exception)}
    print(f"ablation grid: {len(grid) - len(failed)} ok, {len(failed)} failed -> {out_dir / 'ablation.csv'}")
    for (s, g), exc in failed.items():
        print(f"  cell (strength={s}, guidance={g}) failed: {exc}", file=sys.stderr)
    return 1 if failed else 0


def cmd_toy(args) -> int:
    from .experiments import SeparabilityConfig, run_separability_experiment

    workdir = Path(args.workdir)
    if args.scenario == "smoke":
        cfg = SeparabilityConfig(
            n_denoiser_scenes=48, n_detector_train=12, n_eval=12,
            denoiser_epochs=4, detector_epochs=3, max_steps=10, seed=args.seed,
        )
        checks = []  # completion is the smoke criterion
    else:
        cfg = SeparabilityConfig(seed=args.seed)
        checks = [("mean-SARE AUC", "mean_sare_auc", 0.9), ("detector ACC", "detector_acc", 0.9)]

    result = run_separability_experiment(workdir, cfg)
    save_report(result.report_mean_sare, workdir / "report_mean_sare.json")
    save_report(result.report_detector, workdir / "report_detector.json")
    for stage, seconds in result.timings.items():
        print(f"  {stage:>18s}: {seconds:7.1f}s")
    print(f"  {'total':>18s}: {result.total_seconds:7.1f}s")
    print(
        f"mean difference-map value: fake {result.mean_sare_fake:.4f} "
        f"vs real {result.mean_sare_real:.4f}"
    )
    ok = True
    for label, attr, floor in checks:
        value = getattr(result, attr)
        passed = value >= floor
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {label} {value:.4f} {'>=' if passed else '<'} {floor}")
    if not checks:
        print(f"[PASS] smoke pipeline completed "
              f"(AUC {result.mean_sare_auc:.3f}, ACC {result.detector_acc:.3f})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def _add_recon_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strength", type=_unit_interval, default=None, help="noising strength in [0,1] (default 0.5)")
    p.add_argument("--guidance", type=_nonnegative, default=None, help="guidance scale (default 7.5)")
    p.add_argument("--steps", type=_positive_int, default=None, help="max sampler steps (default 50)")
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--codec", choices=sorted(CODECS), default="identity")
    p.add_argument("--denoiser", required=True, help="denoiser checkpoint directory")
    p.add_argument("--cache-dir", default=None, help="reconstruction cache (default $SARE_CACHE_DIR)")
    p.add_argument("--long-side", type=_positive_int, default=RECON_LONG_SIDE,
                   help="preprocessing long side (use the dataset's native size for toy data)")
    p.add_argument("--config", default=None, help="INI config file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarekit",
        description="Caption-guided reconstruction-error toolkit for generated-image detection",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("caption", help="generate captions for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", choices=["synthetic", "null"], default="synthetic")
    p.add_argument("--factors", default=None, help="factor index JSON for the synthetic backend")
    p.add_argument("--fidelity", type=_unit_interval, default=1.0)
    p.add_argument("--captioner-seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory (default: beside the manifest)")
    p.add_argument("--long-side", type=_positive_int, default=RECON_LONG_SIDE)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("reconstruct", help="fill the reconstruction cache for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--captions", required=True, help="caption JSONL from the caption stage")
    _add_recon_flags(p)
    p.add_argument("--eta", type=_nonnegative, default=None, help="sampler stochasticity (default 0)")
    p.add_argument("--workers", type=_positive_int, default=1)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the fusion detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--epochs", type=_positive_int, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=None)
    p.add_argument("--lr", type=_nonnegative, default=None)
    p.add_argument("--input-size", type=_positive_int, default=None,
                   help="detector input / crop size (default 224)")
    _add_recon_flags(p)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a scorer over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--checkpoint", default=None, help="detector checkpoint directory")
    p.add_argument("--scorer", choices=["detector", "mean-sare"], default="detector")
    p.add_argument("--report", required=True, help="report JSON path (a .md twin is written too)")
    p.add_argument("--threshold", type=_unit_interval, default=None)
    p.add_argument("--offline", action="store_true", help="fail instead of reconstructing on a cache miss")
    _add_recon_flags(p)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="strength/guidance ablation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scorer", choices=["detector", "mean-sare"], default="mean-sare")
    p.add_argument("--strength-grid", type=_float_list, default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    p.add_argument("--guidance-grid", type=_float_list, default=[7.5])
    p.add_argument("--out", required=True, help="output directory for ablation.csv and plots")
    p.add_argument("--seed", type=int, default=None)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("toy", help="closed-world experiments with pass/fail gates")
    p.add_argument("--scenario", choices=["separability", "smoke"], default="separability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir", default="toy_run")
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CacheMissError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for key in exc.missing_keys[:20]:
            print(f"  missing {key}", file=sys.stderr)
        if len(exc.missing_keys) > 20:
            print(f"  ... and {len(exc.missing_keys) - 20} more", file=sys.stderr)
        return 1
    except SarekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

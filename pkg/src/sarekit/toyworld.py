"""A closed miniature world for exercising the detection hypothesis.

Scenes are factor-based rasters (shape, color, position, size). "Fake"
scenes are exactly what their caption describes; "real" scenes carry extra
caption-invisible detail (background texture, occluders, hue jitter).
A small conditional U-Net trained on caption-complete renders plays the
generator; analytic denoisers supply closed-form oracles for the sampler.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
from torch import nn

from .conditioning import (
    Caption,
    ConditionEmbedding,
    SyntheticCaptioner,
    append_captions,
    captions_filename,
)
from .datasets import LABEL_FAKE, LABEL_REAL, Manifest, ManifestEntry
from .errors import ParameterError, TrainingError
from .images import ImageArray, clamp01, image_digest, save_image_u8
from .schedule import LatentArray, NoiseSchedule

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.15, 0.75),
}
BACKGROUND = 0.82
TEXTURE_AMPLITUDE = 0.12
TEXTURE_SIGMA = 1.2  # blur radius of the background field, in pixels
OCCLUDER_CONTRAST = (-0.35, 0.25)

__all__ = [
    "SHAPES",
    "COLORS",
    "CaptionInvisibleDetail",
    "SceneFactors",
    "sample_factors",
    "gen_scene",
    "ToyDataset",
    "make_dataset",
    "ToyDenoiser",
    "ToyDenoiserBackend",
    "train_toy_denoiser",
    "denoiser_t_profile",
    "save_toy_denoiser",
    "load_toy_denoiser",
    "AnalyticGaussianDenoiser",
    "ConstantOracleDenoiser",
    "IdentityCodec",
    "AvgPool2xCodec",
]


@dataclass(frozen=True)
class CaptionInvisibleDetail:
    """Scene content no caption can describe; present only in real scenes."""

    background_texture_seed: int
    occluder_count: int
    hue_jitter: float


@dataclass(frozen=True)
class SceneFactors:
    shape: str
    color: str
    position: tuple[float, float]  # center, unit square
    size: float  # radius as fraction of image side
    detail: CaptionInvisibleDetail | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ParameterError(f"unknown color {self.color!r}")
        if not (0.0 < self.size < 0.5):
            raise ParameterError(f"size must be in (0, 0.5), got {self.size}")

    def caption_factors(self) -> dict[str, str]:
        return {"shape": self.shape, "color": self.color}


def sample_factors(rng: np.random.Generator, real: bool) -> SceneFactors:
    detail = None
    if real:
        detail = CaptionInvisibleDetail(
            background_texture_seed=int(rng.integers(0, 2**31)),
            occluder_count=int(rng.integers(3, 7)),
            hue_jitter=float(rng.uniform(0.04, 0.12)),
        )
    return SceneFactors(
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        color=list(COLORS)[int(rng.integers(len(COLORS)))],
        position=(float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.35, 0.65))),
        size=float(rng.uniform(0.15, 0.28)),
        detail=detail,
    )


def _draw_shape(canvas: np.ndarray, shape: str, color: tuple, cx: float, cy: float, r: float) -> None:
    """Draw on a supersampled uint8 HWC canvas; coordinates in pixels."""
    col = tuple(int(round(c * 255)) for c in color)
    if shape == "circle":
        cv2.circle(canvas, (int(round(cx)), int(round(cy))), int(round(r)), col, -1)
    elif shape == "square":
        cv2.rectangle(
            canvas,
            (int(round(cx - r)), int(round(cy - r))),
            (int(round(cx + r)), int(round(cy + r))),
            col,
            -1,
        )
    else:  # triangle, apex up
        pts = np.array(
            [
                [cx, cy - r],
                [cx - 0.866 * r, cy + 0.5 * r],
                [cx + 0.866 * r, cy + 0.5 * r],
            ]
        ).round().astype(np.int32)
        cv2.fillPoly(canvas, [pts], col)


def gen_scene(factors: SceneFactors, rng_seed: int, resolution: int = 64) -> ImageArray:
    """Deterministic raster of one scene as (3, H, W) float32 in [0, 1].

    Real scenes (factors.detail present) additionally get a seeded
    background texture field, occluding blobs, and a hue-jittered fill.
    """
    ss = 4  # supersampling factor for smooth edges
    side = resolution * ss
    detail = factors.detail
    detail_seed = 0 if detail is None else detail.background_texture_seed
    rng = np.random.default_rng([rng_seed, detail_seed])

    fill = np.array(COLORS[factors.color], dtype=np.float64)
    if detail is not None:
        fill = np.clip(fill + detail.hue_jitter * rng.uniform(-1.0, 1.0, 3), 0.0, 1.0)

    canvas = np.full((side, side, 3), int(round(BACKGROUND * 255)), dtype=np.uint8)
    cx, cy = factors.position[0] * side, factors.position[1] * side
    _draw_shape(canvas, factors.shape, tuple(fill), cx, cy, factors.size * side)

    if detail is not None:
        for _ in range(detail.occluder_count):
            g = BACKGROUND + float(rng.uniform(*OCCLUDER_CONTRAST))
            ox = float(rng.uniform(0.05, 0.95)) * side
            oy = float(rng.uniform(0.05, 0.95)) * side
            orad = float(rng.uniform(1.5, 3.5)) * ss
            cv2.circle(canvas, (int(round(ox)), int(round(oy))), int(round(orad)), (int(round(g * 255)),) * 3, -1)

    img = cv2.resize(canvas, (resolution, resolution), interpolation=cv2.INTER_AREA)
    img = img.astype(np.float32) / 255.0

    if detail is not None:
        field_rng = np.random.default_rng(detail.background_texture_seed)
        field = field_rng.standard_normal((resolution, resolution)).astype(np.float32)
        field = cv2.GaussianBlur(field, (0, 0), TEXTURE_SIGMA)
        field *= TEXTURE_AMPLITUDE / max(float(field.std()), 1e-8)
        img = img + field[:, :, None]

    return clamp01(np.ascontiguousarray(img.transpose(2, 0, 1)))


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class ToyDataset:
    manifest: Manifest
    captions: dict[str, Caption]  # image digest -> caption
    factor_index: dict[str, dict[str, str]]  # image digest -> caption factors
    scene_factors: dict[str, SceneFactors]  # image digest -> full factors
    captioner: SyntheticCaptioner
    root: Path


def make_dataset(
    n_real: int,
    n_fake: int,
    fidelity: float,
    rng_seed: int,
    out_dir: str | Path,
    subset: str = "toy",
    split: str = "test",
    resolution: int = 64,
) -> ToyDataset:
    """Render a labeled scene set to disk: images/, manifest.jsonl,
    factors.json, and a caption sidecar. Labels: 1 = fake, 0 = real."""
    if n_real < 0 or n_fake < 0:
        raise ParameterError("scene counts must be nonnegative")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(rng_seed)

    entries: list[ManifestEntry] = []
    factor_index: dict[str, dict[str, str]] = {}
    scene_factors: dict[str, SceneFactors] = {}
    plan = [(LABEL_REAL, i) for i in range(n_real)] + [(LABEL_FAKE, i) for i in range(n_fake)]
    for label, i in plan:
        factors = sample_factors(rng, real=(label == LABEL_REAL))
        scene_seed = int(rng.integers(0, 2**31))
        img = gen_scene(factors, scene_seed, resolution)
        # digest what a reader will see: the 8-bit quantized pixels
        quant = np.floor(img * 255.0 + 0.5).astype(np.float32) / 255.0
        digest = image_digest(quant)
        name = f"{'real' if label == LABEL_REAL else 'fake'}_{i:05d}.png"
        path = img_dir / name
        save_image_u8(path, img)
        entries.append(
            ManifestEntry(path=str(path), label=label, subset=subset, split=split, digest=digest)
        )
        factor_index[digest] = factors.caption_factors()
        scene_factors[digest] = factors

    manifest = Manifest(entries=tuple(entries), source_root=str(out_dir), layout="toyworld")
    captioner = SyntheticCaptioner(factor_index, fidelity=fidelity, seed=rng_seed)
    captions: dict[str, Caption] = {}
    for e in manifest.entries:
        captions[e.digest] = captioner.caption_for_digest(e.digest)

    from .datasets import save_manifest  # local import keeps module load light

    save_manifest(manifest, out_dir / "manifest.jsonl")
    (out_dir / "factors.json").write_text(json.dumps(factor_index, indent=0, sort_keys=True), encoding="utf-8")
    append_captions(out_dir / captions_filename(captioner.identifier()), captions.values())
    return ToyDataset(manifest, captions, factor_index, scene_factors, captioner, out_dir)


# ---------------------------------------------------------------------------
# toy conditional denoiser


class _ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class ToyDenoiser(nn.Module):
    """Two-level conditional U-Net predicting the forward noise.

    Conditioning = sinusoidal timestep features concatenated with a pooled
    caption embedding, mapped to per-block channel biases. The output conv
    is zero-initialized so the untrained model predicts zero noise.
    """

    T_FEATS = 16

    def __init__(self, width: int = 16, cond_dim: int = 64, emb_dim: int = 64):
        super().__init__()
        c1, c2, c3 = width, width * 2, width * 4
        self.width = width
        self.cond_dim = cond_dim
        self.emb_dim = emb_dim
        self.embed = nn.Sequential(
            nn.Linear(self.T_FEATS + cond_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.rb1 = _ResBlock(c1, emb_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.rb2 = _ResBlock(c2, emb_dim)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.rb3 = _ResBlock(c3, emb_dim)
        self.mid = _ResBlock(c3, emb_dim)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.rb4 = _ResBlock(c2, emb_dim)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.rb5 = _ResBlock(c1, emb_dim)
        self.out_norm = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def time_features(self, t_frac: torch.Tensor) -> torch.Tensor:
        freqs = 2.0 ** torch.arange(self.T_FEATS // 2, dtype=torch.float32)
        ang = t_frac[:, None] * freqs[None, :] * math.pi
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)

    def forward(self, z: torch.Tensor, t_frac: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        emb = self.embed(torch.cat([self.time_features(t_frac), cond], dim=1))
        h1 = self.rb1(self.conv_in(z), emb)
        h2 = self.rb2(self.down1(h1), emb)
        h3 = self.rb3(self.down2(h2), emb)
        m = self.mid(h3, emb)
        u1 = self.rb4(self.up1(torch.nn.functional.interpolate(m, scale_factor=2, mode="nearest")) + h2, emb)
        u2 = self.rb5(self.up2(torch.nn.functional.interpolate(u1, scale_factor=2, mode="nearest")) + h1, emb)
        return self.conv_out(torch.nn.functional.silu(self.out_norm(u2)))


def _pool_condition(cond: ConditionEmbedding) -> np.ndarray:
    return cond.data.mean(axis=0).astype(np.float32)


class ToyDenoiserBackend:
    """Numpy adapter giving the torch U-Net the denoiser-backend interface."""

    def __init__(self, module: ToyDenoiser, t_max: int, ident: str):
        module.eval()
        self.module = module
        self.t_max = t_max
        self._ident = ident

    def predict_noise(self, z_t: LatentArray, t: int, cond: ConditionEmbedding) -> LatentArray:
        single = z_t.ndim == 3
        z = z_t[None] if single else z_t
        zb = torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))
        tb = torch.full((zb.shape[0],), t / self.t_max, dtype=torch.float32)
        cb = torch.from_numpy(np.tile(_pool_condition(cond), (zb.shape[0], 1)))
        with torch.no_grad():
            eps = self.module(zb, tb, cb).numpy().astype(z_t.dtype, copy=False)
        return eps[0] if single else eps

    def identifier(self) -> str:
        return self._ident


def train_toy_denoiser(
    samples: Sequence[tuple[ImageArray, ConditionEmbedding]],
    schedule: NoiseSchedule,
    epochs: int,
    rng_seed: int,
    null_condition: ConditionEmbedding,
    batch_size: int = 32,
    learning_rate: float = 2e-3,
    width: int = 16,
    cond_dropout: float = 0.15,
    tag: str = "",
) -> tuple[ToyDenoiserBackend, list[tuple[int, int, float]]]:
    """Denoising score matching: sample t uniformly, noise the latent, and
    regress the injected noise. Conditioning drops to the null embedding
    with probability cond_dropout so guided sampling has an unconditional
    branch to lean on."""
    if not samples:
        raise TrainingError("empty denoiser training set")
    torch.manual_seed(rng_seed)
    model = ToyDenoiser(width=width, cond_dim=null_condition.data.shape[1])
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    rng = np.random.default_rng(rng_seed)

    z0 = np.stack([np.asarray(img, dtype=np.float32) for img, _ in samples])
    conds = np.stack([_pool_condition(c) for _, c in samples])
    null_vec = _pool_condition(null_condition)
    sqrt_ab = np.sqrt(schedule.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bar).astype(np.float32)

    trace: list[tuple[int, int, float]] = []
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        for step, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            t = rng.integers(1, schedule.t_max + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), *z0.shape[1:])).astype(np.float32)
            z_t = sqrt_ab[t, None, None, None] * z0[idx] + sqrt_1mab[t, None, None, None] * eps
            cvec = conds[idx].copy()
            cvec[rng.random(len(idx)) < cond_dropout] = null_vec
            pred = model(
                torch.from_numpy(z_t),
                torch.from_numpy((t / schedule.t_max).astype(np.float32)),
                torch.from_numpy(cvec),
            )
            loss = torch.mean((pred - torch.from_numpy(eps)) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite denoiser loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append((epoch, step, float(loss.item())))
    model.eval()
    ident = f"toyunet-w{width}-e{epochs}-b{batch_size}-s{rng_seed}-n{len(samples)}"
    if tag:
        ident += f"-{tag}"
    return ToyDenoiserBackend(model, schedule.t_max, ident), trace


def denoiser_t_profile(
    backend: ToyDenoiserBackend,
    samples: Sequence[tuple[ImageArray, ConditionEmbedding]],
    schedule: NoiseSchedule,
    timesteps: Sequence[int],
    rng_seed: int = 0,
) -> dict[int, float]:
    """Mean squared error of the implied clean-latent prediction per
    timestep. More remaining signal (small t) must mean better recovery;
    this is the measurable form of the signal-to-noise ordering. (The raw
    noise-prediction MSE orders the opposite way and is not a useful probe.)
    """
    rng = np.random.default_rng(rng_seed)
    out: dict[int, float] = {}
    for t in timesteps:
        ab = schedule.alpha_bar[t]
        errs = []
        for img, cond in samples:
            z0 = np.asarray(img, dtype=np.float32)
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
            eps_hat = backend.predict_noise(z_t.astype(np.float32), t, cond)
            z0_hat = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
            errs.append(float(np.mean((z0_hat - z0) ** 2)))
        out[int(t)] = float(np.mean(errs))
    return out


def save_toy_denoiser(backend: ToyDenoiserBackend, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = backend.module.state_dict()
    params, blobs = [], []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        params.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    meta = {
        "format": 1,
        "kind": "toy-denoiser",
        "width": backend.module.width,
        "cond_dim": backend.module.cond_dim,
        "emb_dim": backend.module.emb_dim,
        "t_max": backend.t_max,
        "identifier": backend.identifier(),
        "parameters": params,
    }
    (directory / "weights.bin").write_bytes(b"".join(blobs))
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_toy_denoiser(directory: str | Path) -> ToyDenoiserBackend:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    if meta.get("kind") != "toy-denoiser":
        raise ParameterError(f"{directory} does not hold a toy denoiser checkpoint")
    model = ToyDenoiser(width=meta["width"], cond_dim=meta["cond_dim"], emb_dim=meta["emb_dim"])
    raw = (directory / "weights.bin").read_bytes()
    state, offset = {}, 0
    for spec in meta["parameters"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[spec["name"]] = torch.from_numpy(arr.copy())
        offset += count * 4
    if offset != len(raw):
        raise ParameterError(f"weights.bin has {len(raw) - offset} trailing bytes")
    model.load_state_dict(state)
    return ToyDenoiserBackend(model, meta["t_max"], meta["identifier"])


# ---------------------------------------------------------------------------
# analytic oracles and codecs


class AnalyticGaussianDenoiser:
    """Exact optimal noise prediction when z0 ~ N(mu0, sigma0^2 I):
    E[z0|z_t] = (sqrt(ab_t) sigma0^2 z_t + (1-ab_t) mu0) / (ab_t sigma0^2 + 1 - ab_t),
    eps_hat = (z_t - sqrt(ab_t) E[z0|z_t]) / sqrt(1-ab_t); zero when ab_t = 1.
    """

    def __init__(self, mu0: LatentArray, sigma0: float, schedule: NoiseSchedule):
        if sigma0 <= 0:
            raise ParameterError(f"sigma0 must be > 0, got {sigma0}")
        self.mu0 = np.asarray(mu0, dtype=np.float64)
        self.sigma0 = float(sigma0)
        self.schedule = schedule

    def posterior_mean(self, z_t: LatentArray, t: int) -> LatentArray:
        ab = self.schedule.alpha_bar[t]
        s2 = self.sigma0**2
        return (np.sqrt(ab) * s2 * z_t + (1.0 - ab) * self.mu0) / (ab * s2 + 1.0 - ab)

    def predict_noise(self, z_t: LatentArray, t: int, cond: object) -> LatentArray:
        ab = self.schedule.alpha_bar[t]
        if 1.0 - ab == 0.0:
            return np.zeros_like(np.asarray(z_t, dtype=np.float64))
        return (z_t - np.sqrt(ab) * self.posterior_mean(z_t, t)) / np.sqrt(1.0 - ab)

    def identifier(self) -> str:
        return f"analytic-gauss-s{self.sigma0:g}"


class ConstantOracleDenoiser:
    """Cheating backend that knows the true clean latent; the sampler run
    against it must walk back to exactly that latent."""

    def __init__(self, z0: LatentArray, schedule: NoiseSchedule):
        self.z0 = np.asarray(z0, dtype=np.float64)
        self.schedule = schedule

    def predict_noise(self, z_t: LatentArray, t: int, cond: object) -> LatentArray:
        ab = self.schedule.alpha_bar[t]
        if 1.0 - ab == 0.0:
            return np.zeros_like(np.asarray(z_t, dtype=np.float64))
        return (z_t - np.sqrt(ab) * self.z0) / np.sqrt(1.0 - ab)

    def identifier(self) -> str:
        return "constant-oracle"


class IdentityCodec:
    """Latents are pixels."""

    @property
    def downscale_factor(self) -> int:
        return 1

    def encode(self, image: ImageArray) -> LatentArray:
        return np.asarray(image, dtype=np.float32).copy()

    def decode(self, latent: LatentArray) -> ImageArray:
        return np.asarray(latent, dtype=np.float32).copy()

    def identifier(self) -> str:
        return "identity"


class AvgPool2xCodec:
    """2x average-pool encode, nearest-neighbor decode; exercises the
    downscale-factor plumbing with a deliberately lossy codec."""

    @property
    def downscale_factor(self) -> int:
        return 2

    def encode(self, image: ImageArray) -> LatentArray:
        c, h, w = image.shape
        if h % 2 or w % 2:
            raise ParameterError(f"avgpool2 needs even dims, got {h}x{w}")
        x = np.asarray(image, dtype=np.float32)
        return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def decode(self, latent: LatentArray) -> ImageArray:
        return np.repeat(np.repeat(np.asarray(latent, dtype=np.float32), 2, axis=1), 2, axis=2)

    def identifier(self) -> str:
        return "avgpool2"


def caption_for_entry(dataset: ToyDataset, digest: str) -> Caption:
    cap = dataset.captions.get(digest)
    if cap is None:
        raise ParameterError(f"no caption recorded for digest {digest[:12]}")
    return cap

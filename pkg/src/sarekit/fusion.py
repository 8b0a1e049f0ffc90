"""Detector: image + reconstruction-difference encoders fused by cross-attention.

Two implementations of the fusion math live here on purpose: a pure-numpy
functional form (`cross_attention_fuse`) that serves as the reference, and
the trainable torch module whose forward pass must agree with it. The
image stream provides queries; the difference-map stream provides keys and
values; a mean-pooled affine head with sigmoid yields P(fake).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
from torch import nn

from ._version import __version__
from .errors import BackendError, ParameterError, ShapeError, TrainingError
from .images import ImageArray, clamp01

__all__ = [
    "FeatureSequence",
    "FusionWeights",
    "AugmentationPolicy",
    "AugmentationTrace",
    "TrainConfig",
    "ConvEncoder",
    "CrossAttentionFusion",
    "DetectorModel",
    "build_detector",
    "extract_features",
    "attention_maps",
    "cross_attention_fuse",
    "classify",
    "augment",
    "augment_pair",
    "center_crop",
    "train_detector",
    "detector_scores",
    "save_checkpoint",
    "load_checkpoint",
    "save_loss_trace",
]


@dataclass(frozen=True)
class FeatureSequence:
    """Dense (positions, dim) features tagged with their stream of origin."""

    data: np.ndarray
    origin: str  # "image" | "sare"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ShapeError(f"feature sequence must be (positions>=1, dim), got {data.shape}")
        if not np.isfinite(data).all():
            raise ParameterError(f"non-finite entries in {self.origin} features")
        if self.origin not in ("image", "sare", "fused"):
            raise ParameterError(f"unknown feature origin {self.origin!r}")
        object.__setattr__(self, "data", data)

    @property
    def positions(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FusionWeights:
    """Projection matrices of one cross-attention block (all bias-free)."""

    w_q: np.ndarray  # (d_x, d)
    w_k: np.ndarray  # (d_S, d)
    w_v: np.ndarray  # (d_S, d)
    w_out: np.ndarray  # (d, d)
    head_count: int
    residual: bool = False

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_out"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.ndim != 2:
                raise ShapeError(f"{name} must be a matrix, got shape {arr.shape}")
            object.__setattr__(self, name, arr)
        d = self.w_q.shape[1]
        if self.w_k.shape[1] != d or self.w_v.shape[1] != d or self.w_out.shape != (d, d):
            raise ShapeError("projection output dims disagree")
        if self.head_count < 1 or d % self.head_count != 0:
            raise ParameterError(f"fusion dim {d} not divisible by head_count {self.head_count}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention_maps(f_x: FeatureSequence, f_s: FeatureSequence, w: FusionWeights) -> np.ndarray:
    """Per-head attention (head_count, queries, keys); every row is a
    softmax over keys. Probe used by the fusion op itself and by checks."""
    if f_x.dim != w.w_q.shape[0]:
        raise ShapeError(f"query dim {f_x.dim} incompatible with W_Q {w.w_q.shape}")
    if f_s.dim != w.w_k.shape[0]:
        raise ShapeError(f"key/value dim {f_s.dim} incompatible with W_K {w.w_k.shape}")
    q = f_x.data @ w.w_q  # (Px, d)
    k = f_s.data @ w.w_k
    d_head = w.dim // w.head_count
    scale = 1.0 / math.sqrt(d_head)
    heads = []
    for h in range(w.head_count):
        sl = slice(h * d_head, (h + 1) * d_head)
        heads.append(_softmax_rows((q[:, sl] @ k[:, sl].T) * scale))
    return np.stack(heads)


def cross_attention_fuse(f_x: FeatureSequence, f_s: FeatureSequence, w: FusionWeights) -> FeatureSequence:
    """Reference fusion: Q from the image stream, K/V from the difference
    stream, per-head scaled dot-product attention, concat, output projection.
    Output has one position per query."""
    attn = attention_maps(f_x, f_s, w)
    v = f_s.data @ w.w_v
    d_head = w.dim // w.head_count
    heads = [attn[h] @ v[:, h * d_head : (h + 1) * d_head] for h in range(w.head_count)]
    fused = np.concatenate(heads, axis=1) @ w.w_out
    if w.residual:
        fused = fused + f_x.data @ w.w_q
    return FeatureSequence(data=fused, origin="fused")


@dataclass(frozen=True)
class ClassifierHead:
    weight: np.ndarray  # (d,)
    bias: float

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float32).reshape(-1))


def classify(f_fused: FeatureSequence, head: ClassifierHead) -> float:
    """Mean-pool positions, affine, sigmoid. Returned value is P(fake)."""
    pooled = f_fused.data.mean(axis=0)
    if pooled.shape[0] != head.weight.shape[0]:
        raise ShapeError(f"head expects dim {head.weight.shape[0]}, got {pooled.shape[0]}")
    logit = float(pooled @ head.weight) + float(head.bias)
    return 1.0 / (1.0 + math.exp(-logit))


# ---------------------------------------------------------------------------
# torch modules


class ConvEncoder(nn.Module):
    """Five stride-2 conv stages (total stride 32) emitting a position grid
    flattened to a sequence: 224 input -> 7x7 = 49 positions."""

    def __init__(self, out_dim: int = 128, width: int = 32):
        super().__init__()
        chans = [3, width, width * 2, width * 4, width * 4, out_dim]
        blocks: list[nn.Module] = []
        for i in range(5):
            blocks.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
            if i < 4:
                blocks.append(nn.GroupNorm(8, chans[i + 1]))
                blocks.append(nn.SiLU())
        self.net = nn.Sequential(*blocks)
        self.out_dim = out_dim
        self.width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.net(x)  # (B, D, h, w)
        b, d, h, w = feat.shape
        return feat.reshape(b, d, h * w).transpose(1, 2)  # (B, P, D)


class CrossAttentionFusion(nn.Module):
    def __init__(self, d_x: int, d_s: int, dim: int = 256, head_count: int = 8, residual: bool = False):
        super().__init__()
        if dim % head_count != 0:
            raise ParameterError(f"fusion dim {dim} not divisible by head_count {head_count}")
        self.proj_q = nn.Linear(d_x, dim, bias=False)
        self.proj_k = nn.Linear(d_s, dim, bias=False)
        self.proj_v = nn.Linear(d_s, dim, bias=False)
        self.proj_out = nn.Linear(dim, dim, bias=False)
        self.dim = dim
        self.head_count = head_count
        self.residual = residual

    def forward(self, f_x: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        b, px, _ = f_x.shape
        ps = f_s.shape[1]
        d_head = self.dim // self.head_count
        q = self.proj_q(f_x).reshape(b, px, self.head_count, d_head).transpose(1, 2)
        k = self.proj_k(f_s).reshape(b, ps, self.head_count, d_head).transpose(1, 2)
        v = self.proj_v(f_s).reshape(b, ps, self.head_count, d_head).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_head), dim=-1)
        fused = (attn @ v).transpose(1, 2).reshape(b, px, self.dim)
        fused = self.proj_out(fused)
        if self.residual:
            fused = fused + self.proj_q(f_x)
        return fused

    def export_weights(self) -> FusionWeights:
        """Numpy view of the block, for checking against the reference op."""
        return FusionWeights(
            w_q=self.proj_q.weight.detach().cpu().numpy().T,
            w_k=self.proj_k.weight.detach().cpu().numpy().T,
            w_v=self.proj_v.weight.detach().cpu().numpy().T,
            w_out=self.proj_out.weight.detach().cpu().numpy().T,
            head_count=self.head_count,
            residual=self.residual,
        )


class DetectorModel(nn.Module):
    """Frozen-by-default image encoder, trainable difference-map encoder,
    cross-attention fusion, zero-initialized affine head (so a fresh model
    outputs 0.5 everywhere and its balanced-data loss starts at ln 2)."""

    def __init__(
        self,
        image_encoder: ConvEncoder,
        semantic_encoder: ConvEncoder,
        fusion: CrossAttentionFusion,
        input_size: int = 224,
        freeze_image: bool = True,
        freeze_semantic: bool = False,
    ):
        super().__init__()
        self.image_encoder = image_encoder
        self.semantic_encoder = semantic_encoder
        self.fusion = fusion
        self.head = nn.Linear(fusion.dim, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.input_size = input_size
        self.freeze_image = freeze_image
        self.freeze_semantic = freeze_semantic
        self.image_encoder.requires_grad_(not freeze_image)
        self.semantic_encoder.requires_grad_(not freeze_semantic)

    def logits(self, image: torch.Tensor, sare: torch.Tensor) -> torch.Tensor:
        f_x = self.image_encoder(image)
        f_s = self.semantic_encoder(sare)
        fused = self.fusion(f_x, f_s)
        return self.head(fused.mean(dim=1)).squeeze(-1)

    def forward(self, image: torch.Tensor, sare: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(image, sare))

    def arch_spec(self) -> dict:
        return {
            "input_size": self.input_size,
            "image_encoder": {"out_dim": self.image_encoder.out_dim, "width": self.image_encoder.width},
            "semantic_encoder": {
                "out_dim": self.semantic_encoder.out_dim,
                "width": self.semantic_encoder.width,
            },
            "fusion": {
                "d_x": self.image_encoder.out_dim,
                "d_s": self.semantic_encoder.out_dim,
                "dim": self.fusion.dim,
                "head_count": self.fusion.head_count,
                "residual": self.fusion.residual,
            },
            "frozen": {"image_encoder": self.freeze_image, "semantic_encoder": self.freeze_semantic},
        }


def build_detector(
    input_size: int = 224,
    image_dim: int = 128,
    semantic_dim: int = 128,
    fusion_dim: int = 256,
    head_count: int = 8,
    width: int = 32,
    residual: bool = False,
    freeze_image: bool = True,
    freeze_semantic: bool = False,
    seed: int = 0,
) -> DetectorModel:
    torch.manual_seed(seed)
    return DetectorModel(
        ConvEncoder(out_dim=image_dim, width=width),
        ConvEncoder(out_dim=semantic_dim, width=width),
        CrossAttentionFusion(image_dim, semantic_dim, fusion_dim, head_count, residual),
        input_size=input_size,
        freeze_image=freeze_image,
        freeze_semantic=freeze_semantic,
    )


def _to_batch(arr: ImageArray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).unsqueeze(0)


def extract_features(image: ImageArray, sare: ImageArray, model: DetectorModel) -> tuple[FeatureSequence, FeatureSequence]:
    """Run both encoders on one (image, difference-map) pair."""
    model.eval()
    with torch.no_grad():
        f_x = model.image_encoder(_to_batch(image))[0].numpy()
        if not np.isfinite(f_x).all():
            raise BackendError("non-finite activations", stage="image encoder")
        f_s = model.semantic_encoder(_to_batch(sare))[0].numpy()
        if not np.isfinite(f_s).all():
            raise BackendError("non-finite activations", stage="semantic encoder")
    return FeatureSequence(f_x, "image"), FeatureSequence(f_s, "sare")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Train-time pipeline: random-crop -> flip -> noise -> blur -> rotate.
    Eval mode is center-crop only. Photometric steps (noise, blur) touch the
    image stream only; geometric steps are shared with its difference map."""

    crop_size: int = 224
    flip_p: float = 0.5
    noise_p: float = 0.5
    noise_sigma: tuple[float, float] = (0.0, 0.1)
    blur_p: float = 0.5
    blur_kernel: int = 5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    rotate_p: float = 0.5
    rotate_degrees: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        for name in ("flip_p", "noise_p", "blur_p", "rotate_p"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ParameterError(f"{name} must be in [0, 1], got {p}")
        if self.crop_size < 1:
            raise ParameterError(f"crop_size must be positive, got {self.crop_size}")
        if self.blur_kernel % 2 != 1:
            raise ParameterError(f"blur_kernel must be odd, got {self.blur_kernel}")


@dataclass(frozen=True)
class AugmentationTrace:
    """What one augmentation call actually did (crop window in particular),
    so geometric pairing between streams is assertable."""

    crop_y: int
    crop_x: int
    crop_size: int
    flipped: bool
    noise_sigma: float | None
    blur_sigma: float | None
    angle: float | None


def center_crop(image: ImageArray, size: int) -> ImageArray:
    _, h, w = image.shape
    if h < size or w < size:
        raise ParameterError(f"image {h}x{w} smaller than crop {size}")
    y = (h - size) // 2
    x = (w - size) // 2
    return np.ascontiguousarray(image[:, y : y + size, x : x + size])


def _rotate(chw: ImageArray, angle: float) -> ImageArray:
    hwc = chw.transpose(1, 2, 0)
    h, w = hwc.shape[:2]
    m = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle, 1.0)
    out = cv2.warpAffine(hwc, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def augment_pair(
    image: ImageArray,
    sare: ImageArray | None,
    policy: AugmentationPolicy,
    rng_seed: int,
    train: bool = True,
) -> tuple[ImageArray, ImageArray | None, AugmentationTrace]:
    """Augment an image and (optionally) its paired difference map with one
    shared geometric transform stream."""
    _, h, w = image.shape
    size = policy.crop_size
    if h < size or w < size:
        raise ParameterError(f"image {h}x{w} smaller than crop {size}")
    if sare is not None and sare.shape != image.shape:
        raise ShapeError(f"paired map shape {sare.shape} != image shape {image.shape}")
    rng = np.random.default_rng(rng_seed)

    if train:
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
    else:
        y, x = (h - size) // 2, (w - size) // 2
    img = np.ascontiguousarray(image[:, y : y + size, x : x + size]).astype(np.float32)
    pair = None if sare is None else np.ascontiguousarray(sare[:, y : y + size, x : x + size]).astype(np.float32)

    flipped = False
    noise_sigma = blur_sigma = angle = None
    if train:
        if rng.random() < policy.flip_p:
            flipped = True
            img = img[:, :, ::-1].copy()
            if pair is not None:
                pair = pair[:, :, ::-1].copy()
        if rng.random() < policy.noise_p:
            noise_sigma = float(rng.uniform(*policy.noise_sigma))
            img = clamp01(img + rng.normal(0.0, noise_sigma, img.shape).astype(np.float32))
        if rng.random() < policy.blur_p:
            blur_sigma = float(rng.uniform(*policy.blur_sigma))
            hwc = cv2.GaussianBlur(
                img.transpose(1, 2, 0), (policy.blur_kernel, policy.blur_kernel), blur_sigma
            )
            img = np.ascontiguousarray(hwc.transpose(2, 0, 1))
        if rng.random() < policy.rotate_p:
            angle = float(rng.uniform(*policy.rotate_degrees))
            img = _rotate(img, angle)
            if pair is not None:
                pair = _rotate(pair, angle)
    trace = AugmentationTrace(y, x, size, flipped, noise_sigma, blur_sigma, angle)
    return img, pair, trace


def augment(image: ImageArray, policy: AugmentationPolicy, rng_seed: int, train: bool = True) -> ImageArray:
    out, _, _ = augment_pair(image, None, policy, rng_seed, train=train)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 17
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be positive")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    h = hashlib.sha256(f"{seed}/{epoch}/{index}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def train_detector(
    samples: Sequence[tuple[ImageArray, ImageArray, int]],
    config: TrainConfig,
    model: DetectorModel,
) -> tuple[DetectorModel, list[tuple[int, int, float]]]:
    """Minimize binary cross-entropy over (image, difference map, label)
    triples. Returns the model and a (epoch, step, loss) trace."""
    if not samples:
        raise TrainingError("empty training set")
    labels = {int(lbl) for _, _, lbl in samples}
    if labels != {0, 1}:
        raise TrainingError(f"training set must contain both classes, found labels {sorted(labels)}")

    torch.manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("no trainable parameters (all components frozen)")
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()
    shuffle_rng = np.random.default_rng(config.seed)
    trace: list[tuple[int, int, float]] = []

    model.train()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(samples))
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            idxs = order[start : start + config.batch_size]
            imgs, maps, ys = [], [], []
            for i in idxs:
                img, sare, lbl = samples[i]
                a_img, a_sare, _ = augment_pair(
                    img, sare, config.augmentation, _sample_seed(config.seed, epoch, int(i))
                )
                imgs.append(a_img)
                maps.append(a_sare)
                ys.append(float(lbl))
            xb = torch.from_numpy(np.stack(imgs))
            sb = torch.from_numpy(np.stack(maps))
            yb = torch.tensor(ys)
            logit = model.logits(xb, sb)
            loss = loss_fn(logit, yb)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"last finite losses: {[round(v, 4) for _, _, v in trace[-3:]]}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append((epoch, step, float(loss.item())))
    model.eval()
    return model, trace


def detector_scores(
    model: DetectorModel,
    pairs: Sequence[tuple[ImageArray, ImageArray]],
    batch_size: int = 64,
) -> np.ndarray:
    """Eval-mode P(fake) per pair; inputs are center-cropped to the model size."""
    model.eval()
    out: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            xb = torch.from_numpy(np.stack([center_crop(i, model.input_size) for i, _ in chunk]))
            sb = torch.from_numpy(np.stack([center_crop(s, model.input_size) for _, s in chunk]))
            out.append(model(xb, sb).numpy())
    return np.concatenate(out).astype(np.float64)


# ---------------------------------------------------------------------------
# persistence


def save_loss_trace(trace: Sequence[tuple[int, int, float]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in trace:
            fh.write(f"{epoch},{step},{loss!r}\n")


def save_checkpoint(model: DetectorModel, directory: str | Path, train_config: TrainConfig | None = None) -> None:
    """weights.bin holds raw little-endian float32 arrays concatenated in the
    order declared by model.json's parameter list."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = list(state.keys())
    blobs = []
    params = []
    for name in names:
        arr = state[name].detach().cpu().numpy().astype("<f4")
        params.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    meta = {
        "format": 1,
        "version": __version__,
        "architecture": model.arch_spec(),
        "parameters": params,
        "training": None if train_config is None else _train_config_dict(train_config),
    }
    (directory / "weights.bin").write_bytes(b"".join(blobs))
    (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def _train_config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["augmentation"] = asdict(config.augmentation)
    return d


def load_checkpoint(directory: str | Path) -> DetectorModel:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    arch = meta["architecture"]
    model = build_detector(
        input_size=arch["input_size"],
        image_dim=arch["image_encoder"]["out_dim"],
        semantic_dim=arch["semantic_encoder"]["out_dim"],
        fusion_dim=arch["fusion"]["dim"],
        head_count=arch["fusion"]["head_count"],
        width=arch["image_encoder"]["width"],
        residual=arch["fusion"]["residual"],
        freeze_image=arch["frozen"]["image_encoder"],
        freeze_semantic=arch["frozen"]["semantic_encoder"],
    )
    raw = (directory / "weights.bin").read_bytes()
    state = {}
    offset = 0
    for spec in meta["parameters"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise ParameterError(f"weights.bin truncated at parameter {spec['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[spec["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(raw):
        raise ParameterError(f"weights.bin has {len(raw) - offset} trailing bytes")
    model.load_state_dict(state)
    model.eval()
    return model

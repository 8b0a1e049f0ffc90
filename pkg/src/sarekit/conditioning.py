"""Captions and text-condition embeddings behind pluggable backends.

Real captioners (BLIP, LLaVA, ...) and text encoders are consumed as opaque
backends through the protocols below; they must run in a deterministic
decoding mode and bake that mode into their identifier so cache keys stay
honest. For desk-scale work this module ships a synthetic captioner driven
by a digest -> factors index and a hash-seeded text encoder.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol

import numpy as np

from .errors import CaptioningError, ParameterError
from .images import ImageArray, image_digest

# conditioning window of the reconstruction backbone family
DEFAULT_TOKEN_LIMIT = 77


@dataclass(frozen=True)
class Caption:
    text: str
    captioner_id: str
    image_digest: str

    def __post_init__(self):
        if not self.captioner_id:
            raise ParameterError("captioner_id must be nonempty")


@dataclass(frozen=True)
class ConditionEmbedding:
    """Dense (tokens, embed_dim) conditioning array with provenance."""

    data: np.ndarray
    source: str  # "caption" | "null"
    encoder_id: str
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ParameterError(f"embedding must be (tokens>=1, dim), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("embedding contains non-finite entries")
        if self.source not in ("caption", "null"):
            raise ParameterError(f"source must be 'caption' or 'null', got {self.source!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


class CaptionerBackend(Protocol):
    def caption(self, image: ImageArray) -> Caption: ...

    def identifier(self) -> str: ...


class TextEncoderBackend(Protocol):
    def embed(self, text: str) -> ConditionEmbedding: ...

    def null_embedding(self) -> ConditionEmbedding: ...

    def identifier(self) -> str: ...


def generate_caption(image: ImageArray, backend: CaptionerBackend) -> Caption:
    """Caption an image, guaranteeing the digest provenance field is set."""
    digest = image_digest(image)
    try:
        cap = backend.caption(image)
    except CaptioningError:
        raise
    except Exception as exc:
        raise CaptioningError(
            f"captioner {backend.identifier()!r} failed: {exc}",
            backend_id=backend.identifier(),
            image_digest=digest,
        ) from exc
    if cap.image_digest and cap.image_digest != digest:
        raise CaptioningError(
            f"captioner {backend.identifier()!r} returned digest {cap.image_digest[:12]} "
            f"for image {digest[:12]}",
            backend_id=backend.identifier(),
            image_digest=digest,
        )
    if not cap.image_digest:
        cap = Caption(text=cap.text, captioner_id=cap.captioner_id, image_digest=digest)
    return cap


def embed_caption(caption: Caption, encoder: TextEncoderBackend) -> ConditionEmbedding:
    emb = encoder.embed(caption.text)
    if emb.source != "caption":
        raise ParameterError(f"encoder returned source={emb.source!r} for a caption embed")
    return emb


def null_embedding(encoder: TextEncoderBackend) -> ConditionEmbedding:
    return encoder.null_embedding()


def _stable_seed(*parts: str) -> int:
    h = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class SyntheticCaptioner:
    """Deterministic template captioner for controlled experiments.

    Looks scenes up by image digest in a factor index (digest -> ordered
    mapping of caption-eligible factor names to values, e.g.
    {"color": "red", "shape": "circle"}). At fidelity f each eligible
    factor is revealed independently with probability f, masked by a
    stream seeded from (seed, digest), so captions are reproducible
    per image. fidelity=1.0 reveals everything; fidelity=0.0 yields the
    empty caption.
    """

    def __init__(self, factor_index: Mapping[str, Mapping[str, str]], fidelity: float = 1.0, seed: int = 0):
        if not (0.0 <= fidelity <= 1.0):
            raise ParameterError(f"fidelity must be in [0, 1], got {fidelity}")
        self.factor_index = dict(factor_index)
        self.fidelity = float(fidelity)
        self.seed = int(seed)

    def identifier(self) -> str:
        return f"synthetic-f{self.fidelity:g}-s{self.seed}"

    def factor_mask(self, digest: str, n_factors: int) -> list[bool]:
        """Per-factor reveal decisions for one image; exact at the endpoints."""
        if self.fidelity >= 1.0:
            return [True] * n_factors
        if self.fidelity <= 0.0:
            return [False] * n_factors
        rng = np.random.default_rng(_stable_seed("caption-mask", str(self.seed), digest))
        return [bool(r < self.fidelity) for r in rng.random(n_factors)]

    def caption_for_digest(self, digest: str) -> Caption:
        factors = self.factor_index.get(digest)
        if factors is None:
            raise CaptioningError(
                f"no scene factors registered for image {digest[:12]}",
                backend_id=self.identifier(),
                image_digest=digest,
            )
        mask = self.factor_mask(digest, len(factors))
        revealed = {name: value for (name, value), keep in zip(factors.items(), mask) if keep}
        return Caption(text=render_caption(revealed), captioner_id=self.identifier(), image_digest=digest)

    def caption(self, image: ImageArray) -> Caption:
        return self.caption_for_digest(image_digest(image))


def render_caption(factors: Mapping[str, str]) -> str:
    """Template: 'a {color} {shape}'; masked factors degrade the phrase."""
    color = factors.get("color")
    shape = factors.get("shape")
    if color is None and shape is None:
        return ""
    words = ["a"]
    if color is not None:
        words.append(color)
    words.append(shape if shape is not None else "shape")
    return " ".join(words)


class NullCaptioner:
    """Control backend: every image gets the empty caption, so guided
    reconstruction degenerates to the unconditional branch."""

    def caption(self, image: ImageArray) -> Caption:
        return Caption(text="", captioner_id=self.identifier(), image_digest=image_digest(image))

    def identifier(self) -> str:
        return "null-caption"


class HashTextEncoder:
    """Dependency-free text encoder: tokens map to fixed pseudo-random vectors.

    Each whitespace token gets a vector drawn from a generator seeded by a
    hash of the token string, so embeddings are deterministic across
    processes and distinct captions almost surely differ. The empty prompt
    maps to a reserved constant vector, which doubles as the null
    embedding.
    """

    def __init__(self, dim: int = 64, token_limit: int = DEFAULT_TOKEN_LIMIT, encoder_id: str = "hash64-v1"):
        if dim < 1:
            raise ParameterError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.token_limit = token_limit
        self.encoder_id = encoder_id

    def identifier(self) -> str:
        return self.encoder_id

    def _token_vector(self, token: str) -> np.ndarray:
        rng = np.random.default_rng(_stable_seed("token", self.encoder_id, token))
        return rng.standard_normal(self.dim).astype(np.float32)

    def embed(self, text: str) -> ConditionEmbedding:
        tokens = text.split()
        warnings: tuple[str, ...] = ()
        if len(tokens) > self.token_limit:
            warnings = (f"caption truncated from {len(tokens)} to {self.token_limit} tokens",)
            tokens = tokens[: self.token_limit]
        if not tokens:
            data = self._token_vector("\x00null")[None, :]
        else:
            data = np.stack([self._token_vector(tok) for tok in tokens])
        return ConditionEmbedding(data=data, source="caption", encoder_id=self.encoder_id, warnings=warnings)

    def null_embedding(self) -> ConditionEmbedding:
        data = self._token_vector("\x00null")[None, :]
        return ConditionEmbedding(data=data, source="null", encoder_id=self.encoder_id)


class CaptionFileBackend:
    """Captioner that replays a previously written caption JSONL file.

    This is how offline stages consume the captioning stage's output: the
    image's digest is looked up in the file, so the captions must have been
    generated on identically preprocessed pixels.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self._captions = read_captions(path)
        ids = {c.captioner_id for c in self._captions.values()}
        if len(ids) > 1:
            raise ParameterError(f"caption file {path} mixes captioners: {sorted(ids)}")
        self._id = next(iter(ids)) if ids else "empty-caption-file"

    def caption(self, image: ImageArray) -> Caption:
        digest = image_digest(image)
        cap = self._captions.get(digest)
        if cap is None:
            raise CaptioningError(
                f"no caption on file for image {digest[:12]}",
                backend_id=self.identifier(),
                image_digest=digest,
            )
        return cap

    def identifier(self) -> str:
        return self._id


def captions_filename(captioner_id: str) -> str:
    return f"captions.{captioner_id}.jsonl"


def read_captions(path: str | os.PathLike) -> dict[str, Caption]:
    """Load a caption JSONL file into a digest-keyed mapping."""
    out: dict[str, Caption] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            cap = Caption(text=rec["text"], captioner_id=rec["captioner_id"], image_digest=rec["image_digest"])
            out[cap.image_digest] = cap
    return out


def append_captions(path: str | os.PathLike, captions: Iterable[Caption]) -> int:
    """Append caption records, skipping digests already present. Returns the
    number of new lines written."""
    existing: set[str] = set()
    if os.path.exists(path):
        existing = set(read_captions(path))
    written = 0
    with open(path, "a", encoding="utf-8") as fh:
        for cap in captions:
            if cap.image_digest in existing:
                continue
            fh.write(
                json.dumps(
                    {"image_digest": cap.image_digest, "captioner_id": cap.captioner_id, "text": cap.text},
                    ensure_ascii=False,
                )
                + "\n"
            )
            existing.add(cap.image_digest)
            written += 1
    return written

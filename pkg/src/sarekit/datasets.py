"""Directory-layout ingestion into a uniform JSONL manifest.

Supported layouts all reduce to the same five-field entry
(path, label, subset, split, digest) so downstream stages never care
which benchmark a file came from.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import EmptySelectionError, IngestError
from .images import image_digest, load_image

logger = logging.getLogger(__name__)

LABEL_REAL = 0
LABEL_FAKE = 1
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}

__all__ = [
    "LABEL_REAL",
    "LABEL_FAKE",
    "ManifestEntry",
    "Manifest",
    "ingest_genimage_layout",
    "ingest_forensynths_layout",
    "ingest_communityforensics_layout",
    "select",
    "save_manifest",
    "load_manifest",
    "validate_entries",
]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    subset: str
    split: str
    digest: str = ""  # lazily computed; see validate_entries

    def __post_init__(self):
        if self.label not in (LABEL_REAL, LABEL_FAKE):
            raise IngestError(f"label must be 0 (real) or 1 (fake), got {self.label}")
        if self.split not in SPLITS:
            raise IngestError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    source_root: str = ""
    layout: str = ""
    ingested_at: float = 0.0

    def __post_init__(self):
        seen: set[str] = set()
        for e in self.entries:
            if e.path in seen:
                raise IngestError(f"duplicate path in manifest: {e.path}")
            seen.add(e.path)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def subsets(self) -> tuple[str, ...]:
        out: list[str] = []
        for e in self.entries:
            if e.subset not in out:
                out.append(e.subset)
        return tuple(out)

    def class_counts(self) -> dict[tuple[str, int], int]:
        """(split, label) -> count, the sanity numbers logged at ingestion."""
        counts: dict[tuple[str, int], int] = {}
        for e in self.entries:
            k = (e.split, e.label)
            counts[k] = counts.get(k, 0) + 1
        return counts


def _iter_images(directory: Path) -> list[Path]:
    out = [
        p
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    return out


def _collect_class_dir(
    class_dir: Path,
    label: int,
    subset: str,
    split: str,
    seen_resolved: set[Path],
    entries: list[ManifestEntry],
) -> None:
    files = _iter_images(class_dir)
    if not files:
        logger.warning("empty class directory: %s", class_dir)
        return
    for p in files:
        real = p.resolve()
        if real in seen_resolved:
            continue  # symlink aliases collapse to one entry
        seen_resolved.add(real)
        entries.append(ManifestEntry(path=str(p), label=label, subset=subset, split=split))


def _ingest_class_layout(
    root: str | Path,
    layout: str,
    class_map: dict[str, int],
    split_of: Callable[[Path, Path], str | None],
) -> Manifest:
    """Shared walker: <subset>/.../<class-dir>/images, class-dir names fixed
    per layout. Directories that match nothing are collected and reported."""
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"ingestion root {root} is not a directory")
    entries: list[ManifestEntry] = []
    seen_resolved: set[Path] = set()
    unmatched: list[str] = []
    for subset_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        subset = subset_dir.name
        matched_any = False
        for sub in sorted(p for p in subset_dir.rglob("*") if p.is_dir()):
            if sub.name not in class_map:
                continue
            split = split_of(sub, subset_dir)
            if split is None:
                unmatched.append(str(sub))
                continue
            matched_any = True
            _collect_class_dir(sub, class_map[sub.name], subset, split, seen_resolved, entries)
        if not matched_any:
            unmatched.append(str(subset_dir))
    if not entries:
        raise IngestError(
            f"no {layout} layout found under {root}; unmatched directories: {unmatched}"
        )
    if unmatched:
        raise IngestError(f"unrecognized directories under {root}: {unmatched}")
    return Manifest(
        entries=tuple(entries), source_root=str(root), layout=layout, ingested_at=time.time()
    )


def ingest_genimage_layout(root: str | Path) -> Manifest:
    """<subset>/<split>/{ai,nature}/... ; ai -> fake, nature -> real."""

    def split_of(class_dir: Path, subset_dir: Path) -> str | None:
        rel = class_dir.relative_to(subset_dir).parts
        if len(rel) == 2 and rel[0] in SPLITS:
            return rel[0]
        return None

    return _ingest_class_layout(root, "genimage", {"ai": LABEL_FAKE, "nature": LABEL_REAL}, split_of)


def ingest_forensynths_layout(root: str | Path) -> Manifest:
    """<subset>/{0_real,1_fake}/... ; everything is a test split."""

    def split_of(class_dir: Path, subset_dir: Path) -> str | None:
        if class_dir.parent == subset_dir:
            return "test"
        return None

    return _ingest_class_layout(
        root, "forensynths", {"0_real": LABEL_REAL, "1_fake": LABEL_FAKE}, split_of
    )


def ingest_communityforensics_layout(root: str | Path) -> Manifest:
    """<subset>/{real,fake}/... ; real-image provenance is whatever the tree
    says (the class directory is authoritative). Test split."""

    def split_of(class_dir: Path, subset_dir: Path) -> str | None:
        if class_dir.parent == subset_dir:
            return "test"
        return None

    return _ingest_class_layout(
        root, "communityforensics", {"real": LABEL_REAL, "fake": LABEL_FAKE}, split_of
    )


LAYOUT_ADAPTERS: dict[str, Callable[[str | Path], Manifest]] = {
    "genimage": ingest_genimage_layout,
    "forensynths": ingest_forensynths_layout,
    "communityforensics": ingest_communityforensics_layout,
}


def select(
    manifest: Manifest,
    subsets: str | Sequence[str] | None = None,
    split: str | None = None,
    label: int | None = None,
) -> Manifest:
    """Order-preserving filter. Raises rather than returning an empty
    manifest, so a typo'd subset can never silently train on nothing."""
    if isinstance(subsets, str):
        subsets = [subsets]
    wanted = None if subsets is None else set(subsets)
    kept = tuple(
        e
        for e in manifest.entries
        if (wanted is None or e.subset in wanted)
        and (split is None or e.split == split)
        and (label is None or e.label == label)
    )
    if not kept:
        raise EmptySelectionError(
            f"no entries match subsets={subsets!r} split={split!r} label={label!r} "
            f"(manifest has subsets {list(manifest.subsets)})"
        )
    return replace(manifest, entries=kept)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for e in manifest.entries:
            row = {
                "path": e.path,
                "label": e.label,
                "subset": e.subset,
                "split": e.split,
                "digest": e.digest,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    entries: list[ManifestEntry] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                entries.append(
                    ManifestEntry(
                        path=row["path"],
                        label=int(row["label"]),
                        subset=row["subset"],
                        split=row["split"],
                        digest=row.get("digest", ""),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise IngestError(f"{path}:{line_no}: malformed manifest row: {exc}") from exc
    return Manifest(entries=tuple(entries), source_root="", layout="jsonl", ingested_at=0.0)


@dataclass
class QuarantineReport:
    """Files that failed image decode during validation; never silently dropped."""

    failed: list[tuple[str, str]] = field(default_factory=list)  # (path, reason)

    def __bool__(self) -> bool:
        return bool(self.failed)


def validate_entries(manifest: Manifest) -> tuple[Manifest, QuarantineReport]:
    """Decode every file, fill content digests, quarantine undecodable ones."""
    report = QuarantineReport()
    kept: list[ManifestEntry] = []
    for e in manifest.entries:
        try:
            img = load_image(e.path)
        except Exception as exc:
            report.failed.append((e.path, str(exc)))
            logger.warning("quarantined %s: %s", e.path, exc)
            continue
        kept.append(replace(e, digest=image_digest(img)))
    return replace(manifest, entries=tuple(kept)), report


def iter_paths(manifest: Manifest) -> Iterable[Path]:
    for e in manifest.entries:
        yield Path(e.path)

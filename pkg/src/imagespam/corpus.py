"""Labeled image corpora: ingestion, deduplication/cleaning, and splits.

A corpus is an ordered list of labeled image samples plus bookkeeping
(per-source counts, records of files that failed to decode).  Manifests are
UTF-8 text with one tab-separated record per line:

    <relative-path>\t<label:spam|ham>\t<corpus_tag>

Lines starting with ``#`` are ignored.  Paths are resolved relative to the
manifest's directory.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .imgops import bilinear_resize

LABELS = ("spam", "ham", "unlabeled")
CORPUS_TAGS = (
    "personal_spam",
    "spamarchive_spam",
    "personal_ham",
    "normal_ham",
    "synthetic",
    "augmented",
)
REMOVAL_REASONS = (
    "exact_duplicate",
    "near_duplicate",
    "solid_color",
    "too_small",
    "unreadable",
)

NET_INPUT_SIZE = 32


class ManifestError(Exception):
    """Raised when a manifest file is missing or unusable as a whole."""


@dataclass
class ImageSample:
    """One labeled image with provenance and content signatures.

    ``byte_digest`` is the SHA-256 hex digest of the original file bytes for
    ingested files, or of a canonical pixel serialization for samples that
    were synthesized in memory.  ``phash`` is the 64-bit average hash.
    Augmented samples record the ids of the samples they were derived from.
    """

    id: str
    pixels: np.ndarray  # H x W x 3, uint8
    label: str
    corpus_tag: str
    source_path: str = ""
    byte_digest: str = ""
    phash: int = 0
    parent_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.corpus_tag not in CORPUS_TAGS:
            raise ValueError(f"unknown corpus_tag {self.corpus_tag!r}")
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"pixels must be H x W x 3 uint8, got {px.shape} {px.dtype}")


@dataclass
class SkipRecord:
    """A manifest row that did not become a sample, and why."""

    path: str
    reason: str


@dataclass
class Corpus:
    """Ordered sample collection with per-tag counts.

    ``counts`` is stored (not a property) so that consistency with the actual
    samples is checkable; it defaults to a recount at construction time.
    """

    samples: list[ImageSample] = field(default_factory=list)
    counts: dict[str, int] = None  # type: ignore[assignment]
    skipped: list[SkipRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.counts is None:
            self.counts = self.recount()

    def recount(self) -> dict[str, int]:
        counts = {tag: 0 for tag in CORPUS_TAGS}
        for s in self.samples:
            counts[s.corpus_tag] += 1
        return counts

    def validate(self) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in corpus")
        if self.counts != self.recount():
            raise ValueError("stored counts disagree with samples")

    def __len__(self) -> int:
        return len(self.samples)

    def label_total(self, label: str) -> int:
        return sum(1 for s in self.samples if s.label == label)

    def with_label(self, label: str) -> list[ImageSample]:
        return [s for s in self.samples if s.label == label]

    def digests(self) -> set[str]:
        return {s.byte_digest for s in self.samples}


@dataclass
class CleaningPolicy:
    """Thresholds for the unnecessary-image removal pass.

    Images whose smaller side is below ``min_side_px`` are dropped; images
    whose per-channel pixel variance is below ``solid_variance_threshold`` on
    the 0-255 scale count as solid-color; samples within
    ``phash_hamming_threshold`` bits of an earlier sample's average hash count
    as near-duplicates.
    """

    min_side_px: int = 32
    solid_variance_threshold: float = 1.0
    phash_hamming_threshold: int = 4

    def __post_init__(self):
        if self.min_side_px < 0 or self.solid_variance_threshold < 0 or self.phash_hamming_threshold < 0:
            raise ValueError("cleaning thresholds must be non-negative")


@dataclass
class CleaningReport:
    removed: dict[str, list[str]]
    kept_count: int

    def total_removed(self) -> int:
        return sum(len(v) for v in self.removed.values())


@dataclass
class SplitSpec:
    train_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_pixels(pixels: np.ndarray) -> str:
    """Stable digest for in-memory images (shape header + raw bytes)."""
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h = hashlib.sha256()
    h.update(b"pixels:%dx%dx%d:" % px.shape)
    h.update(px.tobytes())
    return h.hexdigest()


def average_hash(pixels: np.ndarray) -> int:
    """64-bit average hash of an image.

    The image is converted to grayscale (channel mean), reduced to an 8x8
    grid of block means (cell r,c covers rows [r*H//8, (r+1)*H//8) and the
    analogous columns), and bit ``i = r*8 + c`` (most significant bit first)
    is set iff that cell strictly exceeds the mean of all 64 cells.  Images
    smaller than 8 pixels on a side are bilinearly upsampled first.
    """
    px = np.asarray(pixels, dtype=np.float64)
    if px.size == 0:
        raise ValueError("empty image")
    gray = px.mean(axis=2) if px.ndim == 3 else px
    h, w = gray.shape
    if h < 8 or w < 8:
        gray = bilinear_resize(gray, max(h, 8), max(w, 8))
        h, w = gray.shape
    rb = np.arange(9) * h // 8
    cb = np.arange(9) * w // 8
    cells = np.empty((8, 8))
    for r in range(8):
        for c in range(8):
            cells[r, c] = gray[rb[r]:rb[r + 1], cb[c]:cb[c + 1]].mean()
    mean = cells.mean()
    bits = (cells > mean).ravel()
    value = 0
    for i, b in enumerate(bits):
        if b:
            value |= 1 << (63 - i)
    return value


def hamming64(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode raw file bytes to H x W x 3 uint8.

    Alpha is composited over white; grayscale/palette modes are expanded to
    three channels.  Raises on undecodable or truncated data.
    """
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
            rgba = im.convert("RGBA")
            white = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
            im = Image.alpha_composite(white, rgba).convert("RGB")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8)


def make_sample(
    pixels: np.ndarray,
    label: str,
    corpus_tag: str,
    sample_id: str,
    source_path: str = "",
    byte_digest: str = "",
    parent_ids: tuple[str, ...] = (),
) -> ImageSample:
    """Build a sample, filling in digest/phash from the pixels when absent."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    return ImageSample(
        id=sample_id,
        pixels=pixels,
        label=label,
        corpus_tag=corpus_tag,
        source_path=source_path,
        byte_digest=byte_digest or digest_pixels(pixels),
        phash=average_hash(pixels),
        parent_ids=parent_ids,
    )


def ingest(manifest_path: str | Path) -> Corpus:
    """Read a manifest and decode every listed image into a corpus.

    Unreadable or malformed rows are skipped and recorded on the returned
    corpus; a missing manifest is fatal.
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    samples: list[ImageSample] = []
    skipped: list[SkipRecord] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 3:
            skipped.append(SkipRecord(raw, f"malformed row at line {lineno}"))
            continue
        rel, label, tag = (p.strip() for p in parts)
        if label not in ("spam", "ham"):
            skipped.append(SkipRecord(rel, f"unknown label {label!r} at line {lineno}"))
            continue
        if tag not in CORPUS_TAGS:
            skipped.append(SkipRecord(rel, f"unknown corpus_tag {tag!r} at line {lineno}"))
            continue
        file_path = base / rel
        try:
            data = file_path.read_bytes()
            pixels = decode_image_bytes(data)
        except Exception as exc:  # noqa: BLE001 - any decode failure is a skip
            skipped.append(SkipRecord(str(rel), f"unreadable: {exc}"))
            continue
        digest = digest_bytes(data)
        samples.append(
            make_sample(
                pixels,
                label,
                tag,
                sample_id=f"s{lineno:05d}-{digest[:12]}",
                source_path=str(rel),
                byte_digest=digest,
            )
        )
    return Corpus(samples=samples, skipped=skipped)


def write_manifest(corpus: Corpus, manifest_path: str | Path) -> None:
    """Write samples back out in manifest format (paths as recorded)."""
    lines = [f"{s.source_path}\t{s.label}\t{s.corpus_tag}" for s in corpus.samples]
    Path(manifest_path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _is_solid_color(pixels: np.ndarray, threshold: float) -> bool:
    var = np.asarray(pixels, dtype=np.float64).var(axis=(0, 1))
    return bool(var.max() < threshold)


def clean(corpus: Corpus, policy: CleaningPolicy | None = None) -> tuple[Corpus, CleaningReport]:
    """Remove unnecessary images; returns the kept corpus and an audit report.

    Removal happens in a fixed order: unreadable rows recorded at ingestion,
    exact byte duplicates (first occurrence kept), near duplicates by average
    hash (first kept), solid-color images, and finally images below the
    minimum side length.  Deterministic given the input order; the report's
    accounting satisfies kept + removed == samples + skipped of the input.
    """
    policy = policy or CleaningPolicy()
    removed: dict[str, list[str]] = {reason: [] for reason in REMOVAL_REASONS}
    removed["unreadable"] = [rec.path for rec in corpus.skipped]

    seen_digests: set[str] = set()
    stage_exact: list[ImageSample] = []
    for s in corpus.samples:
        if s.byte_digest in seen_digests:
            removed["exact_duplicate"].append(s.id)
        else:
            seen_digests.add(s.byte_digest)
            stage_exact.append(s)

    kept_hashes: list[int] = []
    stage_near: list[ImageSample] = []
    for s in stage_exact:
        if any(hamming64(s.phash, h) <= policy.phash_hamming_threshold for h in kept_hashes):
            removed["near_duplicate"].append(s.id)
        else:
            kept_hashes.append(s.phash)
            stage_near.append(s)

    stage_solid = []
    for s in stage_near:
        if _is_solid_color(s.pixels, policy.solid_variance_threshold):
            removed["solid_color"].append(s.id)
        else:
            stage_solid.append(s)

    kept = []
    for s in stage_solid:
        if min(s.pixels.shape[0], s.pixels.shape[1]) < policy.min_side_px:
            removed["too_small"].append(s.id)
        else:
            kept.append(s)

    report = CleaningReport(removed=removed, kept_count=len(kept))
    return Corpus(samples=kept), report


def stratified_split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus]:
    """Split into train/test preserving per-label proportions.

    Every label present must have at least two samples.  Per label the train
    share is round(train_fraction * n), clamped so both sides stay non-empty;
    sample order within each side follows the input corpus.  Deterministic
    for a fixed seed.
    """
    by_label: dict[str, list[int]] = {}
    for i, s in enumerate(corpus.samples):
        by_label.setdefault(s.label, []).append(i)
    for label, idx in by_label.items():
        if len(idx) < 2:
            raise ValueError(f"label {label!r} has {len(idx)} sample(s); need at least 2 to split")

    rng = np.random.default_rng(spec.seed)
    train_idx: set[int] = set()
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        n = len(idx)
        n_train = int(np.floor(spec.train_fraction * n + 0.5))
        n_train = min(max(n_train, 1), n - 1)
        perm = rng.permutation(n)
        train_idx.update(idx[perm[:n_train]].tolist())

    train = [s for i, s in enumerate(corpus.samples) if i in train_idx]
    test = [s for i, s in enumerate(corpus.samples) if i not in train_idx]
    return Corpus(samples=train), Corpus(samples=test)


def to_net_input(sample: ImageSample | np.ndarray) -> np.ndarray:
    """Bilinearly resize to 32x32 and scale channel values to [0, 1]."""
    pixels = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample)
    out = bilinear_resize(pixels, NET_INPUT_SIZE, NET_INPUT_SIZE) / 255.0
    return out.astype(np.float32)


def batch_net_input(samples: list[ImageSample]) -> np.ndarray:
    """Stack per-sample net inputs into a B x 32 x 32 x 3 float32 batch."""
    if not samples:
        return np.zeros((0, NET_INPUT_SIZE, NET_INPUT_SIZE, 3), dtype=np.float32)
    return np.stack([to_net_input(s) for s in samples])

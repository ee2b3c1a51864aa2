"""Class-preserving sample synthesis to balance and diversify training data.

Spam-like samples are made by splicing the left half of one spam image onto
the resized right half of another.  Ham-like samples come from a
similar-image provider queried with ham seeds; the default provider ranks a
local image pool by color-histogram distance, which keeps experiments
reproducible (a networked search adapter can implement the same interface).
"""

from __future__ import annotations

import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, ImageSample, make_sample
from .imgops import resize_uint8


class AugmentationShortfall(UserWarning):
    """Emitted when generation stops short of the requested sample count."""


@dataclass
class AugmentConfig:
    n_similar_per_query: int = 100
    target_ham_like: int = 0
    target_spam_like: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_similar_per_query, self.target_ham_like, self.target_spam_like) < 0:
            raise ValueError("augmentation counts must be non-negative")


@dataclass
class SpliceResult:
    pixels: np.ndarray
    parent_left_id: str
    parent_right_id: str


class SimilarImageProvider(ABC):
    """Returns images visually similar to a query image."""

    @abstractmethod
    def query(self, image: ImageSample, count: int) -> list[ImageSample]:
        """Return up to ``count`` similar images, most similar first."""


def color_histogram(pixels: np.ndarray) -> np.ndarray:
    """Concatenated per-channel 8-bin histograms, each normalized to sum 1."""
    px = np.asarray(pixels, dtype=np.uint8)
    out = np.empty(24, dtype=np.float64)
    n = px.shape[0] * px.shape[1]
    for c in range(3):
        counts = np.bincount((px[:, :, c] >> 5).ravel(), minlength=8)[:8]
        out[c * 8:(c + 1) * 8] = counts / n
    return out


def offline_similarity_query(query: ImageSample, pool: Corpus, count: int) -> list[ImageSample]:
    """Rank a pool by ascending histogram L1 distance to the query.

    Ties break on sample id so the ranking is total and deterministic.
    """
    if not pool.samples:
        raise ValueError("similarity pool is empty")
    qh = color_histogram(query.pixels)
    scored = [
        (float(np.abs(color_histogram(s.pixels) - qh).sum()), s.id, s)
        for s in pool.samples
    ]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [s for _, _, s in scored[:count]]


class OfflineSimilarityProvider(SimilarImageProvider):
    """Histogram nearest-neighbor search over a fixed local pool."""

    def __init__(self, pool: Corpus):
        if not pool.samples:
            raise ValueError("similarity pool is empty")
        self.pool = pool
        self._hists = np.stack([color_histogram(s.pixels) for s in pool.samples])

    def query(self, image: ImageSample, count: int) -> list[ImageSample]:
        qh = color_histogram(image.pixels)
        dists = np.abs(self._hists - qh).sum(axis=1)
        order = sorted(range(len(dists)), key=lambda i: (dists[i], self.pool.samples[i].id))
        return [self.pool.samples[i] for i in order[:count]]


def splice_spam(a: ImageSample, b: ImageSample, swap: bool = False) -> SpliceResult:
    """Combine a's left half with b's right half, resized to fit.

    The output has a's dimensions: columns [0, W_a//2) are copied from a
    untouched, and b's right half (columns [W_b//2, W_b)) is bilinearly
    resized to fill the rest.  ``swap`` exchanges the two roles.
    """
    if swap:
        a, b = b, a
    for parent in (a, b):
        if parent.label != "spam":
            raise ValueError(
                f"splice parents must be spam-labeled (got {parent.label!r} for {parent.id})"
            )
        if parent.pixels.shape[1] < 2:
            raise ValueError(f"splice parent {parent.id} narrower than 2 columns")
    h_a, w_a = a.pixels.shape[:2]
    w_left = w_a // 2
    left = a.pixels[:, :w_left]
    right_src = b.pixels[:, b.pixels.shape[1] // 2:]
    right = resize_uint8(right_src, h_a, w_a - w_left)
    return SpliceResult(
        pixels=np.concatenate([left, right], axis=1),
        parent_left_id=a.id,
        parent_right_id=b.id,
    )


def generate_spam_like(pool: Corpus, config: AugmentConfig) -> Corpus:
    """Create ``target_spam_like`` spliced spam samples from a pool.

    Parent pairs are drawn uniformly without self-pairing; the draw sequence
    is fixed by the seed, so repeat runs produce byte-identical corpora.
    """
    spams = pool.with_label("spam")
    if len(spams) < 2:
        raise ValueError(f"need at least 2 spam samples to splice, have {len(spams)}")
    rng = np.random.default_rng(config.seed)
    n = len(spams)
    out: list[ImageSample] = []
    for k in range(config.target_spam_like):
        i = int(rng.integers(n))
        j = (i + int(rng.integers(1, n))) % n
        spliced = splice_spam(spams[i], spams[j])
        out.append(
            make_sample(
                spliced.pixels,
                label="spam",
                corpus_tag="augmented",
                sample_id=f"aug-spam-{k:05d}",
                parent_ids=(spliced.parent_left_id, spliced.parent_right_id),
            )
        )
    return Corpus(samples=out)


def generate_ham_like(
    seeds: Corpus,
    provider: SimilarImageProvider,
    config: AugmentConfig,
) -> Corpus:
    """Accumulate ham-like samples by querying the provider with ham seeds.

    Each round picks a random ham seed and requests up to
    ``n_similar_per_query`` images.  Results byte-identical to any seed
    sample or to an already-accepted result are dropped.  Generation stops at
    the target, or with a shortfall warning after 5 consecutive queries that
    contribute nothing new.
    """
    hams = seeds.with_label("ham")
    if not hams:
        raise ValueError("need at least 1 ham seed for ham-like augmentation")
    rng = np.random.default_rng(config.seed)
    known = {s.byte_digest for s in seeds.samples}
    out: list[ImageSample] = []
    stalled = 0
    while len(out) < config.target_ham_like and stalled < 5:
        seed_img = hams[int(rng.integers(len(hams)))]
        added = 0
        for result in provider.query(seed_img, config.n_similar_per_query):
            if len(out) >= config.target_ham_like:
                break
            if result.byte_digest in known:
                continue
            known.add(result.byte_digest)
            out.append(
                ImageSample(
                    id=f"aug-ham-{len(out):05d}",
                    pixels=result.pixels,
                    label="ham",
                    corpus_tag="augmented",
                    source_path=result.source_path,
                    byte_digest=result.byte_digest,
                    phash=result.phash,
                    parent_ids=(seed_img.id,),
                )
            )
            added += 1
        stalled = 0 if added else stalled + 1
    if len(out) < config.target_ham_like:
        warnings.warn(
            f"ham-like generation fell short: {len(out)}/{config.target_ham_like} "
            "(provider exhausted)",
            AugmentationShortfall,
            stacklevel=2,
        )
    return Corpus(samples=out)

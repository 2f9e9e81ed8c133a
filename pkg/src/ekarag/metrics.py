"""Answer metrics (EM, F1), retrieval similarity and tag-region token entropy."""

from __future__ import annotations

import math
import unicodedata
import zlib
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .protocol import Tag


def _strip_punctuation(text: str) -> str:
    return "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))


def normalize(text: str) -> list[str]:
    """Lowercase, drop Unicode punctuation, split on whitespace.

    Articles are kept.
    """
    return _strip_punctuation(text.lower()).split()


def exact_match(pred: str, golds: Sequence[str]) -> int:
    p = normalize(pred)
    return int(any(p == normalize(g) for g in golds))


def _f1_tokens(pred: list[str], gold: list[str]) -> float:
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


def f1(pred: str, golds: Sequence[str]) -> float:
    """Token-multiset F1, maximised over the gold answers."""
    p = normalize(pred)
    return max((_f1_tokens(p, normalize(g)) for g in golds), default=0.0)


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    a, b = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


Embedder = Callable[[Sequence[str]], Sequence[Sequence[float]]]


def retrieval_similarity(retrieved: str, gold_context: str, embedder: Embedder) -> float:
    if retrieved == gold_context:
        return 1.0
    u, v = embedder([retrieved, gold_context])
    return cosine(u, v)


class HashingEmbedder:
    """Offline bag-of-words embedder using hashed, lowercased word counts.

    Deterministic and dependency-free; a stand-in for a semantic encoder when
    no embedding endpoint is configured.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim

    def __call__(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            vec = [0.0] * self.dim
            for tok in normalize(text):
                vec[zlib.crc32(tok.encode()) % self.dim] += 1.0
            out.append(vec)
        return out


def token_entropy(alternatives: Sequence[tuple[str, float]]) -> float:
    """Entropy in nats of the renormalised top-n alternative distribution."""
    if not alternatives:
        return 0.0
    lps = np.array([lp for _, lp in alternatives], dtype=float)
    m = lps.max()
    w = np.exp(lps - m)
    p = w / w.sum()
    nz = p[p > 0]
    return float(max(-(nz * np.log(nz)).sum(), 0.0))


@dataclass
class RegionEntropy:
    region: Tag
    mean_entropy: float | None
    token_count: int
    top_n: int
    approximation_note: str

    def to_dict(self) -> dict:
        return {"region": self.region.value, "mean_entropy": self.mean_entropy,
                "token_count": self.token_count, "top_n": self.top_n,
                "approximation_note": self.approximation_note}


def region_token_entropies(trajectory, region: Tag) -> list[float]:
    """Per-token entropies for content tokens of every segment of ``region``."""
    if region is Tag.KNOWLEDGE:
        return []
    vals = []
    for seg in trajectory.segments:
        if seg.kind is not region or seg.token_span is None:
            continue
        for tok in trajectory.tokens[seg.token_span[0]:seg.token_span[1]]:
            vals.append(token_entropy(tok.top))
    return vals


def region_entropy(trajectory, region: Tag) -> RegionEntropy:
    """Mean renormalised top-n entropy over content tokens of one tag region.

    Knowledge is environment text with no policy tokens and always comes back
    empty. A region without tokens reports ``mean_entropy=None``.
    """
    vals = region_token_entropies(trajectory, region)
    top_n = max((len(t.top) for t in trajectory.tokens), default=0)
    note = f"top-{top_n} renormalized" if top_n else "no alternatives recorded"
    mean = math.fsum(vals) / len(vals) if vals else None
    return RegionEntropy(region, mean, len(vals), top_n, note)

"""Embedding-based quality gates for generated backgrounds and foregrounds."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from synthcomp.config import prune_count


@dataclass(frozen=True)
class FilterDecision:
    index: int
    caption_similarity: float | None
    max_class_similarity: float
    kept: bool
    rank: int | None = None
    rejected: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip((a * b).sum(), -1.0, 1.0))


def _similarities(candidates: np.ndarray, query: np.ndarray) -> np.ndarray:
    if candidates.shape[1:] != query.shape[-1:]:
        raise ValueError(f"dimension mismatch: {candidates.shape[1:]} vs {query.shape[-1:]}")
    return np.clip((candidates * query).sum(axis=-1), -1.0, 1.0)


def max_class_similarity(candidates, class_embs) -> np.ndarray:
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    class_embs = np.asarray(class_embs, dtype=float).reshape(-1, candidates.shape[1])
    if len(class_embs) == 0:
        return np.full(len(candidates), -1.0)
    return np.max(np.stack([_similarities(candidates, c) for c in class_embs]), axis=0)


def _ranked(order_keys: np.ndarray, eligible: np.ndarray) -> list[int]:
    """Indices of eligible items sorted by key descending, ties by lower index."""
    idx = np.flatnonzero(eligible)
    # lexsort: last key is primary
    return [int(i) for i in idx[np.lexsort((idx, -order_keys[idx]))]]


def filter_backgrounds(
    candidates,
    caption_emb,
    class_embs,
    keep: int,
    reject_threshold: float = 0.26,
    mode: str = "reject_then_rank",
    class_weight: float = 1.0,
) -> list[FilterDecision]:
    """Two-rule background filter; returns one decision per candidate, in input order.

    ``reject_then_rank`` drops every candidate whose best class similarity
    exceeds ``reject_threshold``, then keeps the ``keep`` survivors closest to
    the caption. ``weighted`` ranks everything by
    ``caption_similarity - class_weight * max_class_similarity`` instead.

    ``caption_emb`` is either one vector or one row per candidate (when the
    candidates came from different prompts).
    """
    if keep < 1:
        raise ValueError("keep must be >= 1")
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.size == 0:
        return []
    caption_sim = _similarities(candidates, np.asarray(caption_emb, dtype=float))
    class_sim = max_class_similarity(candidates, class_embs)
    if mode == "reject_then_rank":
        rejected = class_sim > reject_threshold
        order = _ranked(caption_sim, ~rejected)
    elif mode == "weighted":
        rejected = np.zeros(len(candidates), dtype=bool)
        order = _ranked(caption_sim - class_weight * class_sim, ~rejected)
    else:
        raise ValueError(f"unknown filter mode {mode!r}")
    ranks = {i: r for r, i in enumerate(order[:keep], start=1)}
    return [
        FilterDecision(
            index=i,
            caption_similarity=float(caption_sim[i]),
            max_class_similarity=float(class_sim[i]),
            kept=i in ranks,
            rank=ranks.get(i),
            rejected=bool(rejected[i]),
        )
        for i in range(len(candidates))
    ]


def select_top_foregrounds(candidates, class_label_emb, keep: int) -> list[FilterDecision]:
    if keep < 1:
        raise ValueError("keep must be >= 1")
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.size == 0:
        return []
    sim = _similarities(candidates, np.asarray(class_label_emb, dtype=float))
    order = _ranked(sim, np.ones(len(candidates), dtype=bool))
    ranks = {i: r for r, i in enumerate(order[:keep], start=1)}
    return [
        FilterDecision(i, float(sim[i]), float(sim[i]), i in ranks, ranks.get(i))
        for i in range(len(candidates))
    ]


def prune_decisions(candidates, class_embs, fraction: float) -> list[FilterDecision]:
    """Drop the ceil(fraction * n) candidates most similar to any class."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    n = len(candidates) if candidates.size else 0
    if n == 0:
        return []
    class_sim = max_class_similarity(candidates, class_embs)
    dropped = set(_ranked(class_sim, np.ones(n, dtype=bool))[: prune_count(n, fraction)])
    decisions, rank = [], 0
    for i in range(n):
        kept = i not in dropped
        rank += kept
        decisions.append(
            FilterDecision(i, None, float(class_sim[i]), kept, rank if kept else None, rejected=not kept)
        )
    return decisions


def prune_fraction(candidates, class_embs, fraction: float) -> list[int]:
    """Indices surviving :func:`prune_decisions`, in original order."""
    return [d.index for d in prune_decisions(candidates, class_embs, fraction) if d.kept]


def kept_indices(decisions: list[FilterDecision]) -> list[int]:
    """Kept candidate indices ordered by rank."""
    return [d.index for d in sorted((d for d in decisions if d.kept), key=lambda d: d.rank)]


def write_filter_log(fh, stage: str, decisions: list[FilterDecision], **context) -> None:
    """Append one JSON line per decision to an open text file."""
    for d in decisions:
        row = {"stage": stage, **context, **d.to_dict()}
        for key in ("caption_similarity", "max_class_similarity"):
            value = row[key]
            row[key] = None if value is None or math.isnan(value) else round(value, 6)
        fh.write(json.dumps(row, sort_keys=True) + "\n")

"""Retrieval evaluation: per-query average precision, mAP and the CMC curve."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InputError
from .losses import pairwise_euclidean


@dataclass
class RetrievalReport:
    dist: Optional[np.ndarray]   # (Q, G); None for split-averaged reports
    per_query_ap: np.ndarray     # (Q,)
    map: float
    cmc: np.ndarray              # cmc[k-1] = Rank-k hit rate

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self, max_rank: Optional[int] = None):
        cmc = self.cmc if max_rank is None else self.cmc[:max_rank]
        return {"map": float(self.map),
                "cmc": [float(v) for v in cmc],
                "per_query_ap": [float(v) for v in self.per_query_ap]}

    def to_json(self, path=None, max_rank: Optional[int] = None) -> str:
        text = json.dumps(self.to_dict(max_rank), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path=None, max_rank: Optional[int] = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "cmc"])
        cmc = self.cmc if max_rank is None else self.cmc[:max_rank]
        for k, v in enumerate(cmc, start=1):
            writer.writerow([k, repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def average_precision(relevant_sorted: np.ndarray) -> float:
    """AP of one ranked list given its boolean relevance vector."""
    positions = np.flatnonzero(relevant_sorted) + 1
    if positions.size == 0:
        return 0.0
    precisions = [float(i) / float(r) for i, r in enumerate(positions, start=1)]
    return math.fsum(precisions) / len(precisions)


def retrieval_eval(query, query_ids, gallery, gallery_ids) -> RetrievalReport:
    """Rank the gallery for every query by Euclidean distance (ties by gallery index)."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qids = np.asarray(query_ids)
    gids = np.asarray(gallery_ids)
    present = set(gids.tolist())
    for qid in qids.tolist():
        if qid not in present:
            raise InputError(f"query identity {qid} has no match in the gallery")
    dist = pairwise_euclidean(q, g)
    order = np.argsort(dist, axis=1, kind="stable")
    relevant = gids[order] == qids[:, None]
    ap = np.array([average_precision(row) for row in relevant])
    first_hit = relevant.argmax(axis=1)
    n_gallery = g.shape[0]
    cmc = np.array([np.mean(first_hit < k) for k in range(1, n_gallery + 1)])
    return RetrievalReport(dist, ap, float(np.mean(ap)), cmc)


def average_reports(reports: Sequence[RetrievalReport]) -> RetrievalReport:
    """Pool repeated splits: APs are concatenated, CMC curves averaged."""
    if not reports:
        raise InputError("no reports to average")
    width = min(len(r.cmc) for r in reports)
    ap = np.concatenate([r.per_query_ap for r in reports])
    cmc = np.mean([r.cmc[:width] for r in reports], axis=0)
    return RetrievalReport(None, ap, float(np.mean(ap)), cmc)


def random_ranking_map(n_gallery: int, n_relevant: int) -> float:
    """Expected AP of a uniformly random ranking with ``n_relevant`` matches among ``n_gallery``."""
    G, R = n_gallery, n_relevant
    harmonic = sum(1.0 / k for k in range(1, G + 1))
    if G == 1:
        return 1.0
    return (harmonic + (R - 1) / (G - 1) * (G - harmonic)) / G

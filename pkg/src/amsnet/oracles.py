"""Slow reference implementations used to cross-check the vectorised code.

Everything here is written with plain loops and scalar arithmetic so that it
shares no code path with the operators it verifies.
"""

from __future__ import annotations

import math

import numpy as np


def instance_norm_loop(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    out = np.empty_like(x)
    for b in range(B):
        for c in range(C):
            vals = [float(v) for v in x[b, c].ravel()]
            mu = math.fsum(vals) / len(vals)
            sd = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / len(vals))
            out[b, c] = gamma[c] * (x[b, c] - mu) / (sd + eps) + beta[c]
    return out


def inverse_sqrt_eigh(s):
    """``S^{-1/2}`` by symmetric eigendecomposition."""
    w, v = np.linalg.eigh(np.asarray(s, dtype=np.float64))
    return (v / np.sqrt(w)) @ v.T


def group_whiten_loop(x, g, eps_w=1e-3):
    x = np.asarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    out = np.empty_like(x)
    for b in range(B):
        rows = x[b].reshape(g, -1)
        m = rows.shape[1]
        centered = rows - rows.mean(axis=1, keepdims=True)
        cov = np.zeros((g, g))
        for i in range(g):
            for j in range(g):
                cov[i, j] = math.fsum(centered[i] * centered[j]) / m
        cov += eps_w * np.eye(g)
        out[b] = (inverse_sqrt_eigh(cov) @ centered).reshape(C, H, W)
    return out


def cross_entropy_loop(logits, labels):
    total = []
    for row, y in zip(np.asarray(logits, dtype=np.float64), labels):
        top = max(row)
        lse = top + math.log(math.fsum(math.exp(v - top) for v in row))
        total.append(lse - row[int(y)])
    return math.fsum(total) / len(total)


def batch_hard_triplet_scan(features, ids, margin=0.3):
    """Exhaustive pairwise scan; returns the summed hinge over anchors."""
    f = np.asarray(features, dtype=np.float64)
    n = len(f)
    terms = []
    for a in range(n):
        hardest_pos, hardest_neg = -math.inf, math.inf
        for j in range(n):
            d = math.sqrt(math.fsum((f[a] - f[j]) ** 2))
            if j != a and ids[j] == ids[a]:
                hardest_pos = max(hardest_pos, d)
            elif ids[j] != ids[a]:
                hardest_neg = min(hardest_neg, d)
        terms.append(max(0.0, hardest_pos - hardest_neg + margin))
    return math.fsum(terms)


def retrieval_enumerate(query, query_ids, gallery, gallery_ids):
    """Per-query AP and the CMC curve by sorting (distance, index) tuples."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    G = len(g)
    aps, first_hits = [], []
    for qi in range(len(q)):
        dists = [(math.sqrt(math.fsum((q[qi] - g[j]) ** 2)), j) for j in range(G)]
        ranked = [j for _, j in sorted(dists)]
        hits, precisions, first = 0, [], None
        for pos, j in enumerate(ranked, start=1):
            if gallery_ids[j] == query_ids[qi]:
                hits += 1
                precisions.append(hits / pos)
                if first is None:
                    first = pos
        aps.append(math.fsum(precisions) / len(precisions))
        first_hits.append(first)
    cmc = [sum(1 for h in first_hits if h <= k) / len(first_hits) for k in range(1, G + 1)]
    return aps, cmc

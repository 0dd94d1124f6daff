"""Slow, literal float64 transcriptions used as independent references."""

import math

import numpy as np


def lse(values):
    top = max(values)
    return top + math.log(math.fsum(math.exp(v - top) for v in values))


def tal_reference(S, image_ids, text_ids, margin=0.1, tau=0.015):
    S = np.asarray(S, dtype=np.float64)
    K = S.shape[0]
    total = []
    for i in range(K):
        pos = [j for j in range(K) if image_ids[i] == text_ids[j]]
        logits = [S[i, j] / tau for j in pos]
        z = lse(logits)
        s_plus = math.fsum(math.exp(S[i, j] / tau - z) * S[i, j] for j in pos)
        total.append(max(0.0, margin - s_plus + tau * lse([S[i, j] / tau for j in range(K)])))
    for j in range(K):
        pos = [i for i in range(K) if image_ids[i] == text_ids[j]]
        z = lse([S[i, j] / tau for i in pos])
        s_plus = math.fsum(math.exp(S[i, j] / tau - z) * S[i, j] for i in pos)
        total.append(max(0.0, margin - s_plus + tau * lse([S[i, j] / tau for i in range(K)])))
    return math.fsum(total) / K


def cross_attention_reference(q, k, v, wq, wk, wv, wo, heads):
    """Row-by-row multi-head attention with explicit loops over heads and keys."""
    d = q.shape[1]
    dh = d // heads
    Q, Kx, V = q @ wq.T, k @ wk.T, v @ wv.T
    out = np.zeros((q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for r in range(q.shape[0]):
            logits = [float(Q[r, sl] @ Kx[c, sl]) / math.sqrt(dh) for c in range(k.shape[0])]
            z = lse(logits)
            w = [math.exp(x - z) for x in logits]
            out[r, sl] = sum(w[c] * V[c, sl] for c in range(k.shape[0]))
    return out @ wo.T


def rank_k_reference(scores, relevance, k):
    hits = 0
    for row, rel in zip(scores, relevance):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += any(rel[j] for j in order[:k])
    return 100.0 * hits / len(scores)


def ap_reference(row, rel):
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    found, precisions = 0, []
    for pos, j in enumerate(order, start=1):
        if rel[j]:
            found += 1
            precisions.append(found / pos)
    return sum(precisions) / found


def block_ids(K, groups):
    return np.arange(K) % groups

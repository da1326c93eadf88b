"""Retrieval evaluation: Rank-k, mAP, and mINP.

Queries are texts, galleries are images. Scores are sorted descending with
ties broken by ascending gallery index, so reports are deterministic
across runs and platforms.

``evaluate`` is the production path (argsort-based); ``evaluate_bruteforce``
recomputes every metric straight from the definitions in O(Q*G^2) exact
arithmetic and exists purely to cross-check it.
"""

from __future__ import annotations

import dataclasses
import json
from fractions import Fraction

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_KS = (1, 5, 10)


@dataclasses.dataclass
class PerQuery:
    query_index: int
    ranked_gallery: list[int]   # gallery indices, best match first
    relevance: list[bool]       # relevance flag per ranked position


@dataclasses.dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    mINP: float
    rank_k: dict[int, float]
    per_query: list[PerQuery]

    def to_dict(self, include_per_query: bool = True) -> dict:
        out = {
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "mAP": self.mAP,
            "mINP": self.mINP,
            "rank_k": {str(k): v for k, v in self.rank_k.items()},
        }
        if include_per_query:
            out["per_query"] = [
                {
                    "query_index": pq.query_index,
                    "ranked_gallery": pq.ranked_gallery,
                    "relevance": [bool(r) for r in pq.relevance],
                }
                for pq in self.per_query
            ]
        return out

    def to_json(self, include_per_query: bool = True) -> str:
        return json.dumps(self.to_dict(include_per_query), indent=2)


# JSON schema for emitted reports (README documents it; tests validate).
REPORT_SCHEMA = {
    "type": "object",
    "required": ["rank1", "rank5", "rank10", "mAP", "mINP", "rank_k"],
    "properties": {
        "rank1": {"type": "number", "minimum": 0, "maximum": 1},
        "rank5": {"type": "number", "minimum": 0, "maximum": 1},
        "rank10": {"type": "number", "minimum": 0, "maximum": 1},
        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
        "mINP": {"type": "number", "minimum": 0, "maximum": 1},
        "rank_k": {"type": "object", "additionalProperties": {"type": "number"}},
        "per_query": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["query_index", "ranked_gallery", "relevance"],
                "properties": {
                    "query_index": {"type": "integer"},
                    "ranked_gallery": {"type": "array", "items": {"type": "integer"}},
                    "relevance": {"type": "array", "items": {"type": "boolean"}},
                },
            },
        },
    },
}


def rank_gallery(sim_row: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by descending score, ties by ascending index."""
    row = np.asarray(sim_row, dtype=np.float64)
    if row.ndim != 1:
        raise ShapeError(f"rank_gallery wants a 1-d score row, got shape {row.shape}")
    if not np.isfinite(row).all():
        raise ContractError("scores must be finite")
    return np.argsort(-row, kind="stable")


def evaluate(sim: np.ndarray, query_ids: np.ndarray, gallery_ids: np.ndarray,
             ks=DEFAULT_KS) -> RetrievalReport:
    """Full retrieval report for a (Q, G) similarity matrix.

    Rank-k counts queries whose top-k contains a relevant item. AP averages
    precision at each relevant rank; INP divides a query's relevant count
    by the rank of its hardest (last-ranked) relevant item.
    """
    sim = np.asarray(sim, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if sim.ndim != 2:
        raise ShapeError(f"similarity matrix must be 2-d, got shape {sim.shape}")
    q, g = sim.shape
    if query_ids.shape != (q,) or gallery_ids.shape != (g,):
        raise ShapeError(
            f"id shapes {query_ids.shape}/{gallery_ids.shape} do not match sim {sim.shape}")

    hits = {k: 0 for k in ks}
    ap_sum = 0.0
    inp_sum = 0.0
    per_query: list[PerQuery] = []
    for qi in range(q):
        order = rank_gallery(sim[qi])
        flags = gallery_ids[order] == query_ids[qi]
        if not flags.any():
            raise ContractError(f"query {qi} has no relevant gallery item")
        cum = np.cumsum(flags)
        rel_positions = np.flatnonzero(flags)  # 0-based ranks of relevant items
        num_rel = int(cum[-1])
        ap_sum += float(np.mean(cum[rel_positions] / (rel_positions + 1.0)))
        inp_sum += num_rel / float(rel_positions[-1] + 1)
        for k in ks:
            if flags[:k].any():
                hits[k] += 1
        per_query.append(PerQuery(qi, order.tolist(), flags.tolist()))

    rank_k = {k: hits[k] / q for k in ks}
    return RetrievalReport(
        rank1=rank_k.get(1, float("nan")),
        rank5=rank_k.get(5, float("nan")),
        rank10=rank_k.get(10, float("nan")),
        mAP=ap_sum / q,
        mINP=inp_sum / q,
        rank_k=rank_k,
        per_query=per_query,
    )


def evaluate_bruteforce(sim: np.ndarray, query_ids: np.ndarray, gallery_ids: np.ndarray,
                        ks=DEFAULT_KS) -> RetrievalReport:
    """Literal-definition oracle: no sorting, exact Fraction arithmetic.

    An item's rank is one plus the number of competitors strictly ahead of
    it (higher score, or equal score with a lower index).
    """
    sim = np.asarray(sim, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    q, g = sim.shape

    hits = {k: 0 for k in ks}
    ap_total = Fraction(0)
    inp_total = Fraction(0)
    per_query: list[PerQuery] = []
    for qi in range(q):
        row = sim[qi]

        def rank_of(j: int) -> int:
            ahead = 0
            for m in range(g):
                if m == j:
                    continue
                if row[m] > row[j] or (row[m] == row[j] and m < j):
                    ahead += 1
            return ahead + 1

        ranks = [rank_of(j) for j in range(g)]
        relevant = [j for j in range(g) if gallery_ids[j] == query_ids[qi]]
        if not relevant:
            raise ContractError(f"query {qi} has no relevant gallery item")

        ap = Fraction(0)
        hardest = 0
        for j in relevant:
            r = ranks[j]
            hardest = max(hardest, r)
            rel_at_or_before = sum(1 for m in relevant if ranks[m] <= r)
            ap += Fraction(rel_at_or_before, r)
        ap_total += ap / len(relevant)
        inp_total += Fraction(len(relevant), hardest)
        for k in ks:
            if any(ranks[j] <= k for j in relevant):
                hits[k] += 1

        by_rank = sorted(range(g), key=lambda j: ranks[j])
        per_query.append(PerQuery(qi, by_rank, [j in relevant for j in by_rank]))

    rank_k = {k: hits[k] / q for k in ks}
    return RetrievalReport(
        rank1=rank_k.get(1, float("nan")),
        rank5=rank_k.get(5, float("nan")),
        rank10=rank_k.get(10, float("nan")),
        mAP=float(ap_total / q),
        mINP=float(inp_total / q),
        rank_k=rank_k,
        per_query=per_query,
    )


def reports_agree(a: RetrievalReport, b: RetrievalReport, tol: float = 1e-12) -> bool:
    """Rank-k must match exactly; mAP/mINP within float64 roundoff."""
    if set(a.rank_k) != set(b.rank_k):
        return False
    if any(a.rank_k[k] != b.rank_k[k] for k in a.rank_k):
        return False
    return abs(a.mAP - b.mAP) <= tol and abs(a.mINP - b.mINP) <= tol


# -- file interfaces ---------------------------------------------------------------


def write_similarity_csv(path, sim: np.ndarray) -> None:
    """One row of comma-separated scores per query."""
    sim = np.asarray(sim, dtype=np.float64)
    np.savetxt(path, sim, delimiter=",", fmt="%.17g")


def read_similarity_csv(path) -> np.ndarray:
    sim = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return sim


def similarity_from_embedding_files(query_path, gallery_path):
    """Cosine similarity from two checkpoint-container embedding files.

    Each file holds arrays ``embeds`` (n, d) and ``ids`` (n,). Returns
    (sim, query_ids, gallery_ids).
    """
    from .checkpoint import load_arrays

    def load(path):
        arrays = load_arrays(path)
        if "embeds" not in arrays or "ids" not in arrays:
            raise ContractError(f"{path} must contain 'embeds' and 'ids' arrays")
        return arrays["embeds"], arrays["ids"].astype(np.int64)

    q_emb, q_ids = load(query_path)
    g_emb, g_ids = load(gallery_path)
    qn = q_emb / np.linalg.norm(q_emb, axis=1, keepdims=True)
    gn = g_emb / np.linalg.norm(g_emb, axis=1, keepdims=True)
    return qn @ gn.T, q_ids, g_ids

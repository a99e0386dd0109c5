"""First-stage lexical retrieval: inverted index with Okapi BM25 scoring.

IDF uses the ln(1 + (N - df + 0.5)/(df + 0.5)) form, which keeps every
score non-negative. Candidate pools are per-domain partitions of one index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import container
from .corpus import Document, Qrels, Query, tokenize
from .errors import ContractError, InputError, ValidationError

BM25_K1_GRID = (0.6, 0.9, 1.2, 1.5, 2.0)
BM25_B_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise ValidationError("k1 must be positive")
        if not 0.0 <= self.b <= 1.0:
            raise ValidationError("b must lie in [0, 1]")


class InvertedIndex:
    """Term -> (doc, tf) postings with per-domain partitions."""

    def __init__(self) -> None:
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_lengths: dict[str, int] = {}
        self.doc_domain: dict[str, str] = {}
        self.domains: dict[str, list[str]] = {}

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def doc_ids(self, domain: str | None = None) -> list[str]:
        if domain is None:
            return sorted(self.doc_lengths)
        return self.domains.get(domain, [])


def build_index(documents: list[Document]) -> InvertedIndex:
    """Index a corpus; document ids must be unique."""
    index = InvertedIndex()
    for doc in documents:
        if doc.id in index.doc_lengths:
            raise InputError(f"duplicate document id {doc.id!r}")
        terms = tokenize(doc.text)
        index.doc_lengths[doc.id] = len(terms)
        index.doc_domain[doc.id] = doc.domain
        index.domains.setdefault(doc.domain, []).append(doc.id)
        counts: dict[str, int] = {}
        for t in terms:
            counts[t] = counts.get(t, 0) + 1
        for term, tf in counts.items():
            index.postings.setdefault(term, []).append((doc.id, tf))
    for term in index.postings:
        index.postings[term].sort(key=lambda p: p[0])
    for domain in index.domains:
        index.domains[domain].sort()
    return index


def _idf(index: InvertedIndex, term: str) -> float:
    df = len(index.postings.get(term, ()))
    return math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))


def bm25_score(index: InvertedIndex, params: Bm25Params, query_terms: list[str],
               doc_id: str) -> float:
    """Okapi BM25 of one document against a tokenized query."""
    if doc_id not in index.doc_lengths:
        raise ContractError(f"unknown document id {doc_id!r}")
    length = index.doc_lengths[doc_id]
    avg = index.avg_doc_length
    score = 0.0
    for term in query_terms:
        tf = 0
        for did, f in index.postings.get(term, ()):
            if did == doc_id:
                tf = f
                break
        if tf == 0:
            continue
        norm = tf + params.k1 * (1.0 - params.b + params.b * length / avg)
        score += _idf(index, term) * tf * (params.k1 + 1.0) / norm
    return score


def search(index: InvertedIndex, params: Bm25Params, query: str, k: int,
           domain: str | None = None) -> list[tuple[str, float]]:
    """Top-k documents by BM25, ties broken by ascending doc id.

    Documents matching no query term score 0 and still participate, so a
    k larger than the corpus returns every document, ranked.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    pool = index.doc_ids(domain)
    if not pool:
        return []
    avg = index.avg_doc_length
    scores = {did: 0.0 for did in pool}
    allowed = None if domain is None else set(pool)
    for term in set(tokenize(query)):
        postings = index.postings.get(term)
        if not postings:
            continue
        idf = _idf(index, term)
        for did, tf in postings:
            if allowed is not None and did not in allowed:
                continue
            length = index.doc_lengths[did]
            norm = tf + params.k1 * (1.0 - params.b + params.b * length / avg)
            scores[did] += idf * tf * (params.k1 + 1.0) / norm
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def tune_bm25(index: InvertedIndex, queries: list[Query], qrels: Qrels,
              k1_grid: tuple[float, ...] = BM25_K1_GRID,
              b_grid: tuple[float, ...] = BM25_B_GRID,
              depth: int = 100) -> Bm25Params:
    """Grid-search (k1, b) maximizing mean NDCG@10 on a validation set.

    Ties resolve to the smaller k1, then the smaller b.
    """
    from .evaluation import ndcg_at

    if not queries:
        raise ContractError("tune_bm25 needs a non-empty validation set")
    best: tuple[float, float, float] | None = None
    for k1 in sorted(k1_grid):
        for b in sorted(b_grid):
            params = Bm25Params(k1, b)
            total = 0.0
            for q in queries:
                ranked = [did for did, _ in search(index, params, q.text, depth, domain=q.domain)]
                total += ndcg_at(ranked, {did: g for (qid, did), g in qrels.items() if qid == q.id}, 10)
            mean = total / len(queries)
            if best is None or mean > best[0]:
                best = (mean, k1, b)
    assert best is not None
    return Bm25Params(best[1], best[2])


# ---------------------------------------------------------------------------
# persistence


def save_index(index: InvertedIndex, path) -> None:
    terms = sorted(index.postings)
    doc_ids = sorted(index.doc_lengths)
    doc_pos = {did: i for i, did in enumerate(doc_ids)}
    post_terms: list[str] = []
    post_offsets = [0]
    flat_docs: list[int] = []
    flat_tfs: list[int] = []
    for term in terms:
        post_terms.append(term)
        for did, tf in index.postings[term]:
            flat_docs.append(doc_pos[did])
            flat_tfs.append(tf)
        post_offsets.append(len(flat_docs))
    records = [
        ("terms", container.str_to_array("\n".join(post_terms))),
        ("offsets", np.asarray(post_offsets, dtype=np.float64)),
        ("posting_docs", np.asarray(flat_docs, dtype=np.float64)),
        ("posting_tfs", np.asarray(flat_tfs, dtype=np.float64)),
        ("doc_ids", container.str_to_array("\n".join(doc_ids))),
        ("doc_lengths", np.asarray([index.doc_lengths[d] for d in doc_ids], dtype=np.float64)),
        ("doc_domains", container.str_to_array("\n".join(index.doc_domain[d] for d in doc_ids))),
    ]
    blob = container.write_container(container.KIND_INDEX, [len(doc_ids), len(terms)], records)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_index(path) -> InvertedIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    _, header, records = container.read_container(blob, expect_kind=container.KIND_INDEX)
    n_docs, n_terms = header
    index = InvertedIndex()
    doc_ids = container.array_to_str(records["doc_ids"]).split("\n") if n_docs else []
    domains = container.array_to_str(records["doc_domains"]).split("\n") if n_docs else []
    lengths = records["doc_lengths"].astype(np.int64)
    for did, domain, length in zip(doc_ids, domains, lengths):
        index.doc_lengths[did] = int(length)
        index.doc_domain[did] = domain
        index.domains.setdefault(domain, []).append(did)
    for domain in index.domains:
        index.domains[domain].sort()
    terms = container.array_to_str(records["terms"]).split("\n") if n_terms else []
    offsets = records["offsets"].astype(np.int64)
    docs = records["posting_docs"].astype(np.int64)
    tfs = records["posting_tfs"].astype(np.int64)
    for i, term in enumerate(terms):
        index.postings[term] = [(doc_ids[docs[j]], int(tfs[j]))
                                for j in range(offsets[i], offsets[i + 1])]
    return index

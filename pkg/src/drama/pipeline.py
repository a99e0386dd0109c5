"""Two-step inference (route, then rerank with one adapter) and the
experiment matrix over the standard system variants.

Variants: BM25 (first stage only), S (per-domain full models), ALL (one
multi-domain model), KD-oracle (gold-domain adapter), DRAMA (gate-routed
adapter), RND (uniformly random adapter).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapters import Adapter, AdapterRegistry
from .corpus import DomainDataset, Query, Vocabulary
from .encoder import EncoderModel, cosine_matrix, encode, encode_batch, score_cross_batch
from .errors import ContractError
from .gating import Gate, random_route, route
from .retrieval import Bm25Params, InvertedIndex, search

STANDARD_VARIANTS = ("BM25", "S", "ALL", "KD-oracle", "DRAMA", "RND")
ROUTING_MODES = ("gate", "oracle", "random", "fixed", "none")


@dataclass
class RerankRequest:
    query_id: str
    tokens: list[int]
    candidates: list[str]
    depth: int
    routing: str = "none"
    gold_domain: int | None = None
    fixed_domain: int | None = None

    def __post_init__(self) -> None:
        if self.routing not in ROUTING_MODES:
            raise ContractError(f"unknown routing mode {self.routing!r}")


@dataclass
class SystemVariant:
    name: str
    routing: str
    description: str = ""


class ActivationCounter:
    """Counts adapter activations per query; proves exactly-one routing."""

    def __init__(self) -> None:
        self.per_query: dict[str, int] = {}

    def bump(self, query_id: str) -> None:
        self.per_query[query_id] = self.per_query.get(query_id, 0) + 1


class EmbeddingStore:
    """Lazily computed document embeddings per (model, adapter, domain).

    Rows are computed once over a domain's full document list in fixed
    chunks, so every variant sharing a (model, adapter) pair sees
    bit-identical vectors.
    """

    def __init__(self, doc_tokens: dict[str, list[int]], domain_docs: dict[int, list[str]]):
        self.doc_tokens = doc_tokens
        self.domain_docs = domain_docs
        self._cache: dict[tuple[str, str, int], tuple[dict[str, int], np.ndarray]] = {}

    def matrix(self, model_key: str, adapter_key: str, domain: int,
               model: EncoderModel, adapter: Adapter | None) -> tuple[dict[str, int], np.ndarray]:
        key = (model_key, adapter_key, domain)
        if key not in self._cache:
            ids = self.domain_docs[domain]
            mat = encode_batch(model, [self.doc_tokens[d] for d in ids], adapter)
            self._cache[key] = ({d: i for i, d in enumerate(ids)}, mat)
        return self._cache[key]


def _resolve_adapter(request: RerankRequest, registry: AdapterRegistry | None,
                     gate: Gate | None, model: EncoderModel,
                     rng: np.random.Generator | None) -> tuple[Adapter | None, int | None]:
    """One routing decision per request; returns (adapter, routed domain)."""
    mode = request.routing
    if mode == "none":
        return None, None
    if registry is None:
        raise ContractError("adapter routing requires a registry")
    if mode == "gate":
        if gate is None:
            raise ContractError("routing mode 'gate' requires a trained gate")
        domain = route(model, gate, request.tokens)
    elif mode == "oracle":
        if request.gold_domain is None:
            raise ContractError("routing mode 'oracle' requires a gold domain")
        domain = request.gold_domain
    elif mode == "random":
        if rng is None:
            raise ContractError("routing mode 'random' requires a seeded generator")
        domain = random_route(rng, registry.num_domains)
    else:  # fixed
        if request.fixed_domain is None:
            raise ContractError("routing mode 'fixed' requires a domain id")
        domain = request.fixed_domain
    if domain not in registry.domain_adapters:
        raise ContractError(f"routed to domain {domain} which has no adapter")
    return registry.get(domain), domain


def rerank(request: RerankRequest, model: EncoderModel,
           registry: AdapterRegistry | None = None, gate: Gate | None = None,
           doc_tokens: dict[str, list[int]] | None = None,
           rng: np.random.Generator | None = None,
           store: EmbeddingStore | None = None,
           store_keys: tuple[str, int] | None = None,
           counter: ActivationCounter | None = None) -> list[tuple[str, float]]:
    """Rescore first-stage candidates with the routed configuration.

    Returns (doc id, score) sorted by descending score, doc id ascending on
    ties, truncated to the request depth.
    """
    adapter, routed = _resolve_adapter(request, registry, gate, model, rng)
    if counter is not None and adapter is not None:
        counter.bump(request.query_id)
    candidates = request.candidates[: request.depth]
    if not candidates:
        return []
    if doc_tokens is None and store is None:
        raise ContractError("rerank needs document tokens or an embedding store")
    if model.config.mode == "bi":
        q_vec = encode(model, request.tokens, adapter).vector
        if store is not None and store_keys is not None:
            model_key, domain = store_keys
            adapter_key = "none" if adapter is None else f"adapter{routed}"
            rows, mat = store.matrix(model_key, adapter_key, domain, model, adapter)
            doc_mat = mat[[rows[d] for d in candidates]]
        else:
            doc_mat = encode_batch(model, [doc_tokens[d] for d in candidates], adapter)
        scores = cosine_matrix(q_vec, doc_mat)
    else:
        toks = doc_tokens if doc_tokens is not None else store.doc_tokens
        scores = score_cross_batch(model, request.tokens, [toks[d] for d in candidates], adapter)
    order = sorted(zip(candidates, scores), key=lambda kv: (-kv[1], kv[0]))
    return [(d, float(s)) for d, s in order]


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass
class Artifacts:
    """Everything a trained system needs at inference time."""

    index: InvertedIndex
    bm25_params: Bm25Params
    all_model: EncoderModel
    s_models: dict[int, EncoderModel] = field(default_factory=dict)
    registry: AdapterRegistry | None = None
    gate: Gate | None = None


def first_stage(artifacts: Artifacts, queries: list[Query], dataset: DomainDataset,
                depth: int) -> dict[str, list[tuple[str, float]]]:
    """BM25 candidates per query, restricted to the query's domain pool."""
    out: dict[str, list[tuple[str, float]]] = {}
    for q in queries:
        out[q.id] = search(artifacts.index, artifacts.bm25_params, q.text, depth, domain=q.domain)
    return out


def run_variant(variant: str, artifacts: Artifacts, dataset: DomainDataset, vocab: Vocabulary,
                candidates: dict[str, list[tuple[str, float]]], depth: int,
                store: EmbeddingStore, split: str = "test", rnd_seed: int = 0,
                jobs: int = 1, counter: ActivationCounter | None = None,
                ) -> dict[str, list[tuple[str, float]]]:
    """Ranked lists per query id for one system variant."""
    queries = dataset.queries[split]
    if variant == "BM25":
        return {q.id: candidates[q.id][:depth] for q in queries}

    doc_tokens = store.doc_tokens
    rnd_rngs = {q.id: np.random.default_rng((rnd_seed, i)) for i, q in enumerate(queries)}

    def handle(q: Query) -> tuple[str, list[tuple[str, float]]]:
        domain = dataset.domain_id(q.domain)
        cand_ids = [d for d, _ in candidates[q.id]]
        if variant == "S":
            model = artifacts.s_models[domain]
            request = RerankRequest(q.id, vocab.encode(q.text), cand_ids, depth, "none")
            ranked = rerank(request, model, store=store, store_keys=(f"S{domain}", domain),
                            doc_tokens=doc_tokens, counter=counter)
        elif variant == "ALL":
            request = RerankRequest(q.id, vocab.encode(q.text), cand_ids, depth, "none")
            ranked = rerank(request, artifacts.all_model, store=store, store_keys=("ALL", domain),
                            doc_tokens=doc_tokens, counter=counter)
        elif variant == "KD-oracle":
            request = RerankRequest(q.id, vocab.encode(q.text), cand_ids, depth, "oracle",
                                    gold_domain=domain)
            ranked = rerank(request, artifacts.all_model, artifacts.registry, store=store,
                            store_keys=("ALL", domain), doc_tokens=doc_tokens, counter=counter)
        elif variant == "DRAMA":
            request = RerankRequest(q.id, vocab.encode(q.text), cand_ids, depth, "gate")
            ranked = rerank(request, artifacts.all_model, artifacts.registry, artifacts.gate,
                            store=store, store_keys=("ALL", domain), doc_tokens=doc_tokens,
                            counter=counter)
        elif variant == "RND":
            request = RerankRequest(q.id, vocab.encode(q.text), cand_ids, depth, "random")
            ranked = rerank(request, artifacts.all_model, artifacts.registry, store=store,
                            store_keys=("ALL", domain), doc_tokens=doc_tokens,
                            rng=rnd_rngs[q.id], counter=counter)
        else:
            raise ContractError(f"unknown variant {variant!r}")
        return q.id, ranked

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(handle, queries))
    else:
        results = [handle(q) for q in queries]
    return dict(results)


def run_experiment(artifacts: Artifacts, dataset: DomainDataset, vocab: Vocabulary,
                   variants: tuple[str, ...] = STANDARD_VARIANTS, depth: int = 100,
                   split: str = "test", rnd_seed: int = 0, jobs: int = 1,
                   ) -> dict[str, dict[str, list[tuple[str, float]]]]:
    """Ranked lists for every requested variant over one dataset split."""
    missing = [v for v in variants if v not in STANDARD_VARIANTS]
    if missing:
        raise ContractError(f"unknown variants: {missing}")
    for v in variants:
        if v == "S" and not artifacts.s_models:
            raise ContractError("variant S requires per-domain specialized models")
        if v in ("KD-oracle", "DRAMA", "RND") and artifacts.registry is None:
            raise ContractError(f"variant {v} requires a trained adapter registry")
        if v == "DRAMA" and artifacts.gate is None:
            raise ContractError("variant DRAMA requires a trained gate")

    queries = dataset.queries[split]
    candidates = first_stage(artifacts, queries, dataset, depth)
    doc_tokens = {d.id: vocab.encode(d.text) for d in dataset.documents}
    domain_docs = {n: sorted(d.id for d in dataset.documents if d.domain == name)
                   for n, name in enumerate(dataset.domain_names)}
    store = EmbeddingStore(doc_tokens, domain_docs)
    runs: dict[str, dict[str, list[tuple[str, float]]]] = {}
    for variant in variants:
        runs[variant] = run_variant(variant, artifacts, dataset, vocab, candidates, depth,
                                    store, split=split, rnd_seed=rnd_seed, jobs=jobs)
    return runs


def split_run_by_domain(run: dict[str, list[tuple[str, float]]], dataset: DomainDataset,
                        split: str = "test") -> dict[str, dict[str, list[tuple[str, float]]]]:
    by_domain: dict[str, dict[str, list[tuple[str, float]]]] = {n: {} for n in dataset.domain_names}
    for q in dataset.queries[split]:
        if q.id in run:
            by_domain[q.domain][q.id] = run[q.id]
    return by_domain

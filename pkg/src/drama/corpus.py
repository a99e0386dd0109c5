"""Tokenization, dataset I/O, and the synthetic multi-domain generator.

The generator builds per-domain corpora from topic-structured vocabularies.
A shared-vocabulary fraction rho controls how separable the domains are:
at rho=0 every domain uses disjoint terms, at rho=1 all domains draw from
one common pool and the domain label carries no lexical signal.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

PAD_ID = 0
UNK_ID = 1
SEP_ID = 2
RESERVED = {"<pad>": PAD_ID, "<unk>": UNK_ID, "<sep>": SEP_ID}

_TOKEN_RE = re.compile(r"[0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters, dropping empties."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Frequency-capped term table with reserved pad/unk/sep ids."""

    def __init__(self, term_to_id: dict[str, int]):
        self.term_to_id = term_to_id

    @classmethod
    def build(cls, texts: list[str], max_terms: int = 5000) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for term in tokenize(text):
                counts[term] = counts.get(term, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_terms]
        table = dict(RESERVED)
        for term, _ in ranked:
            table[term] = len(table)
        return cls(table)

    def __len__(self) -> int:
        return len(self.term_to_id)

    def encode(self, text: str) -> list[int]:
        return [self.term_to_id.get(t, UNK_ID) for t in tokenize(text)]

    def to_json(self) -> str:
        return json.dumps(self.term_to_id, ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(json.loads(payload))


@dataclass
class Document:
    id: str
    text: str
    domain: str


@dataclass
class Query:
    id: str
    text: str
    domain: str


Qrels = dict[tuple[str, str], int]


@dataclass
class DomainDataset:
    """Documents plus per-split queries and judgments for a set of domains."""

    domain_names: list[str]
    documents: list[Document]
    queries: dict[str, list[Query]]  # split -> queries
    qrels: dict[str, Qrels]          # split -> judgments

    def domain_id(self, name: str) -> int:
        return self.domain_names.index(name)

    def documents_in(self, domain: str) -> list[Document]:
        return [d for d in self.documents if d.domain == domain]

    def validate(self) -> None:
        problems: list[str] = []
        seen_docs: set[str] = set()
        for d in self.documents:
            if d.id in seen_docs:
                problems.append(f"duplicate document id {d.id!r}")
            seen_docs.add(d.id)
        seen_q: set[str] = set()
        for split, queries in self.queries.items():
            for q in queries:
                if q.id in seen_q:
                    problems.append(f"query id {q.id!r} appears in more than one split")
                seen_q.add(q.id)
                if q.domain not in self.domain_names:
                    problems.append(f"query {q.id!r} names unknown domain {q.domain!r}")
        for split, judgments in self.qrels.items():
            qids = {q.id for q in self.queries.get(split, [])}
            for (qid, did), grade in judgments.items():
                if grade < 0:
                    problems.append(f"negative grade for ({qid}, {did})")
                if did not in seen_docs:
                    problems.append(f"qrels reference missing document {did!r}")
                if qid not in qids:
                    problems.append(f"qrels reference unknown query {qid!r} in split {split!r}")
        if problems:
            raise ValidationError("; ".join(problems))

    def statistics(self) -> dict[str, dict[str, float]]:
        """Per-domain corpus and split sizes plus mean relevants per query."""
        stats: dict[str, dict[str, float]] = {}
        for name in self.domain_names:
            row: dict[str, float] = {"documents": sum(1 for d in self.documents if d.domain == name)}
            total_rel = 0
            total_q = 0
            for split in ("train", "val", "test"):
                qs = [q for q in self.queries.get(split, []) if q.domain == name]
                row[f"{split}_queries"] = len(qs)
                judged = self.qrels.get(split, {})
                for q in qs:
                    total_rel += sum(1 for (qid, _), g in judged.items() if qid == q.id and g > 0)
                total_q += len(qs)
            row["avg_relevants"] = total_rel / total_q if total_q else 0.0
            stats[name] = row
        return stats


@dataclass
class SynthSpec:
    """Knobs of the synthetic multi-domain generator."""

    num_domains: int = 4
    vocab_per_domain: int = 800
    docs_per_domain: int = 500
    train_queries: int = 200
    val_queries: int = 50
    test_queries: int = 50
    min_relevant: int = 1
    max_relevant: int = 3
    shared_fraction: float = 0.0  # rho
    topics_per_domain: int = 6
    terms_per_topic: int = 20
    doc_topic_purity: float = 0.85
    doc_len_min: int = 8
    doc_len_max: int = 14
    query_source_terms: int = 5
    query_noise_terms: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValidationError("shared_fraction must lie in [0, 1]")
        for name in ("num_domains", "vocab_per_domain", "docs_per_domain", "train_queries",
                     "val_queries", "test_queries", "min_relevant", "max_relevant",
                     "topics_per_domain", "terms_per_topic"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.vocab_per_domain < self.topics_per_domain * self.terms_per_topic:
            raise ValidationError("vocab_per_domain too small for the topic structure")


def generate_synthetic(spec: SynthSpec) -> DomainDataset:
    """Deterministically build a topic-structured dataset from a seed.

    Each domain owns ``topics_per_domain`` topics; a fraction rho of the
    topic slots and of the filler vocabulary is shared verbatim across all
    domains. Documents mix one topic with filler terms; queries copy a few
    terms from one source document (always judged relevant) plus noise.
    """
    rng = np.random.default_rng(spec.seed)
    names = [f"domain{n}" for n in range(spec.num_domains)]

    n_shared_topics = round(spec.shared_fraction * spec.topics_per_domain)
    filler_per_domain = spec.vocab_per_domain - spec.topics_per_domain * spec.terms_per_topic
    n_shared_filler = round(spec.shared_fraction * filler_per_domain)

    shared_topics = [[f"st{t:03d}x{j:02d}" for j in range(spec.terms_per_topic)]
                     for t in range(n_shared_topics)]
    shared_filler = [f"sf{j:04d}" for j in range(n_shared_filler)]

    domain_topics: list[list[list[str]]] = []
    domain_filler: list[list[str]] = []
    for n in range(spec.num_domains):
        own = [[f"d{n}t{t:03d}x{j:02d}" for j in range(spec.terms_per_topic)]
               for t in range(spec.topics_per_domain - n_shared_topics)]
        domain_topics.append(shared_topics + own)
        fill = shared_filler + [f"d{n}f{j:04d}" for j in range(filler_per_domain - n_shared_filler)]
        domain_filler.append(fill)

    documents: list[Document] = []
    doc_topic: dict[str, int] = {}
    docs_by_domain_topic: dict[tuple[int, int], list[str]] = {}
    for n in range(spec.num_domains):
        for i in range(spec.docs_per_domain):
            topic = int(rng.integers(0, spec.topics_per_domain))
            length = int(rng.integers(spec.doc_len_min, spec.doc_len_max + 1))
            n_topic_terms = max(1, int(round(length * spec.doc_topic_purity)))
            words = list(rng.choice(domain_topics[n][topic], size=n_topic_terms, replace=True))
            words += list(rng.choice(domain_filler[n], size=length - n_topic_terms, replace=True))
            rng.shuffle(words)
            did = f"d{n}-doc{i:05d}"
            documents.append(Document(did, " ".join(words), names[n]))
            doc_topic[did] = topic
            docs_by_domain_topic.setdefault((n, topic), []).append(did)

    queries: dict[str, list[Query]] = {"train": [], "val": [], "test": []}
    qrels: dict[str, Qrels] = {"train": {}, "val": {}, "test": {}}
    split_sizes = {"train": spec.train_queries, "val": spec.val_queries, "test": spec.test_queries}
    counter = 0
    domain_docs = {n: [d for d in documents if d.domain == names[n]] for n in range(spec.num_domains)}
    for split, size in split_sizes.items():
        for n in range(spec.num_domains):
            for _ in range(size):
                source = domain_docs[n][int(rng.integers(0, len(domain_docs[n])))]
                source_terms = source.text.split()
                topic_set = set(domain_topics[n][doc_topic[source.id]])
                k = min(spec.query_source_terms, len(source_terms))
                # favour the source document's topic terms 4:1 over its fillers
                weights = np.array([4.0 if w in topic_set else 1.0 for w in source_terms])
                idx = rng.choice(len(source_terms), size=k, replace=False,
                                 p=weights / weights.sum())
                picked = [source_terms[i] for i in idx]
                noise = list(rng.choice(domain_filler[n], size=spec.query_noise_terms, replace=True))
                qid = f"q{counter:06d}"
                counter += 1
                queries[split].append(Query(qid, " ".join(picked + noise), names[n]))
                qrels[split][(qid, source.id)] = 1
                extra = int(rng.integers(spec.min_relevant, spec.max_relevant + 1)) - 1
                pool = docs_by_domain_topic[(n, doc_topic[source.id])]
                for _ in range(extra):
                    other = pool[int(rng.integers(0, len(pool)))]
                    qrels[split][(qid, other)] = 1

    dataset = DomainDataset(names, documents, queries, qrels)
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# file formats: JSON-lines corpora and TREC qrels


def save_dataset(dataset: DomainDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "documents.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for d in dataset.documents:
            fh.write(json.dumps({"id": d.id, "text": d.text, "domain": d.domain},
                                ensure_ascii=False) + "\n")
    for split in ("train", "val", "test"):
        with open(out / f"queries_{split}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for q in dataset.queries.get(split, []):
                fh.write(json.dumps({"id": q.id, "text": q.text, "domain": q.domain},
                                    ensure_ascii=False) + "\n")
        write_qrels(dataset.qrels.get(split, {}), out / f"qrels_{split}.txt")


def load_dataset(in_dir: str | Path) -> DomainDataset:
    src = Path(in_dir)
    documents = []
    with open(src / "documents.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            documents.append(Document(row["id"], row["text"], row["domain"]))
    domain_names = sorted({d.domain for d in documents})
    queries: dict[str, list[Query]] = {}
    qrels: dict[str, Qrels] = {}
    for split in ("train", "val", "test"):
        queries[split] = []
        qpath = src / f"queries_{split}.jsonl"
        if qpath.exists():
            with open(qpath, encoding="utf-8") as fh:
                for line in fh:
                    row = json.loads(line)
                    queries[split].append(Query(row["id"], row["text"], row["domain"]))
        rpath = src / f"qrels_{split}.txt"
        qrels[split] = read_qrels(rpath) if rpath.exists() else {}
    dataset = DomainDataset(domain_names, documents, queries, qrels)
    dataset.validate()
    return dataset


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (qid, did), grade in qrels.items():
            fh.write(f"{qid} 0 {did} {grade}\n")


def read_qrels(path: str | Path) -> Qrels:
    out: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValidationError(f"{path}:{lineno}: malformed qrels line")
            qid, _, did, grade = parts
            out[(qid, did)] = int(grade)
    return out

"""Training procedures: full models, specialized teachers, and distilled adapters.

Full models (specialized, multi-domain, teacher) train on the triplet
margin loss alone. Adapter students add a mean-squared error term pulling
their scores toward a domain teacher's scores on the same pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import Adapter
from .autodiff import Adam, Tape, Tensor
from .corpus import DomainDataset, Vocabulary
from .encoder import EncoderConfig, EncoderModel, build_cross_input, encode_batch, pad_batch
from .errors import ContractError, InputError, ValidationError
from .retrieval import Bm25Params, InvertedIndex, search


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 2e-5
    margin: float = 0.1
    distill_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValidationError("epochs/batch_size/lr out of range")
        if self.margin <= 0:
            raise ValidationError("margin must be positive")
        if self.distill_weight < 0:
            raise ValidationError("distill_weight must be non-negative")


@dataclass
class TripletExample:
    query_id: str
    query: list[int]
    positive_id: str
    positive: list[int]
    negative_id: str
    negative: list[int]
    domain: int

    def __post_init__(self) -> None:
        if self.positive_id == self.negative_id:
            raise ValidationError(f"triplet for {self.query_id!r} reuses {self.positive_id!r} "
                                  "as both positive and negative")


@dataclass
class TeacherScoreRecord:
    query_id: str
    doc_id: str
    score: float


# ---------------------------------------------------------------------------
# losses


def triplet_margin_loss(s_pos: float, s_neg: float, margin: float) -> float:
    """max(0, margin - (s_pos - s_neg))."""
    return max(0.0, margin - (s_pos - s_neg))


def distill_loss(student_score: float, teacher_score: float) -> float:
    """Squared error between student and teacher scores."""
    return (student_score - teacher_score) ** 2


def combined_loss(s_pos: float, s_neg: float, margin: float,
                  t_pos: float, t_neg: float, weight: float) -> float:
    """Retrieval loss plus weighted mean distillation error over both pairs."""
    retrieval = triplet_margin_loss(s_pos, s_neg, margin)
    distill = (distill_loss(s_pos, t_pos) + distill_loss(s_neg, t_neg)) / 2.0
    return retrieval + weight * distill


def _cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    dots = ad.sum_axis(ad.mul(a, b), 1)
    na = ad.sqrt(ad.sum_axis(ad.square(a), 1))
    nb = ad.sqrt(ad.sum_axis(ad.square(b), 1))
    return ad.div(dots, ad.mul(na, nb))


def _batch_scores(model: EncoderModel, adapter: Adapter | None,
                  batch: list[TripletExample]) -> tuple[Tensor, Tensor]:
    """Taped positive/negative scores for a triplet batch, either mode."""
    if model.config.mode == "bi":
        qe = model.forward(pad_batch([t.query for t in batch]), adapter)
        pe = model.forward(pad_batch([t.positive for t in batch]), adapter)
        ne = model.forward(pad_batch([t.negative for t in batch]), adapter)
        return _cosine_rows(qe, pe), _cosine_rows(qe, ne)
    limit = model.config.max_seq_len
    pos_ids = pad_batch([build_cross_input(t.query, t.positive, limit) for t in batch])
    neg_ids = pad_batch([build_cross_input(t.query, t.negative, limit) for t in batch])
    return model.forward_scores(pos_ids, adapter), model.forward_scores(neg_ids, adapter)


def _batch_loss(s_pos: Tensor, s_neg: Tensor, config: TrainConfig,
                teacher_pos: np.ndarray | None = None,
                teacher_neg: np.ndarray | None = None) -> Tensor:
    hinge = ad.relu(ad.shift(ad.sub(s_neg, s_pos), config.margin))
    loss = ad.mean_all(hinge)
    if teacher_pos is not None:
        mse = ad.add(ad.square(ad.sub(s_pos, Tensor(teacher_pos))),
                     ad.square(ad.sub(s_neg, Tensor(teacher_neg))))
        loss = ad.add(loss, ad.scale(ad.mean_all(mse), 0.5 * config.distill_weight))
    return loss


# ---------------------------------------------------------------------------
# triplet assembly


def negative_candidates(dataset: DomainDataset, index: InvertedIndex, params: Bm25Params,
                        split: str = "train", negative_pool: int = 20,
                        ) -> dict[str, list[str]]:
    """Per query: same-domain lexical top candidates minus judged-relevant docs."""
    qrels = dataset.qrels[split]
    relevant: dict[str, set[str]] = {}
    for (qid, did), grade in qrels.items():
        if grade > 0:
            relevant.setdefault(qid, set()).add(did)
    out: dict[str, list[str]] = {}
    for q in dataset.queries[split]:
        rels = relevant.get(q.id, set())
        ranked = [did for did, _ in search(index, params, q.text, negative_pool + len(rels),
                                           domain=q.domain) if did not in rels]
        out[q.id] = ranked[:negative_pool] if ranked else \
            [d for d in index.doc_ids(q.domain) if d not in rels]
    return out


def build_triplets(dataset: DomainDataset, vocab: Vocabulary, index: InvertedIndex,
                   params: Bm25Params, split: str = "train", negative_pool: int = 20,
                   seed: int = 0, cross_domain_fraction: float = 0.0) -> list[TripletExample]:
    """One triplet per query: a judged-relevant positive and a hard-ish
    negative sampled from the same domain's lexical top candidates.

    ``cross_domain_fraction`` replaces that share of negatives with uniform
    draws from other domains' corpora; single-domain training keeps it 0,
    multi-domain training uses it so negatives reflect the union collection.
    """
    candidates = negative_candidates(dataset, index, params, split, negative_pool)
    return _assemble_triplets(dataset, vocab, candidates, split, seed, cross_domain_fraction)


def build_triplet_epochs(dataset: DomainDataset, vocab: Vocabulary, index: InvertedIndex,
                         params: Bm25Params, count: int, split: str = "train",
                         negative_pool: int = 20, seed: int = 0,
                         cross_domain_fraction: float = 0.0) -> list[list[TripletExample]]:
    """Independent triplet draws per epoch; negatives resample from fixed pools."""
    candidates = negative_candidates(dataset, index, params, split, negative_pool)
    return [_assemble_triplets(dataset, vocab, candidates, split, seed + e, cross_domain_fraction)
            for e in range(count)]


def _assemble_triplets(dataset: DomainDataset, vocab: Vocabulary,
                       candidates: dict[str, list[str]], split: str, seed: int,
                       cross_domain_fraction: float = 0.0) -> list[TripletExample]:
    rng = np.random.default_rng(seed)
    qrels = dataset.qrels[split]
    relevant: dict[str, list[str]] = {}
    for (qid, did), grade in qrels.items():
        if grade > 0:
            relevant.setdefault(qid, []).append(did)
    doc_tokens = {d.id: vocab.encode(d.text) for d in dataset.documents}
    by_domain: dict[str, list[str]] = {}
    for d in dataset.documents:
        by_domain.setdefault(d.domain, []).append(d.id)
    triplets: list[TripletExample] = []
    for q in dataset.queries[split]:
        rels = sorted(relevant.get(q.id, ()))
        pool = candidates.get(q.id, ())
        if not rels or not pool:
            continue
        pos = rels[int(rng.integers(0, len(rels)))]
        if cross_domain_fraction > 0.0 and rng.random() < cross_domain_fraction \
                and len(dataset.domain_names) > 1:
            others = [n for n in dataset.domain_names if n != q.domain]
            foreign = by_domain[others[int(rng.integers(0, len(others)))]]
            neg = foreign[int(rng.integers(0, len(foreign)))]
        else:
            neg = pool[int(rng.integers(0, len(pool)))]
        triplets.append(TripletExample(q.id, vocab.encode(q.text), pos, doc_tokens[pos],
                                       neg, doc_tokens[neg], dataset.domain_id(q.domain)))
    return triplets


# ---------------------------------------------------------------------------
# training loops


TripletData = "list[TripletExample] | list[list[TripletExample]]"


def _epoch_sets(triplets) -> list[list[TripletExample]]:
    """Accept one triplet list (reused every epoch) or per-epoch lists."""
    if triplets and isinstance(triplets[0], TripletExample):
        return [list(triplets)]
    sets = [list(s) for s in triplets]
    if not sets or any(not s for s in sets):
        raise ContractError("per-epoch triplet sets must all be non-empty")
    return sets


def train_full_model(triplets, encoder_config: EncoderConfig,
                     config: TrainConfig) -> tuple[EncoderModel, list[float]]:
    """Train every encoder weight on the triplet margin loss.

    ``triplets`` is either one list (reused each epoch) or a list of
    per-epoch lists (epoch e cycles through index e mod len). Deterministic
    under (config.seed, data): the model init, the shuffles, and therefore
    the final weights are reproducible.
    """
    if not triplets:
        raise ContractError("train_full_model needs a non-empty dataset")
    model = EncoderModel(encoder_config, seed=config.seed)
    trace = _run_training(model, None, _epoch_sets(triplets), None, config,
                          params=list(model.tensors.values()))
    return model, trace


def train_adapter(model: EncoderModel, adapter: Adapter, triplets,
                  teacher_scores: dict[tuple[str, str], float],
                  config: TrainConfig) -> list[float]:
    """Distill a domain teacher into one adapter over a frozen backbone."""
    if not model.frozen:
        raise ContractError("train_adapter requires a frozen backbone")
    if not triplets:
        raise ContractError("train_adapter needs a non-empty dataset")
    sets = _epoch_sets(triplets)
    for epoch_set in sets:
        for t in epoch_set:
            for did in (t.positive_id, t.negative_id):
                if (t.query_id, did) not in teacher_scores:
                    raise ContractError(f"missing teacher score for pair ({t.query_id!r}, {did!r})")
    return _run_training(model, adapter, sets, teacher_scores, config,
                         params=adapter.trainable_tensors())


def _run_training(model: EncoderModel, adapter: Adapter | None,
                  epoch_sets: list[list[TripletExample]],
                  teacher_scores: dict[tuple[str, str], float] | None,
                  config: TrainConfig, params: list[Tensor]) -> list[float]:
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(params, lr=config.lr)
    trace: list[float] = []
    for epoch in range(config.epochs):
        triplets = epoch_sets[epoch % len(epoch_sets)]
        order = np.arange(len(triplets))
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start: start + config.batch_size]]
            t_pos = t_neg = None
            if teacher_scores is not None:
                t_pos = np.array([teacher_scores[(t.query_id, t.positive_id)] for t in batch])
                t_neg = np.array([teacher_scores[(t.query_id, t.negative_id)] for t in batch])
            with Tape() as tape:
                s_pos, s_neg = _batch_scores(model, adapter, batch)
                loss = _batch_loss(s_pos, s_neg, config, t_pos, t_neg)
                tape.backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
        trace.append(epoch_loss / len(order))
    return trace


# ---------------------------------------------------------------------------
# teacher scoring


def score_with_teacher(teacher: EncoderModel, triplets: list[TripletExample],
                       adapter: Adapter | None = None) -> list[TeacherScoreRecord]:
    """Teacher scores for every (query, positive) and (query, negative) pair."""
    vocab_size = teacher.config.vocab_size
    for t in triplets:
        top = max(max(t.query, default=0), max(t.positive, default=0), max(t.negative, default=0))
        if top >= vocab_size:
            raise InputError(f"token id {top} outside teacher vocabulary ({vocab_size})")
    records: list[TeacherScoreRecord] = []
    if teacher.config.mode == "bi":
        q_emb = encode_batch(teacher, [t.query for t in triplets], adapter)
        p_emb = encode_batch(teacher, [t.positive for t in triplets], adapter)
        n_emb = encode_batch(teacher, [t.negative for t in triplets], adapter)

        def cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
            denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
            safe = np.where(denom == 0.0, 1.0, denom)
            return np.where(denom == 0.0, 0.0, (a * b).sum(axis=1) / safe)

        pos_scores = cos(q_emb, p_emb)
        neg_scores = cos(q_emb, n_emb)
    else:
        limit = teacher.config.max_seq_len
        pos_scores = np.empty(len(triplets))
        neg_scores = np.empty(len(triplets))
        chunk = 256
        pos_ids = [build_cross_input(t.query, t.positive, limit) for t in triplets]
        neg_ids = [build_cross_input(t.query, t.negative, limit) for t in triplets]
        for start in range(0, len(triplets), chunk):
            pos_scores[start: start + chunk] = teacher.forward_scores(
                pad_batch(pos_ids[start: start + chunk]), adapter).data
            neg_scores[start: start + chunk] = teacher.forward_scores(
                pad_batch(neg_ids[start: start + chunk]), adapter).data
    for t, sp, sn in zip(triplets, pos_scores, neg_scores):
        records.append(TeacherScoreRecord(t.query_id, t.positive_id, float(sp)))
        records.append(TeacherScoreRecord(t.query_id, t.negative_id, float(sn)))
    return records


def save_teacher_scores(records: list[TeacherScoreRecord], path: str | Path) -> None:
    """TSV cache: query id, doc id, score at 9 significant digits."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.query_id}\t{r.doc_id}\t{r.score:.9g}\n")


def load_teacher_scores(path: str | Path) -> dict[tuple[str, str], float]:
    out: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: malformed teacher-score line")
            out[(parts[0], parts[1])] = float(parts[2])
    return out

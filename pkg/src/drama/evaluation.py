"""Ranking metrics, run-file evaluation, and paired significance testing.

MAP@k normalizes by min(total relevant, k). NDCG uses graded gains with a
1/log2(rank+1) discount. Two-sided p-values come from the regularized
incomplete beta function evaluated by continued fractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError, ValidationError

MAP_K = 100
MRR_K = 10
NDCG_K = 10
BASE_ALPHA = 0.01


def average_precision_at(ranking: list[str], qrels: dict[str, int], k: int = MAP_K) -> float:
    """Mean of precision@i over relevant ranks i <= k, normalized by min(R, k)."""
    total_relevant = sum(1 for g in qrels.values() if g > 0)
    if total_relevant == 0:
        return 0.0
    denom = min(total_relevant, k)
    hits = 0
    score = 0.0
    for i, did in enumerate(ranking[:k], start=1):
        if qrels.get(did, 0) > 0:
            hits += 1
            score += hits / i
    return score / denom


def reciprocal_rank_at(ranking: list[str], qrels: dict[str, int], k: int = MRR_K) -> float:
    """1/rank of the first relevant document within the cutoff, else 0."""
    for i, did in enumerate(ranking[:k], start=1):
        if qrels.get(did, 0) > 0:
            return 1.0 / i
    return 0.0


def ndcg_at(ranking: list[str], qrels: dict[str, int], k: int = NDCG_K) -> float:
    """Discounted cumulative gain at k over the ideal ordering's value."""
    dcg = 0.0
    for i, did in enumerate(ranking[:k], start=1):
        grade = qrels.get(did, 0)
        if grade > 0:
            dcg += grade / math.log2(i + 1)
    ideal = sorted((g for g in qrels.values() if g > 0), reverse=True)[:k]
    idcg = sum(g / math.log2(i + 1) for i, g in enumerate(ideal, start=1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def query_metrics(ranking: list[str], qrels: dict[str, int]) -> dict[str, float]:
    if len(set(ranking)) != len(ranking):
        raise ValidationError("ranking contains duplicate document ids")
    return {
        "map@100": average_precision_at(ranking, qrels, MAP_K),
        "mrr@10": reciprocal_rank_at(ranking, qrels, MRR_K),
        "ndcg@10": ndcg_at(ranking, qrels, NDCG_K),
    }


def evaluate_run(run: dict[str, list[str]], qrels: dict[tuple[str, str], int],
                 ) -> tuple[dict[str, dict[str, float]], dict[str, float]]:
    """Per-query metric triples and their arithmetic means.

    The query universe is the set of judged queries; judged queries missing
    from the run score 0 on every metric. Run queries outside the judgments
    violate the contract.
    """
    by_query: dict[str, dict[str, int]] = {}
    for (qid, did), grade in qrels.items():
        by_query.setdefault(qid, {})[did] = grade
    unknown = set(run) - set(by_query)
    if unknown:
        raise ValidationError(f"run contains unjudged queries: {sorted(unknown)[:5]}")
    per_query: dict[str, dict[str, float]] = {}
    for qid in sorted(by_query):
        ranking = run.get(qid, [])
        per_query[qid] = query_metrics(ranking, by_query[qid])
    n = len(per_query)
    means = {name: (sum(row[name] for row in per_query.values()) / n if n else 0.0)
             for name in ("map@100", "mrr@10", "ndcg@10")}
    return per_query, means


# ---------------------------------------------------------------------------
# TREC run files


def write_run(run: dict[str, list[tuple[str, float]]], path: str | Path, tag: str) -> None:
    """`qid Q0 docid rank score tag`, rank from 1, score at 6 decimals."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(run):
            for rank, (did, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {did} {rank} {score:.6f} {tag}\n")


def read_run(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValidationError(f"{path}:{lineno}: malformed run line")
            qid, _, did, rank, _score, _tag = parts
            try:
                out.setdefault(qid, []).append((int(rank), did))
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: bad rank field") from exc
    return {qid: [did for _, did in sorted(rows)] for qid, rows in out.items()}


# ---------------------------------------------------------------------------
# significance


@dataclass
class SignificanceReport:
    t_statistic: float
    p_value: float
    corrected_alpha: float
    significant: bool
    n: int
    mean_difference: float
    degenerate: bool = False


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    raise ArithmeticError("incomplete beta continued fraction failed to converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) accurate to ~1e-8 over the unit interval."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if df < 1:
        raise ContractError("degrees of freedom must be >= 1")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_ttest_bonferroni(a: list[float], b: list[float], num_comparisons: int,
                            base_alpha: float = BASE_ALPHA) -> SignificanceReport:
    """Two-sided paired Student's t-test with Bonferroni-corrected alpha.

    Zero-variance differences degenerate: p=1 when the mean difference is
    also zero, p=0 (flagged) otherwise.
    """
    n = len(a)
    if n != len(b):
        raise ContractError(f"paired samples differ in length: {n} vs {len(b)}")
    if n < 2:
        raise ContractError("paired t-test needs n >= 2")
    if num_comparisons < 1:
        raise ContractError("number of comparisons must be >= 1")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    alpha = base_alpha / num_comparisons
    if var == 0.0:
        if mean == 0.0:
            return SignificanceReport(0.0, 1.0, alpha, False, n, 0.0, degenerate=True)
        return SignificanceReport(math.inf if mean > 0 else -math.inf, 0.0, alpha,
                                  True, n, mean, degenerate=True)
    t = mean / math.sqrt(var / n)
    p = student_t_two_sided_p(t, n - 1)
    return SignificanceReport(t, p, alpha, p < alpha, n, mean)

"""Operator surface: one executable driving the experiment lifecycle.

Stages hand artifacts to each other through files under the output
directory, so completed stages can be cached and re-run idempotently.
``run-all`` chains every stage across the configured seeds and aggregates
the summary, significance, gate, and energy reports.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings
from pathlib import Path

import numpy as np

from . import adapters as adapters_mod
from . import efficiency
from .adapters import AdapterRegistry, HoulsbyAdapter, LoraAdapter, load_adapter, serialize_adapter
from .corpus import DomainDataset, SynthSpec, Vocabulary, generate_synthetic, load_dataset, save_dataset
from .distill import (TrainConfig, build_triplet_epochs, load_teacher_scores,
                      save_teacher_scores, score_with_teacher, train_adapter, train_full_model)
from .encoder import EncoderConfig, EncoderModel, freeze_backbone, load_encoder, save_encoder
from .errors import (ConfigurationError, ContractError, FormatError, InputError, ShapeError,
                     ValidationError)
from .evaluation import evaluate_run, paired_ttest_bonferroni, read_run, write_run
from .gating import gate_metrics, load_gate, new_gate, route_batch, save_gate, train_gate
from .pipeline import Artifacts, STANDARD_VARIANTS, run_experiment, split_run_by_domain
from .retrieval import Bm25Params, build_index, load_index, save_index, tune_bm25

EXIT_MISSING_ARTIFACT = 2
EXIT_VALIDATION = 3
EXIT_INTERNAL = 4

METRICS = ("map@100", "mrr@10", "ndcg@10")


@dataclasses.dataclass
class ExperimentConfig:
    """Flat key=value experiment configuration; unknown keys are rejected."""

    # synthetic data
    synth_num_domains: int = 4
    synth_vocab_per_domain: int = 800
    synth_docs_per_domain: int = 500
    synth_train_queries: int = 200
    synth_val_queries: int = 50
    synth_test_queries: int = 50
    synth_min_relevant: int = 1
    synth_max_relevant: int = 3
    synth_shared_fraction: float = 0.0
    synth_topics_per_domain: int = 16
    synth_terms_per_topic: int = 12
    data_dir: str = ""          # when set, load this dataset instead of generating
    vocab_max_terms: int = 5000
    # student encoder
    encoder_mode: str = "bi"
    encoder_hidden_dim: int = 64
    encoder_num_layers: int = 2
    encoder_num_heads: int = 4
    encoder_ffn_dim: int = 128
    encoder_max_seq_len: int = 128
    # teacher encoder
    teacher_hidden_dim: int = 128
    teacher_num_layers: int = 4
    teacher_num_heads: int = 4
    teacher_ffn_dim: int = 256
    # adapters
    adapter_kind: str = "houlsby"
    adapter_reduction: int = 4
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    adapter_lr: float = 1e-3
    # training (desk profile; library defaults keep the reference recipe)
    train_epochs_full: int = 8
    train_epochs_teacher: int = 6
    train_epochs_adapter: int = 8
    train_epochs_gate: int = 10
    train_batch_size: int = 128
    train_lr_full: float = 1e-3
    train_lr_gate: float = 1e-3
    train_margin: float = 0.1
    train_distill_weight: float = 1.0
    train_negative_pool: int = 20
    # retrieval and rerank
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    bm25_tune: bool = True
    rerank_depth: int = 100
    # experiment
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    jobs: int = 1

    _KEY_MAP = None  # populated below

    def synth_spec(self, seed: int) -> SynthSpec:
        return SynthSpec(
            num_domains=self.synth_num_domains,
            vocab_per_domain=self.synth_vocab_per_domain,
            docs_per_domain=self.synth_docs_per_domain,
            train_queries=self.synth_train_queries,
            val_queries=self.synth_val_queries,
            test_queries=self.synth_test_queries,
            min_relevant=self.synth_min_relevant,
            max_relevant=self.synth_max_relevant,
            shared_fraction=self.synth_shared_fraction,
            topics_per_domain=self.synth_topics_per_domain,
            terms_per_topic=self.synth_terms_per_topic,
            seed=seed,
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, self.encoder_hidden_dim, self.encoder_num_layers,
                             self.encoder_num_heads, self.encoder_ffn_dim,
                             self.encoder_max_seq_len, self.encoder_mode)

    def teacher_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, self.teacher_hidden_dim, self.teacher_num_layers,
                             self.teacher_num_heads, self.teacher_ffn_dim,
                             self.encoder_max_seq_len, self.encoder_mode)

    def new_adapter(self, domain_id: int, seed: int):
        rng = np.random.default_rng(seed)
        if self.adapter_kind == "houlsby":
            return HoulsbyAdapter(self.encoder_hidden_dim, self.encoder_num_layers,
                                  self.adapter_reduction, domain_id=domain_id, rng=rng)
        if self.adapter_kind == "lora":
            return LoraAdapter(self.encoder_hidden_dim, self.encoder_num_layers,
                               self.adapter_rank, self.adapter_alpha, domain_id=domain_id, rng=rng)
        raise ConfigurationError(f"unknown adapter kind {self.adapter_kind!r}")


def _config_key(field_name: str) -> str:
    for prefix in ("synth", "encoder", "teacher", "adapter", "train", "bm25", "vocab",
                   "rerank", "data"):
        if field_name.startswith(prefix + "_"):
            return prefix + "." + field_name[len(prefix) + 1:]
    return field_name


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if not f.name.startswith("_")}
_KEY_TO_FIELD = {_config_key(name): name for name in _FIELDS}


def parse_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a key=value config file; paths resolve relative to the file."""
    values: dict[str, str] = {}
    base = Path(".")
    if path is not None:
        base = Path(path).resolve().parent
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValidationError(f"{path}:{lineno}: expected key=value")
                key, val = line.split("=", 1)
                values[key.strip()] = val.strip()
    if overrides:
        values.update(overrides)
    cfg = ExperimentConfig()
    for key, raw in values.items():
        if key not in _KEY_TO_FIELD:
            raise ValidationError(f"unknown configuration key {key!r}")
        name = _KEY_TO_FIELD[key]
        kind = _FIELDS[name].type
        if name == "seeds":
            parsed = tuple(int(s) for s in raw.split(",") if s.strip())
        elif kind in ("int",):
            parsed = int(raw)
        elif kind in ("float",):
            parsed = float(raw)
        elif kind in ("bool",):
            parsed = raw.lower() in ("1", "true", "yes")
        else:
            parsed = raw
            if name == "data_dir" and raw:
                parsed = str((base / raw).resolve())
        setattr(cfg, name, parsed)
    return cfg


# ---------------------------------------------------------------------------
# stage implementations (single seed, one directory)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"stage {stage!r} needs missing artifact {path}")
    return path


def _load_corpus(out: Path, stage: str) -> tuple[DomainDataset, Vocabulary]:
    _require(out / "dataset" / "documents.jsonl", stage)
    dataset = load_dataset(out / "dataset")
    vocab = Vocabulary.from_json(_require(out / "vocab.json", stage).read_text(encoding="utf-8"))
    return dataset, vocab


def _load_bm25(out: Path, stage: str) -> Bm25Params:
    text = _require(out / "bm25.tsv", stage).read_text(encoding="utf-8").strip().splitlines()
    k1, b = text[1].split("\t")
    return Bm25Params(float(k1), float(b))


def stage_gen_data(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if cfg.data_dir:
        dataset = load_dataset(cfg.data_dir)
    else:
        dataset = generate_synthetic(cfg.synth_spec(seed))
    save_dataset(dataset, out / "dataset")
    texts = [d.text for d in dataset.documents] + [q.text for q in dataset.queries["train"]]
    vocab = Vocabulary.build(texts, max_terms=cfg.vocab_max_terms)
    (out / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    stats = dataset.statistics()
    with open(out / "stats.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("domain\tdocuments\ttrain_queries\tval_queries\ttest_queries\tavg_relevants\n")
        for domain, row in stats.items():
            fh.write(f"{domain}\t{row['documents']:.0f}\t{row['train_queries']:.0f}"
                     f"\t{row['val_queries']:.0f}\t{row['test_queries']:.0f}"
                     f"\t{row['avg_relevants']:.4f}\n")


def stage_index(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, _ = _load_corpus(out, "index")
    save_index(build_index(dataset.documents), out / "index.bin")


def stage_tune_bm25(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, _ = _load_corpus(out, "tune-bm25")
    index = load_index(_require(out / "index.bin", "tune-bm25"))
    if cfg.bm25_tune:
        params = tune_bm25(index, dataset.queries["val"], dataset.qrels["val"],
                           depth=cfg.rerank_depth)
    else:
        params = Bm25Params(cfg.bm25_k1, cfg.bm25_b)
    with open(out / "bm25.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("k1\tb\n")
        fh.write(f"{params.k1}\t{params.b}\n")


def _triplet_epochs(cfg: ExperimentConfig, seed: int, out: Path, stage: str, count: int):
    dataset, vocab = _load_corpus(out, stage)
    index = load_index(_require(out / "index.bin", stage))
    params = _load_bm25(out, stage)
    sets = build_triplet_epochs(dataset, vocab, index, params, count,
                                negative_pool=cfg.train_negative_pool, seed=seed * 1000 + 17)
    return dataset, vocab, sets


def stage_train_teacher(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, vocab, sets = _triplet_epochs(cfg, seed, out, "train-teacher",
                                           cfg.train_epochs_teacher)
    tcfg = cfg.teacher_config(len(vocab))
    for did in range(len(dataset.domain_names)):
        subset = [[t for t in s if t.domain == did] for s in sets]
        model, _ = train_full_model(subset, tcfg, TrainConfig(
            epochs=cfg.train_epochs_teacher, batch_size=cfg.train_batch_size,
            lr=cfg.train_lr_full, margin=cfg.train_margin, seed=seed * 1000 + 100 + did))
        save_encoder(model, out / f"teacher{did}.bin")


def stage_train_baseline(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, vocab, sets = _triplet_epochs(cfg, seed, out, "train-baseline",
                                           cfg.train_epochs_full)
    ecfg = cfg.encoder_config(len(vocab))
    for did in range(len(dataset.domain_names)):
        subset = [[t for t in s if t.domain == did] for s in sets]
        model, _ = train_full_model(subset, ecfg, TrainConfig(
            epochs=cfg.train_epochs_full, batch_size=cfg.train_batch_size,
            lr=cfg.train_lr_full, margin=cfg.train_margin, seed=seed * 1000 + 200 + did))
        save_encoder(model, out / f"s{did}.bin")
    model, _ = train_full_model(sets, ecfg, TrainConfig(
        epochs=cfg.train_epochs_full, batch_size=cfg.train_batch_size,
        lr=cfg.train_lr_full, margin=cfg.train_margin, seed=seed * 1000 + 300))
    freeze_backbone(model)
    save_encoder(model, out / "all.bin")


def stage_distill_adapter(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, vocab, sets = _triplet_epochs(cfg, seed, out, "distill-adapter",
                                           cfg.train_epochs_adapter)
    student = load_encoder(_require(out / "all.bin", "distill-adapter"))
    freeze_backbone(student)
    for did in range(len(dataset.domain_names)):
        subset = [[t for t in s if t.domain == did] for s in sets]
        cache = out / f"teacher_scores{did}.tsv"
        if not cache.exists():
            teacher = load_encoder(_require(out / f"teacher{did}.bin", "distill-adapter"))
            seen: set[tuple[str, str, str]] = set()
            union = []
            for s in subset:
                for t in s:
                    key = (t.query_id, t.positive_id, t.negative_id)
                    if key not in seen:
                        seen.add(key)
                        union.append(t)
            save_teacher_scores(score_with_teacher(teacher, union), cache)
        scores = load_teacher_scores(cache)
        adapter = cfg.new_adapter(did, seed * 1000 + 400 + did)
        train_adapter(student, adapter, subset, scores, TrainConfig(
            epochs=cfg.train_epochs_adapter, batch_size=cfg.train_batch_size,
            lr=cfg.adapter_lr, margin=cfg.train_margin,
            distill_weight=cfg.train_distill_weight, seed=seed * 1000 + 500 + did))
        (out / f"adapter{did}.bin").write_bytes(serialize_adapter(adapter))


def stage_train_gate(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, vocab = _load_corpus(out, "train-gate")
    student = load_encoder(_require(out / "all.bin", "train-gate"))
    freeze_backbone(student)
    gate = new_gate(cfg.new_adapter(-1, seed * 1000 + 600), dataset.domain_names)
    train_q = dataset.queries["train"]
    train_gate(student, gate, [vocab.encode(q.text) for q in train_q],
               [dataset.domain_id(q.domain) for q in train_q],
               epochs=cfg.train_epochs_gate, lr=cfg.train_lr_gate,
               batch_size=cfg.train_batch_size, seed=seed * 1000 + 601)
    save_gate(gate, out / "gate.bin")
    with open(out / "gate_metrics.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("split\taccuracy\t" + "\t".join(f"precision_{n}" for n in dataset.domain_names) + "\n")
        for split in ("val", "test"):
            qs = dataset.queries[split]
            preds = route_batch(student, gate, [vocab.encode(q.text) for q in qs])
            gm = gate_metrics(preds, [dataset.domain_id(q.domain) for q in qs])
            precs = "\t".join(f"{gm.precision.get(d, 0.0):.6f}" for d in range(len(dataset.domain_names)))
            fh.write(f"{split}\t{gm.accuracy:.6f}\t{precs}\n")


def _load_artifacts(cfg: ExperimentConfig, out: Path, stage: str) -> tuple[DomainDataset, Vocabulary, Artifacts]:
    dataset, vocab = _load_corpus(out, stage)
    index = load_index(_require(out / "index.bin", stage))
    params = _load_bm25(out, stage)
    all_model = load_encoder(_require(out / "all.bin", stage))
    freeze_backbone(all_model)
    s_models = {}
    registry = AdapterRegistry()
    for did in range(len(dataset.domain_names)):
        s_models[did] = load_encoder(_require(out / f"s{did}.bin", stage))
        registry.add(did, load_adapter(_require(out / f"adapter{did}.bin", stage).read_bytes(),
                                       expect_hidden_dim=cfg.encoder_hidden_dim))
    gate = load_gate(_require(out / "gate.bin", stage))
    registry.set_gate(gate.adapter)
    return dataset, vocab, Artifacts(index=index, bm25_params=params, all_model=all_model,
                                     s_models=s_models, registry=registry, gate=gate)


def stage_rerank(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, vocab, artifacts = _load_artifacts(cfg, out, "rerank")
    runs = run_experiment(artifacts, dataset, vocab, STANDARD_VARIANTS,
                          depth=cfg.rerank_depth, rnd_seed=seed * 1000 + 700, jobs=cfg.jobs)
    run_dir = out / "runs"
    run_dir.mkdir(exist_ok=True)
    for variant, run in runs.items():
        for domain, sub in split_run_by_domain(run, dataset).items():
            write_run(sub, run_dir / f"run_{variant}_{domain}.txt", tag=variant)


def _domain_qrels(dataset: DomainDataset, domain: str) -> dict[tuple[str, str], int]:
    qids = {q.id for q in dataset.queries["test"] if q.domain == domain}
    return {k: v for k, v in dataset.qrels["test"].items() if k[0] in qids}


def stage_evaluate(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    dataset, _ = _load_corpus(out, "evaluate")
    rows = []
    for variant in STANDARD_VARIANTS:
        domain_means = {}
        for domain in dataset.domain_names:
            run_path = _require(out / "runs" / f"run_{variant}_{domain}.txt", "evaluate")
            run = read_run(run_path)
            _, means = evaluate_run(run, _domain_qrels(dataset, domain))
            domain_means[domain] = means
        rows.append((variant, domain_means))
    with open(out / "summary.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant\tdomain\t" + "\t".join(METRICS) + "\n")
        for variant, domain_means in rows:
            for domain in dataset.domain_names:
                vals = "\t".join(f"{domain_means[domain][m]:.6f}" for m in METRICS)
                fh.write(f"{variant}\t{domain}\t{vals}\n")
            mean_vals = "\t".join(
                f"{sum(domain_means[d][m] for d in dataset.domain_names) / len(dataset.domain_names):.6f}"
                for m in METRICS)
            fh.write(f"{variant}\tmean\t{mean_vals}\n")


# ---------------------------------------------------------------------------
# aggregation across seeds


def _per_query_metrics(out: Path, dataset: DomainDataset, variant: str,
                       domain: str) -> dict[str, dict[str, float]]:
    run = read_run(out / "runs" / f"run_{variant}_{domain}.txt")
    per_query, _ = evaluate_run(run, _domain_qrels(dataset, domain))
    return per_query


def aggregate_runs(cfg: ExperimentConfig, root: Path) -> None:
    """Seed-averaged summary, pooled significance, gate and energy reports."""
    seed_dirs = [(s, root / f"seed{s}") for s in cfg.seeds]
    datasets = {s: load_dataset(d / "dataset") for s, d in seed_dirs}
    domains = datasets[cfg.seeds[0]].domain_names

    per_query: dict[tuple[str, str], dict[tuple[int, str], dict[str, float]]] = {}
    for variant in STANDARD_VARIANTS:
        for domain in domains:
            cell: dict[tuple[int, str], dict[str, float]] = {}
            for s, d in seed_dirs:
                for qid, vals in _per_query_metrics(d, datasets[s], variant, domain).items():
                    cell[(s, qid)] = vals
            per_query[(variant, domain)] = cell

    def cell_mean(variant: str, domain: str, metric: str) -> float:
        cell = per_query[(variant, domain)]
        return sum(v[metric] for v in cell.values()) / len(cell)

    def paired(variant_a: str, variant_b: str, domain: str, metric: str):
        cell_a = per_query[(variant_a, domain)]
        cell_b = per_query[(variant_b, domain)]
        keys = sorted(cell_a)
        a = [cell_a[k][metric] for k in keys]
        b = [cell_b[k][metric] for k in keys]
        return paired_ttest_bonferroni(a, b, num_comparisons=len(domains))

    marks: dict[tuple[str, str, str, str], str] = {}
    sig_rows = []
    for variant in ("KD-oracle", "DRAMA", "RND"):
        for baseline in ("S", "ALL"):
            for domain in domains:
                for metric in METRICS:
                    rep = paired(variant, baseline, domain, metric)
                    better = rep.significant and rep.mean_difference > 0
                    marks[(variant, baseline, domain, metric)] = ("*" if baseline == "S" else "†") if better else ""
                    sig_rows.append((f"{variant} vs {baseline}", domain, metric, rep))
    for domain in domains:
        for metric in METRICS:
            rep = paired("DRAMA", "RND", domain, metric)
            sig_rows.append(("DRAMA vs RND", domain, metric, rep))

    with open(root / "summary.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant\tdomain\t" + "\t".join(METRICS) + "\tsig_vs_S\tsig_vs_ALL\n")
        for variant in STANDARD_VARIANTS:
            for domain in domains:
                vals = "\t".join(f"{cell_mean(variant, domain, m):.6f}" for m in METRICS)
                mark_s = marks.get((variant, "S", domain, "ndcg@10"), "")
                mark_a = marks.get((variant, "ALL", domain, "ndcg@10"), "")
                fh.write(f"{variant}\t{domain}\t{vals}\t{mark_s}\t{mark_a}\n")
            mean_vals = "\t".join(
                f"{sum(cell_mean(variant, d, m) for d in domains) / len(domains):.6f}" for m in METRICS)
            fh.write(f"{variant}\tmean\t{mean_vals}\t\t\n")

    with open(root / "significance.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("comparison\tdomain\tmetric\tt\tp\tcorrected_alpha\tsignificant\tmean_diff\tn\n")
        for name, domain, metric, rep in sig_rows:
            fh.write(f"{name}\t{domain}\t{metric}\t{rep.t_statistic:.6f}\t{rep.p_value:.6g}"
                     f"\t{rep.corrected_alpha:.6g}\t{int(rep.significant)}"
                     f"\t{rep.mean_difference:.6f}\t{rep.n}\n")

    with open(root / "gate_metrics.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("seed\tsplit\taccuracy\n")
        accs = []
        for s, d in seed_dirs:
            for line in (d / "gate_metrics.tsv").read_text(encoding="utf-8").splitlines()[1:]:
                parts = line.split("\t")
                fh.write(f"{s}\t{parts[0]}\t{parts[1]}\n")
                if parts[0] == "test":
                    accs.append(float(parts[1]))
        fh.write(f"mean\ttest\t{sum(accs) / len(accs):.6f}\n")

    energy_report(cfg, datasets[cfg.seeds[0]], root / "energy.tsv",
                  vocab_size=len(Vocabulary.from_json(
                      (seed_dirs[0][1] / "vocab.json").read_text(encoding="utf-8"))))


def energy_report(cfg: ExperimentConfig, dataset: DomainDataset, path: Path,
                  vocab_size: int) -> None:
    """Per-variant parameter, FLOP, energy, and carbon figures (ensemble basis)."""
    n = len(dataset.domain_names)
    student_cfg = cfg.encoder_config(vocab_size)
    teacher_cfg = cfg.teacher_config(vocab_size)
    student = EncoderModel(student_cfg, seed=0)
    teacher = EncoderModel(teacher_cfg, seed=0)
    adapter = cfg.new_adapter(0, 0)
    p_student = adapters_mod.param_count(student)
    p_teacher = adapters_mod.param_count(teacher)
    p_adapter = adapters_mod.param_count(adapter)
    seq = min(cfg.encoder_max_seq_len, 128)
    f_student = efficiency.count_flops(student_cfg, None, seq).flops
    f_teacher = efficiency.count_flops(teacher_cfg, None, seq).flops
    f_adapted = efficiency.count_flops(student_cfg, adapter, seq).flops
    rows = [
        ("T", n * p_teacher, n * f_teacher),
        ("S", n * p_student, n * f_student),
        ("ALL", p_student, f_student),
        # routed: one gate pass plus one adapter-activated pass
        ("DRAMA", p_student + (n + 1) * p_adapter, f_adapted * 2),
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# theoretical FLOP-level calculations; no memory, utilisation, or idle effects\n")
        fh.write(f"# basis: {efficiency.FLOP_BASIS}\n")
        fh.write("variant\tparams_m\tgflop_per_query\tjoules_per_query\tmg_co2_per_query\n")
        for name, params, flops in rows:
            joules = efficiency.energy_per_query(flops)
            mg = efficiency.co2_per_query(joules)
            fh.write(f"{name}\t{params / 1e6:.6f}\t{flops / 1e9:.6f}\t{joules:.6g}\t{mg:.6g}\n")


def energy_conversions(gflops: list[float], path: Path | None) -> list[str]:
    lines = ["gflop_per_query\tjoules_per_query\tmg_co2_per_query"]
    for g in gflops:
        joules = efficiency.energy_per_query(g * 1e9)
        mg = efficiency.co2_per_query(joules)
        lines.append(f"{g}\t{joules:.6g}\t{mg:.6g}")
    if path is not None:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return lines


STAGES = {
    "gen-data": stage_gen_data,
    "index": stage_index,
    "tune-bm25": stage_tune_bm25,
    "train-teacher": stage_train_teacher,
    "train-baseline": stage_train_baseline,
    "distill-adapter": stage_distill_adapter,
    "train-gate": stage_train_gate,
    "rerank": stage_rerank,
    "evaluate": stage_evaluate,
}

STAGE_ORDER = ("gen-data", "index", "tune-bm25", "train-teacher", "train-baseline",
               "distill-adapter", "train-gate", "rerank", "evaluate")


def run_all(cfg: ExperimentConfig, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        seed_dir = root / f"seed{seed}"
        for name in STAGE_ORDER:
            STAGES[name](cfg, seed, seed_dir)
    aggregate_runs(cfg, root)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drama",
                                     description="multi-domain adapter reranking experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="key=value experiment config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed for single-stage runs")
        p.add_argument("--jobs", type=int, default=None, help="worker pool size")

    for name in STAGE_ORDER:
        common(sub.add_parser(name, help=f"run the {name} stage"))
    common(sub.add_parser("run-all", help="run every stage across all configured seeds"))

    sig = sub.add_parser("significance", help="paired t-test between two run files")
    common(sig)
    sig.add_argument("--run-a", required=True)
    sig.add_argument("--run-b", required=True)
    sig.add_argument("--qrels", required=True)
    sig.add_argument("--comparisons", type=int, default=1)

    en = sub.add_parser("energy-report", help="energy/carbon conversion table")
    common(en)
    en.add_argument("--from-gflops", default=None,
                    help="comma-separated GFLOP/query values to convert directly")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.jobs is not None:
            cfg.jobs = args.jobs
        out = Path(args.out)
        seed = args.seed if args.seed is not None else cfg.seeds[0]

        if args.command == "run-all":
            if args.seed is not None:
                cfg.seeds = (args.seed,)
            run_all(cfg, out)
        elif args.command == "significance":
            from .corpus import read_qrels
            run_a = read_run(args.run_a)
            run_b = read_run(args.run_b)
            qrels = read_qrels(args.qrels)
            pa, _ = evaluate_run(run_a, qrels)
            pb, _ = evaluate_run(run_b, qrels)
            print("metric\tt\tp\tcorrected_alpha\tsignificant")
            for metric in METRICS:
                keys = sorted(pa)
                rep = paired_ttest_bonferroni([pa[k][metric] for k in keys],
                                              [pb[k][metric] for k in keys],
                                              num_comparisons=args.comparisons)
                print(f"{metric}\t{rep.t_statistic:.6f}\t{rep.p_value:.6g}"
                      f"\t{rep.corrected_alpha:.6g}\t{int(rep.significant)}")
        elif args.command == "energy-report":
            out.mkdir(parents=True, exist_ok=True)
            if args.from_gflops:
                gflops = [float(x) for x in args.from_gflops.split(",") if x.strip()]
                for line in energy_conversions(gflops, out / "energy_conversions.tsv"):
                    print(line)
            else:
                seed_dir = out / f"seed{seed}"
                src = seed_dir if (seed_dir / "dataset").exists() else out
                dataset, vocab = _load_corpus(src, "energy-report")
                energy_report(cfg, dataset, out / "energy.tsv", vocab_size=len(vocab))
        else:
            STAGES[args.command](cfg, seed, out)
        return 0
    except FileNotFoundError as exc:
        print(f"error code={EXIT_MISSING_ARTIFACT} command={args.command} msg={exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except (ValidationError, ConfigurationError, InputError, FormatError) as exc:
        print(f"error code={EXIT_VALIDATION} command={args.command} msg={exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ContractError, ShapeError, ArithmeticError) as exc:
        print(f"error code={EXIT_INTERNAL} command={args.command} msg={exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Multi-domain neural reranking with per-domain adapters and query routing."""

from .adapters import (AdapterRegistry, HoulsbyAdapter, LoraAdapter, deployment_param_count,
                       houlsby_forward, load_adapter, lora_effective_weight, param_count,
                       serialize_adapter)
from .autodiff import Adam, Tape, Tensor, backward, finite_difference_check
from .corpus import (DomainDataset, Document, Query, SynthSpec, Vocabulary, generate_synthetic,
                     load_dataset, save_dataset, tokenize)
from .distill import (TeacherScoreRecord, TrainConfig, TripletExample, build_triplets,
                      combined_loss, distill_loss, score_with_teacher, train_adapter,
                      train_full_model, triplet_margin_loss)
from .efficiency import (EnergyModel, FlopProfile, StorageReport, co2_per_query, count_flops,
                         energy_per_query, storage_comparison)
from .encoder import (Embedding, EncoderConfig, EncoderModel, encode, encode_batch,
                      freeze_backbone, load_encoder, save_encoder, score_bi, score_cross)
from .evaluation import (SignificanceReport, average_precision_at, evaluate_run, ndcg_at,
                         paired_ttest_bonferroni, reciprocal_rank_at)
from .gating import (Gate, gate_metrics, gate_probs, load_gate, new_gate, random_route, route,
                     train_gate)
from .pipeline import Artifacts, EmbeddingStore, RerankRequest, rerank, run_experiment
from .retrieval import Bm25Params, InvertedIndex, bm25_score, build_index, search, tune_bm25

__version__ = "0.1.0"

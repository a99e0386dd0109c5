"""Analytic FLOP accounting with energy, carbon, and storage conversions.

All figures are theoretical FLOP-level calculations — no memory traffic,
utilisation, or idle draw — and every profile carries its accounting basis
so numbers are never quoted without their counting rules.
"""

from __future__ import annotations

from dataclasses import dataclass

from .adapters import HoulsbyAdapter, LoraAdapter
from .encoder import EncoderConfig
from .errors import ValidationError

JOULES_PER_FLOP = 15.6e-12
GRAMS_CO2_PER_KWH = 400.0
JOULES_PER_KWH = 3.6e6

FLOP_BASIS = ("matrix products at 2*m*n*k (multiply-accumulate = 2 ops); "
              "attention = QKVO projections + score and weighted-sum products; "
              "layer norms at 5 ops/element; mean pooling at 1 op/element; "
              "embedding lookups, biases, and nonlinearities excluded")


@dataclass
class EnergyModel:
    joules_per_flop: float = JOULES_PER_FLOP
    grams_co2_per_kwh: float = GRAMS_CO2_PER_KWH

    def __post_init__(self) -> None:
        if self.joules_per_flop <= 0 or self.grams_co2_per_kwh <= 0:
            raise ValidationError("energy model constants must be strictly positive")


@dataclass
class FlopProfile:
    name: str
    flops: float
    basis: str

    def __post_init__(self) -> None:
        if self.flops < 0:
            raise ValidationError("flops must be non-negative")
        if not self.basis:
            raise ValidationError("a FLOP profile must state its accounting basis")


def count_flops(config: EncoderConfig, adapter=None, seq_len: int | None = None,
                name: str = "encoder") -> FlopProfile:
    """FLOPs of one forward pass at a given sequence length."""
    L = config.max_seq_len if seq_len is None else seq_len
    D = config.hidden_dim
    F = config.ffn_dim
    per_layer = (
        4 * 2 * L * D * D      # q, k, v, o projections
        + 2 * 2 * L * L * D    # attention scores and weighted sum
        + 2 * L * D * F        # feed-forward expand
        + 2 * L * F * D        # feed-forward contract
        + 2 * 5 * L * D        # two layer norms
    )
    total = config.num_layers * per_layer + L * D  # + mean pooling
    parts = [f"{config.num_layers} layers * (8LD^2 + 4L^2D + 4LDF + 10LD) + LD",
             f"L={L}, D={D}, F={F}"]
    if config.mode == "cross":
        total += 2 * D
        parts.append("cross score head: 2D")
    if isinstance(adapter, HoulsbyAdapter):
        b = adapter.bottleneck
        total += adapter.num_layers * 2 * (2 * L * D * b + 2 * L * b * D)
        parts.append(f"bottleneck adapters: layers * 2 slots * 4LDb, b={b}")
    elif isinstance(adapter, LoraAdapter):
        r = adapter.rank
        total += adapter.num_layers * 2 * 2 * r * D * D
        parts.append(f"low-rank folds: layers * 2 targets * 2rD^2, r={r}")
    return FlopProfile(name=name, flops=float(total), basis=FLOP_BASIS + "; " + "; ".join(parts))


def energy_per_query(flops: float, model: EnergyModel | None = None) -> float:
    """Joules for a given FLOP count."""
    if flops < 0:
        raise ValidationError("flops must be non-negative")
    model = model or EnergyModel()
    return flops * model.joules_per_flop


def co2_per_query(joules: float, model: EnergyModel | None = None) -> float:
    """Milligrams of CO2 for a given energy draw."""
    if joules < 0:
        raise ValidationError("joules must be non-negative")
    model = model or EnergyModel()
    return joules / JOULES_PER_KWH * model.grams_co2_per_kwh * 1000.0


@dataclass
class StorageReport:
    """Single-deployment footprint against one-model-per-domain storage."""

    shared_total: int        # P + N*A + A_gate
    separate_total: int      # N * P
    ratio: float             # shared / separate
    percent_of_base: float   # shared / P * 100

    @classmethod
    def empty(cls) -> "StorageReport":
        return cls(0, 0, 0.0, 0.0)


def storage_comparison(backbone_params: int, num_domains: int, adapter_params: int,
                       gate_adapter_params: int) -> StorageReport:
    """Compare P + N*A + A_gate against maintaining N full models."""
    if min(backbone_params, num_domains, adapter_params, gate_adapter_params) < 0:
        raise ValidationError("parameter counts must be non-negative")
    shared = backbone_params + num_domains * adapter_params + gate_adapter_params
    separate = num_domains * backbone_params
    ratio = shared / separate if separate else 0.0
    percent = shared / backbone_params * 100.0 if backbone_params else 0.0
    return StorageReport(shared, separate, ratio, percent)

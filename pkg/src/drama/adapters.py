"""Parameter-efficient adapter families: residual bottleneck and low-rank delta.

Both kinds attach to a frozen encoder. A freshly initialised adapter of
either kind is an exact no-op (bottleneck up-projection zero; low-rank B
zero), so attaching untrained adapters never changes model output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .errors import ConfigurationError, FormatError, ShapeError

HOULSBY_KIND = 0
LORA_KIND = 1

SLOTS_PER_LAYER = 2  # after the attention sublayer and after the feed-forward sublayer
LORA_TARGETS = ("attn_q", "attn_v")


class HoulsbyAdapter:
    """Residual bottleneck modules, one pair per encoder layer.

    Each slot computes ``x + up(gelu(down(x)))`` with matrices
    down[hidden, bottleneck] and up[bottleneck, hidden]. The up projection
    starts at zero, making the initial transform the identity.
    """

    kind = "houlsby"
    kind_tag = HOULSBY_KIND

    def __init__(self, hidden_dim: int, num_layers: int, reduction_factor: int = 4,
                 domain_id: int = -1, rng: np.random.Generator | None = None):
        if hidden_dim % reduction_factor != 0:
            raise ConfigurationError(
                f"hidden_dim {hidden_dim} not divisible by reduction factor {reduction_factor}")
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.reduction_factor = reduction_factor
        self.bottleneck = hidden_dim // reduction_factor
        self.domain_id = domain_id
        self.tensors: dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        for layer in range(num_layers):
            for slot in range(SLOTS_PER_LAYER):
                base = f"layer{layer}.slot{slot}"
                self.tensors[f"{base}.down"] = ad.init_uniform(
                    rng, (hidden_dim, self.bottleneck), hidden_dim, self.bottleneck, name=f"{base}.down")
                self.tensors[f"{base}.down_bias"] = ad.zeros((self.bottleneck,), name=f"{base}.down_bias")
                self.tensors[f"{base}.up"] = ad.zeros((self.bottleneck, hidden_dim), name=f"{base}.up")
                self.tensors[f"{base}.up_bias"] = ad.zeros((hidden_dim,), name=f"{base}.up_bias")

    def apply(self, layer: int, slot: int, x: Tensor) -> Tensor:
        """Residual bottleneck transform of x[..., hidden_dim]."""
        if x.shape[-1] != self.hidden_dim:
            raise ShapeError(f"adapter expects width {self.hidden_dim}, got {x.shape}")
        base = f"layer{layer}.slot{slot}"
        h = ad.affine(x, self.tensors[f"{base}.down"], self.tensors[f"{base}.down_bias"])
        h = ad.gelu(h)
        h = ad.affine(h, self.tensors[f"{base}.up"], self.tensors[f"{base}.up_bias"])
        return ad.add(x, h)

    def trainable_tensors(self) -> list[Tensor]:
        return list(self.tensors.values())


def houlsby_forward(adapter: HoulsbyAdapter, layer: int, slot: int, x: Tensor) -> Tensor:
    return adapter.apply(layer, slot, x)


class LoraAdapter:
    """Low-rank weight deltas targeting the attention query/value projections.

    Per target matrix: A[rank, in_dim] and B[out_dim, rank]; the effective
    delta is (alpha / rank) * B @ A. B starts at zero.
    """

    kind = "lora"
    kind_tag = LORA_KIND

    def __init__(self, hidden_dim: int, num_layers: int, rank: int = 8, alpha: float = 16.0,
                 domain_id: int = -1, rng: np.random.Generator | None = None):
        if rank >= hidden_dim:
            raise ConfigurationError(
                f"rank {rank} is not low-rank for a {hidden_dim}x{hidden_dim} target")
        if rank < 1:
            raise ConfigurationError("rank must be >= 1")
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.rank = rank
        self.alpha = alpha
        self.domain_id = domain_id
        self.tensors: dict[str, Tensor] = {}
        rng = rng if rng is not None else np.random.default_rng(0)
        for layer in range(num_layers):
            for target in LORA_TARGETS:
                base = f"layer{layer}.{target}"
                self.tensors[f"{base}.A"] = ad.init_uniform(
                    rng, (rank, hidden_dim), rank, hidden_dim, name=f"{base}.A")
                self.tensors[f"{base}.B"] = ad.zeros((hidden_dim, rank), name=f"{base}.B")

    def delta(self, layer: int, target: str) -> Tensor:
        """Taped (alpha/rank) * B @ A for one target matrix, shape [out, in]."""
        base = f"layer{layer}.{target}"
        return ad.scale(ad.matmul(self.tensors[f"{base}.B"], self.tensors[f"{base}.A"]),
                        self.alpha / self.rank)

    def trainable_tensors(self) -> list[Tensor]:
        return list(self.tensors.values())


def lora_effective_weight(base: Tensor, a: Tensor, b: Tensor, alpha: float, rank: int) -> Tensor:
    """base[out, in] + (alpha/rank) * B @ A, leaving the base tensor untouched."""
    out_dim, in_dim = base.shape
    if rank >= min(in_dim, out_dim):
        raise ConfigurationError(f"rank {rank} is not low-rank for shape {base.shape}")
    if a.shape != (rank, in_dim) or b.shape != (out_dim, rank):
        raise ShapeError(f"low-rank factors {a.shape}/{b.shape} do not fit target {base.shape}")
    return ad.add(base, ad.scale(ad.matmul(b, a), alpha / rank))


Adapter = HoulsbyAdapter | LoraAdapter


@dataclass
class AdapterRegistry:
    """Domain-indexed adapters plus the routing adapter, all one kind."""

    domain_adapters: dict[int, Adapter] = field(default_factory=dict)
    gate_adapter: Adapter | None = None

    def add(self, domain_id: int, adapter: Adapter) -> None:
        adapter.domain_id = domain_id
        self.domain_adapters[domain_id] = adapter
        self._validate()

    def set_gate(self, adapter: Adapter) -> None:
        adapter.domain_id = -1
        self.gate_adapter = adapter
        self._validate()

    def _validate(self) -> None:
        everything = list(self.domain_adapters.values())
        if self.gate_adapter is not None:
            everything.append(self.gate_adapter)
        if not everything:
            return
        first = everything[0]
        for a in everything[1:]:
            if a.kind != first.kind or a.hidden_dim != first.hidden_dim \
                    or a.num_layers != first.num_layers:
                raise ConfigurationError("registry adapters must share kind and dimensions")
        ids = sorted(self.domain_adapters)
        if ids != list(range(len(ids))):
            raise ConfigurationError(f"domain ids must be dense 0..N-1, got {ids}")

    @property
    def num_domains(self) -> int:
        return len(self.domain_adapters)

    def get(self, domain_id: int) -> Adapter:
        return self.domain_adapters[domain_id]


def param_count(obj) -> int:
    """Exact number of stored scalars in an adapter, registry, or model."""
    if isinstance(obj, (HoulsbyAdapter, LoraAdapter)):
        return sum(t.size for t in obj.tensors.values())
    if isinstance(obj, AdapterRegistry):
        total = sum(param_count(a) for a in obj.domain_adapters.values())
        if obj.gate_adapter is not None:
            total += param_count(obj.gate_adapter)
        return total
    tensors = getattr(obj, "tensors", None)
    if tensors is not None:
        return sum(t.size for t in tensors.values())
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def deployment_param_count(model, registry: AdapterRegistry) -> int:
    """Backbone plus every stored adapter, the single-deployment footprint."""
    return param_count(model) + param_count(registry)


# ---------------------------------------------------------------------------
# persistence


def serialize_adapter(adapter: Adapter) -> bytes:
    if adapter.kind == "houlsby":
        header = [HOULSBY_KIND, adapter.domain_id, adapter.hidden_dim,
                  adapter.num_layers, adapter.reduction_factor]
        extra: list[tuple[str, np.ndarray]] = []
    else:
        header = [LORA_KIND, adapter.domain_id, adapter.hidden_dim,
                  adapter.num_layers, adapter.rank]
        extra = [("alpha", np.array([adapter.alpha]))]
    records = [(name, t.data) for name, t in adapter.tensors.items()] + extra
    return container.write_container(container.KIND_ADAPTER, header, records)


def load_adapter(blob: bytes, expect_hidden_dim: int | None = None) -> Adapter:
    _, header, records = container.read_container(blob, expect_kind=container.KIND_ADAPTER)
    kind_tag, domain_id, hidden_dim, num_layers, factor = header
    if expect_hidden_dim is not None and hidden_dim != expect_hidden_dim:
        raise FormatError(
            f"adapter hidden_dim {hidden_dim} does not match model hidden_dim {expect_hidden_dim}")
    if kind_tag == HOULSBY_KIND:
        adapter: Adapter = HoulsbyAdapter(hidden_dim, num_layers, factor, domain_id=domain_id)
    elif kind_tag == LORA_KIND:
        alpha = float(records.pop("alpha")[0])
        adapter = LoraAdapter(hidden_dim, num_layers, factor, alpha, domain_id=domain_id)
    else:
        raise FormatError(f"unknown adapter kind tag {kind_tag}")
    for name, t in adapter.tensors.items():
        if name not in records:
            raise FormatError(f"adapter file missing tensor {name!r}")
        if records[name].shape != t.shape:
            raise FormatError(f"adapter tensor {name!r} has shape {records[name].shape}, "
                              f"expected {t.shape}")
        t.data = np.ascontiguousarray(records[name])
    return adapter


def save_registry(registry: AdapterRegistry) -> bytes:
    if registry.gate_adapter is None:
        raise ConfigurationError("registry is missing its gate adapter")
    some = registry.gate_adapter
    kind_tag = some.kind_tag
    factor = some.reduction_factor if some.kind == "houlsby" else some.rank
    header = [kind_tag, registry.num_domains, some.hidden_dim, some.num_layers, factor]
    records: list[tuple[str, np.ndarray]] = []
    if some.kind == "lora":
        records.append(("alpha", np.array([some.alpha])))
    for did in range(registry.num_domains):
        for name, t in registry.domain_adapters[did].tensors.items():
            records.append((f"domain{did}/{name}", t.data))
    for name, t in registry.gate_adapter.tensors.items():
        records.append((f"gate/{name}", t.data))
    return container.write_container(container.KIND_REGISTRY, header, records)


def load_registry(blob: bytes) -> AdapterRegistry:
    _, header, records = container.read_container(blob, expect_kind=container.KIND_REGISTRY)
    kind_tag, n_domains, hidden_dim, num_layers, factor = header
    alpha = float(records["alpha"][0]) if kind_tag == LORA_KIND else 16.0

    def make(domain_id: int) -> Adapter:
        if kind_tag == HOULSBY_KIND:
            return HoulsbyAdapter(hidden_dim, num_layers, factor, domain_id=domain_id)
        return LoraAdapter(hidden_dim, num_layers, factor, alpha, domain_id=domain_id)

    registry = AdapterRegistry()
    for did in range(n_domains):
        adapter = make(did)
        for name, t in adapter.tensors.items():
            t.data = np.ascontiguousarray(records[f"domain{did}/{name}"])
        registry.add(did, adapter)
    gate = make(-1)
    for name, t in gate.tensors.items():
        t.data = np.ascontiguousarray(records[f"gate/{name}"])
    registry.set_gate(gate)
    return registry

"""Query-domain classifier: frozen encoder + routing adapter + linear head.

Routing is top-1: the query goes to the argmax-probability domain, ties
resolving to the lowest domain id. Documents never participate in routing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .adapters import Adapter, HoulsbyAdapter, LoraAdapter
from .autodiff import Adam, Tape, Tensor
from .encoder import EncoderModel, pad_batch
from .errors import ConfigurationError, ContractError, FormatError

GATE_EPOCHS = 10
GATE_LR = 1e-4


@dataclass
class Gate:
    """Routing adapter plus classification head over domain labels."""

    adapter: Adapter
    weight: Tensor           # [num_domains, hidden_dim]
    bias: Tensor             # [num_domains]
    domain_names: list[str] = field(default_factory=list)

    @property
    def num_domains(self) -> int:
        return self.weight.shape[0]

    def trainable_tensors(self) -> list[Tensor]:
        return self.adapter.trainable_tensors() + [self.weight, self.bias]


def new_gate(adapter: Adapter, domain_names: list[str]) -> Gate:
    """Zero-initialised head: every query starts at the uniform distribution."""
    if not domain_names:
        raise ConfigurationError("a gate needs at least one domain")
    n = len(domain_names)
    d = adapter.hidden_dim
    return Gate(adapter=adapter,
                weight=ad.zeros((n, d), name="gate.weight"),
                bias=ad.zeros((n,), name="gate.bias"),
                domain_names=list(domain_names))


def gate_logits(model: EncoderModel, gate: Gate, ids: np.ndarray) -> Tensor:
    emb = model.forward(ids, gate.adapter)
    return ad.affine(emb, ad.transpose(gate.weight, (1, 0)), gate.bias)


def gate_probs(model: EncoderModel, gate: Gate, tokens: list[int]) -> np.ndarray:
    """Probability vector over domains for one query."""
    if gate.num_domains == 0:
        raise ConfigurationError("gate has no domains")
    logits = gate_logits(model, gate, pad_batch([tokens]))
    return ad.softmax(logits).data[0]


def route(model: EncoderModel, gate: Gate, tokens: list[int]) -> int:
    """Argmax domain id; ties break toward the lowest id."""
    return int(np.argmax(gate_probs(model, gate, tokens)))


def route_batch(model: EncoderModel, gate: Gate, sequences: list[list[int]],
                chunk: int = 256) -> list[int]:
    out: list[int] = []
    for start in range(0, len(sequences), chunk):
        part = sequences[start: start + chunk]
        logits = gate_logits(model, gate, pad_batch(part)).data
        out.extend(int(i) for i in np.argmax(logits, axis=1))
    return out


def random_route(rng: np.random.Generator, num_domains: int) -> int:
    """Uniform routing ablation; reproducible under the caller's generator."""
    if num_domains < 1:
        raise ContractError("random_route needs at least one domain")
    return int(rng.integers(0, num_domains))


def train_gate(model: EncoderModel, gate: Gate,
               sequences: list[list[int]], labels: list[int],
               epochs: int = GATE_EPOCHS, lr: float = GATE_LR,
               batch_size: int = 128, seed: int = 0) -> list[float]:
    """Cross-entropy training of the routing adapter and head.

    The encoder backbone must already be frozen; only gate tensors move.
    Returns the per-epoch mean training loss.
    """
    if not model.frozen:
        raise ContractError("train_gate requires a frozen backbone")
    if len(sequences) != len(labels) or not sequences:
        raise ContractError("train_gate needs aligned, non-empty queries and labels")
    present = set(labels)
    for did in range(gate.num_domains):
        if did not in present:
            warnings.warn(f"domain {did} has no training queries; it will never be predicted",
                          stacklevel=2)
    rng = np.random.default_rng(seed)
    optimizer = Adam(gate.trainable_tensors(), lr=lr)
    label_arr = np.asarray(labels, dtype=np.int64)
    trace: list[float] = []
    order = np.arange(len(sequences))
    for _ in range(epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            chosen = order[start: start + batch_size]
            ids = pad_batch([sequences[i] for i in chosen])
            with Tape() as tape:
                logits = gate_logits(model, gate, ids)
                loss = ad.cross_entropy(logits, label_arr[chosen])
                tape.backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(chosen)
        trace.append(epoch_loss / len(order))
    return trace


@dataclass
class GateMetrics:
    accuracy: float
    precision: dict[int, float]


def gate_metrics(predictions: list[int], gold: list[int]) -> GateMetrics:
    """Accuracy plus per-domain precision (0 for never-predicted domains)."""
    if not predictions or len(predictions) != len(gold):
        raise ContractError("gate_metrics needs non-empty, aligned inputs")
    correct = sum(1 for p, g in zip(predictions, gold) if p == g)
    domains = sorted(set(gold) | set(predictions))
    precision: dict[int, float] = {}
    for d in domains:
        predicted = [g for p, g in zip(predictions, gold) if p == d]
        precision[d] = (sum(1 for g in predicted if g == d) / len(predicted)) if predicted else 0.0
    return GateMetrics(accuracy=correct / len(gold), precision=precision)


# ---------------------------------------------------------------------------
# persistence


def save_gate(gate: Gate, path) -> None:
    a = gate.adapter
    factor = a.reduction_factor if a.kind == "houlsby" else a.rank
    header = [gate.num_domains, a.hidden_dim, a.num_layers, a.kind_tag, factor]
    records: list[tuple[str, np.ndarray]] = [
        ("head.weight", gate.weight.data),
        ("head.bias", gate.bias.data),
        ("domain_names", container.str_to_array("\n".join(gate.domain_names))),
    ]
    if a.kind == "lora":
        records.append(("alpha", np.array([a.alpha])))
    records += [(f"adapter/{name}", t.data) for name, t in a.tensors.items()]
    with open(path, "wb") as fh:
        fh.write(container.write_container(container.KIND_GATE, header, records))


def load_gate(path) -> Gate:
    with open(path, "rb") as fh:
        blob = fh.read()
    _, header, records = container.read_container(blob, expect_kind=container.KIND_GATE)
    n_domains, hidden, layers, kind_tag, factor = header
    if kind_tag == 0:
        adapter: Adapter = HoulsbyAdapter(hidden, layers, factor, domain_id=-1)
    else:
        adapter = LoraAdapter(hidden, layers, factor, float(records["alpha"][0]), domain_id=-1)
    for name, t in adapter.tensors.items():
        key = f"adapter/{name}"
        if key not in records:
            raise FormatError(f"gate bundle missing tensor {key!r}")
        t.data = np.ascontiguousarray(records[key])
    names = container.array_to_str(records["domain_names"]).split("\n")
    if len(names) != n_domains:
        raise FormatError("gate bundle domain-name table does not match header")
    gate = Gate(adapter=adapter,
                weight=Tensor(records["head.weight"], requires_grad=True, name="gate.weight"),
                bias=Tensor(records["head.bias"], requires_grad=True, name="gate.bias"),
                domain_names=names)
    return gate

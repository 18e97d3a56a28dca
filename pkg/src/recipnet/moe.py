"""Noisy top-K mixture of experts, task heads, and expert-usage analytics.

The gate follows softmax-then-top-K ordering: mixture weights are computed
by a softmax over (optionally noisy) logits and all but the K largest are
zeroed without renormalization.  A ``renormalize`` flag restores the
conventional rescaling for experiments.  Experts with zero weight are never
evaluated, so their parameters receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, EmptySplit


@dataclass
class GateParams:
    """Routing weights for one gate over N experts."""

    w: Parameter
    w_noise: Parameter
    top_k: int
    noise_enabled: bool = True
    renormalize: bool = False

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        width: int,
        num_experts: int,
        top_k: int,
        prefix: str,
        noise_enabled: bool = True,
        renormalize: bool = False,
        dtype=np.float64,
    ) -> "GateParams":
        if not 1 <= top_k <= num_experts:
            raise ConfigError(f"top_k={top_k} outside [1, {num_experts}]")
        bound = 1.0 / np.sqrt(width)
        return cls(
            w=ad.parameter(
                rng.uniform(-bound, bound, size=(width, num_experts)).astype(dtype),
                f"{prefix}.w",
            ),
            w_noise=ad.parameter(
                rng.uniform(-bound, bound, size=(width, num_experts)).astype(dtype),
                f"{prefix}.w_noise",
            ),
            top_k=top_k,
            noise_enabled=noise_enabled,
            renormalize=renormalize,
        )

    @property
    def num_experts(self) -> int:
        return self.w.value.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.w, self.w_noise]


@dataclass
class ExpertBank:
    """N independent two-layer MLPs sharing input/output width."""

    weights: List[Parameter] = field(default_factory=list)  # flat: 4 tensors per expert
    num_experts: int = 0

    @classmethod
    def init(
        cls, rng: np.random.Generator, width: int, num_experts: int, prefix: str,
        dtype=np.float64,
    ) -> "ExpertBank":
        bound = 1.0 / np.sqrt(width)
        weights = []
        for i in range(num_experts):
            for name, shape in [
                ("0.weight", (width, width)),
                ("0.bias", (width,)),
                ("1.weight", (width, width)),
                ("1.bias", (width,)),
            ]:
                weights.append(
                    ad.parameter(
                        rng.uniform(-bound, bound, size=shape).astype(dtype),
                        f"{prefix}.{i}.{name}",
                    )
                )
        return cls(weights=weights, num_experts=num_experts)

    def expert(self, index: int) -> List[Parameter]:
        return self.weights[4 * index : 4 * index + 4]

    def apply_expert(self, index: int, x: Tensor) -> Tensor:
        w1, b1, w2, b2 = self.expert(index)
        return ad.linear(ad.silu(ad.linear(x, w1.value, b1.value)), w2.value, b2.value)

    def parameters(self) -> List[Parameter]:
        return list(self.weights)


def _top_k_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask keeping the K largest entries per row; ties break low-index."""
    order = np.argsort(-weights, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(weights)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def gate(
    x: Tensor, params: GateParams, noise_rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Sparse mixture weights, (batch, N), exactly top_k nonzero per row.

    Noise is drawn outside the graph and treated as a constant multiplier on
    softplus(x @ w_noise); with noise disabled the gate is deterministic.
    """
    logits = ad.matmul(x, params.w.value)
    if params.noise_enabled and noise_rng is not None:
        zeta = noise_rng.standard_normal(logits.shape).astype(x.data.dtype, copy=False)
        logits = ad.add(
            logits, ad.mul(Tensor(zeta), ad.softplus(ad.matmul(x, params.w_noise.value)))
        )
    weights = ad.softmax(logits)
    sparse = ad.mul(weights, Tensor(_top_k_mask(weights.data, params.top_k)))
    if params.renormalize:
        ones = Tensor(np.ones((params.num_experts, 1), dtype=x.data.dtype))
        sparse = ad.div(sparse, ad.matmul(sparse, ones))
    return sparse


def combine_experts(x: Tensor, bank: ExpertBank, weights: Tensor) -> Tensor:
    """Weighted sum of expert outputs; unselected experts are skipped."""
    batch = x.shape[0]
    out = Tensor(np.zeros_like(x.data))
    for i in range(bank.num_experts):
        rows = np.nonzero(weights.data[:, i])[0]
        if rows.size == 0:
            continue
        selector = np.eye(bank.num_experts, dtype=x.data.dtype)[:, i : i + 1]
        column = ad.matmul(weights, Tensor(selector))
        expert_out = bank.apply_expert(i, ad.gather_rows(x, rows))
        contribution = ad.mul(ad.gather_rows(column, rows), expert_out)
        out = ad.add(out, ad.segment_sum(contribution, rows, batch))
    return out


def moe_forward(
    x: Tensor,
    bank: ExpertBank,
    gate_params: GateParams,
    noise_rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Route x through the bank: gate, then the sparse expert mixture."""
    return combine_experts(x, bank, gate(x, gate_params, noise_rng))


def importance_loss(sparse_weights: Tensor, eps: float = 1e-10) -> Tensor:
    """Squared coefficient of variation of per-expert total weight.

    Optional load-balancing term; off by default in training.
    """
    batch = sparse_weights.shape[0]
    importance = ad.matmul(Tensor(np.ones((1, batch))), sparse_weights)  # (1, N)
    mean = ad.tmean(importance)
    centered = ad.sub(importance, mean)
    variance = ad.tmean(ad.mul(centered, centered))
    return ad.div(variance, ad.add(ad.mul(mean, mean), eps))


@dataclass
class TaskHead:
    """Two-layer map from the mixed embedding to one scalar property."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, prefix: str,
             dtype=np.float64) -> "TaskHead":
        bound = 1.0 / np.sqrt(width)
        return cls(
            w1=ad.parameter(rng.uniform(-bound, bound, (width, width)).astype(dtype),
                            f"{prefix}.0.weight"),
            b1=ad.parameter(rng.uniform(-bound, bound, width).astype(dtype),
                            f"{prefix}.0.bias"),
            w2=ad.parameter(rng.uniform(-bound, bound, (width, 1)).astype(dtype),
                            f"{prefix}.1.weight"),
            b2=ad.parameter(rng.uniform(-bound, bound, 1).astype(dtype),
                            f"{prefix}.1.bias"),
        )

    def apply(self, x: Tensor) -> Tensor:
        return ad.linear(ad.silu(ad.linear(x, self.w1.value, self.b1.value)),
                         self.w2.value, self.b2.value)

    def parameters(self) -> List[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def task_heads(y_per_task: Sequence[Tensor], heads: Sequence[TaskHead]) -> Tensor:
    """Stack per-task scalar predictions into a (batch, T) matrix."""
    if len(y_per_task) != len(heads):
        raise ConfigError(f"{len(y_per_task)} inputs for {len(heads)} heads")
    return ad.concat([head.apply(y) for y, head in zip(y_per_task, heads)], axis=-1)


def single_task_decoder(
    h_nodes: Tensor, structure_ids: np.ndarray, num_structures: int, head: TaskHead
) -> Tensor:
    """Mean-pool nodes per structure, then a two-layer head to one scalar."""
    pooled = ad.segment_mean(h_nodes, structure_ids, num_structures)
    return head.apply(pooled)


@dataclass
class ExpertUsage:
    """Per-task expert selection frequencies and their cosine similarities."""

    tasks: List[str]
    frequencies: Dict[str, np.ndarray]  # task -> (N,) summing to 1
    similarity: np.ndarray  # (T, T)

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "frequencies": {t: self.frequencies[t].tolist() for t in self.tasks},
            "similarity": self.similarity.tolist(),
        }


def usage_from_gate_weights(
    per_task_weights: Dict[str, np.ndarray], indicator: bool = False
) -> ExpertUsage:
    """Average gate weights (or top-K selection indicators) per task.

    Frequencies are normalized to sum to one; similarity is the cosine
    between per-task frequency vectors.
    """
    tasks = list(per_task_weights)
    freqs = {}
    for task in tasks:
        w = np.asarray(per_task_weights[task], dtype=np.float64)
        if w.ndim != 2 or w.shape[0] == 0:
            raise EmptySplit(f"no gate observations for task {task!r}")
        counts = (w > 0).astype(np.float64) if indicator else w
        total = counts.sum()
        if total <= 0:
            raise EmptySplit(f"gate weights for task {task!r} sum to zero")
        freqs[task] = counts.sum(axis=0) / total

    t = len(tasks)
    sim = np.eye(t)
    for i in range(t):
        for j in range(i + 1, t):
            a, b = freqs[tasks[i]], freqs[tasks[j]]
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            sim[i, j] = sim[j, i] = float(a @ b / denom) if denom > 0 else 0.0
    return ExpertUsage(tasks=tasks, frequencies=freqs, similarity=sim)

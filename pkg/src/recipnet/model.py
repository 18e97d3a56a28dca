"""End-to-end model: embeddings, fused blocks, and decoders.

Each block runs the short-range message-passing layer and the long-range
reciprocal update side by side; by default the two results are summed and
the fused embedding re-seeds both streams of the next block.  Readout mean-
pools nodes per structure, then either a single task head (one property) or
a shared expert bank routed by per-task gates (multi-property).

Batches hold several structures at once.  Geometry is packed into constants
up front: edge indices are offset into the concatenated node list, and the
per-structure phase matrices form one block-diagonal cos/sin pair so the
whole batch shares a single matmul per block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .embeddings import AtomFeatureTable, EdgeFeatureConfig, rbf_expand
from .errors import ConfigError
from .graph import build_graph
from .lattice import CrystalStructure, reciprocal_basis
from .moe import ExpertBank, GateParams, TaskHead, combine_experts, gate, task_heads
from .reciprocal import (
    ReciprocalFilter,
    factors_from_phases,
    inverse_from_phases,
    phase_matrices,
)
from .shortrange import LocalLayerParams, local_layer


@dataclass
class MoeConfig:
    num_experts: int = 15
    top_k: int = 4
    noise: bool = True
    renormalize: bool = False


@dataclass
class ModelConfig:
    tasks: List[str]
    num_blocks: int = 3
    hidden: int = 256
    k_neighbors: int = 16
    radius_scale: float = 1.0
    kmax: int = 1
    include_zero_freq: bool = False
    filter_mode: str = "continuous_mlp"
    filter_hidden: int = 64
    filter_init_scale: float = 1e-4
    filter_k_max: float = 25.0  # RBF grid for the |k| filter input
    filter_k_centers: int = 32
    aggregation: str = "sum"
    merge_streams: bool = True
    use_reciprocal: bool = True  # off: long-range stream passes through untouched
    moe: Optional[MoeConfig] = None
    edge: EdgeFeatureConfig = field(default_factory=EdgeFeatureConfig)
    atom_table_path: Optional[str] = None
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("tasks must be non-empty")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.kmax < 0:
            raise ConfigError("kmax must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.use_reciprocal and self.num_frequencies == 0:
            raise ConfigError("frequency set is empty: raise kmax or include the zero frequency")
        if self.multi_task and self.moe is None:
            self.moe = MoeConfig()

    @property
    def multi_task(self) -> bool:
        return len(self.tasks) >= 2

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def num_frequencies(self) -> int:
        count = (2 * self.kmax + 1) ** 3
        return count if self.include_zero_freq else count - 1

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "moe":
                out[f.name] = None if v is None else vars(v).copy()
            elif f.name == "edge":
                out[f.name] = vars(v).copy()
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        if raw.get("moe") is not None:
            raw["moe"] = MoeConfig(**raw["moe"])
        if "edge" in raw:
            raw["edge"] = EdgeFeatureConfig(**raw["edge"])
        return cls(**raw)


@dataclass
class BlockParams:
    local: LocalLayerParams
    filter: ReciprocalFilter

    def parameters(self) -> List[Parameter]:
        return self.local.parameters() + self.filter.parameters()


@dataclass
class ModelParams:
    """All trainable parameters plus non-trainable buffers (table, BN stats)."""

    atom_w: Parameter
    atom_b: Parameter
    global_w: Parameter
    global_b: Parameter
    edge_w: Parameter
    edge_b: Parameter
    blocks: List[BlockParams]
    feature_table: AtomFeatureTable
    stl_head: Optional[TaskHead] = None
    bank: Optional[ExpertBank] = None
    gates: Optional[Dict[str, GateParams]] = None
    heads: Optional[Dict[str, TaskHead]] = None

    def parameters(self) -> List[Parameter]:
        out = [self.atom_w, self.atom_b, self.global_w, self.global_b,
               self.edge_w, self.edge_b]
        for block in self.blocks:
            out.extend(block.parameters())
        if self.stl_head is not None:
            out.extend(self.stl_head.parameters())
        if self.bank is not None:
            out.extend(self.bank.parameters())
        if self.gates is not None:
            for task in sorted(self.gates):
                out.extend(self.gates[task].parameters())
        if self.heads is not None:
            for task in sorted(self.heads):
                out.extend(self.heads[task].parameters())
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")
        return out

    def bn_states(self) -> Dict[str, BatchNormState]:
        out = {}
        for i, block in enumerate(self.blocks):
            for key, state in block.local.bn_states().items():
                out[f"blocks.{i}.local.{key}"] = state
        return out

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.value.zero_grad()


def init_params(config: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Deterministic parameter initialization from the seed.

    Linear layers use fan-in-scaled uniform init; the reciprocal filter's
    output layer starts near zero, so the untrained long-range update is a
    small perturbation of the identity.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d = config.hidden
    dt = config.np_dtype

    def lin(fan_in, fan_out, name):
        bound = 1.0 / np.sqrt(fan_in)
        w = ad.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dt),
                         f"{name}.weight")
        b = ad.parameter(rng.uniform(-bound, bound, fan_out).astype(dt), f"{name}.bias")
        return w, b

    atom_w, atom_b = lin(92, d, "embed.atom")
    global_w, global_b = lin(d, d, "embed.global")
    edge_w, edge_b = lin(config.edge.num_centers, d, "embed.edge")

    blocks = []
    for i in range(config.num_blocks):
        local = LocalLayerParams.init(rng, d, f"blocks.{i}.local",
                                      aggregation=config.aggregation, dtype=dt)
        filt = ReciprocalFilter.init(
            rng, d, f"blocks.{i}.filter",
            mode=config.filter_mode,
            hidden=config.filter_hidden,
            num_frequencies=config.num_frequencies,
            output_scale=config.filter_init_scale,
            k_grid_max=config.filter_k_max,
            k_num_centers=config.filter_k_centers,
            dtype=dt,
        )
        blocks.append(BlockParams(local=local, filter=filt))

    if config.atom_table_path:
        table = AtomFeatureTable.from_json(config.atom_table_path)
    else:
        table = AtomFeatureTable.default()

    params = ModelParams(
        atom_w=atom_w, atom_b=atom_b, global_w=global_w, global_b=global_b,
        edge_w=edge_w, edge_b=edge_b, blocks=blocks, feature_table=table,
    )
    if config.multi_task:
        moe = config.moe
        params.bank = ExpertBank.init(rng, d, moe.num_experts, "decoder.experts", dtype=dt)
        params.gates = {}
        params.heads = {}
        for task in config.tasks:
            params.gates[task] = GateParams.init(
                rng, d, moe.num_experts, moe.top_k, f"decoder.gate.{task}",
                noise_enabled=moe.noise, renormalize=moe.renormalize, dtype=dt,
            )
            params.heads[task] = TaskHead.init(rng, d, f"decoder.head.{task}", dtype=dt)
    else:
        params.stl_head = TaskHead.init(rng, d, "decoder.head", dtype=dt)
    params.parameters()  # force the duplicate-name check
    return params


@dataclass
class PreparedStructure:
    """Geometry of one structure, ready to drop into a batch."""

    atomic_numbers: List[int]
    num_atoms: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_distance: np.ndarray
    cos_phase: np.ndarray  # (n, m)
    sin_phase: np.ndarray
    k_norms: np.ndarray  # (m,)
    labels: np.ndarray  # (T,)
    mask: np.ndarray  # (T,)
    id: str = ""


def prepare_structure(structure: CrystalStructure, config: ModelConfig) -> PreparedStructure:
    """Build the graph and reciprocal constants for one structure."""
    wrapped = structure.wrapped()
    graph = build_graph(wrapped, config.k_neighbors, config.radius_scale)
    basis = reciprocal_basis(wrapped.lattice, config.kmax, config.include_zero_freq)
    freqs = basis.frequency_array()
    cos_p, sin_p = phase_matrices(wrapped.frac_coords, freqs)

    labels = np.zeros(len(config.tasks))
    mask = np.zeros(len(config.tasks))
    for t, task in enumerate(config.tasks):
        value = structure.labels.get(task)
        if value is not None:
            labels[t] = float(value)
            mask[t] = 1.0

    return PreparedStructure(
        atomic_numbers=list(wrapped.atomic_numbers),
        num_atoms=wrapped.num_atoms,
        edge_src=graph.src_array(),
        edge_dst=graph.dst_array(),
        edge_distance=graph.distance_array(),
        cos_phase=cos_p,
        sin_phase=sin_p,
        k_norms=basis.k_norms(),
        labels=labels,
        mask=mask,
        id=structure.id,
    )


@dataclass
class BatchedInput:
    """Several prepared structures packed into one forward pass."""

    num_structures: int
    atomic_numbers: List[int]
    node_segment: np.ndarray  # node -> structure index
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_distance: np.ndarray
    cos_phase: np.ndarray  # (total_nodes, total_freqs), block diagonal
    sin_phase: np.ndarray
    k_norms: np.ndarray
    labels: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T)
    ids: List[str] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.atomic_numbers)


def make_batch(prepared: Sequence[PreparedStructure]) -> BatchedInput:
    if not prepared:
        raise ConfigError("cannot batch zero structures")
    total_nodes = sum(p.num_atoms for p in prepared)
    total_freqs = sum(len(p.k_norms) for p in prepared)
    cos_phase = np.zeros((total_nodes, total_freqs))
    sin_phase = np.zeros((total_nodes, total_freqs))
    atomic_numbers: List[int] = []
    segments, srcs, dsts, dists, k_norms, ids = [], [], [], [], [], []
    node_offset = freq_offset = 0
    for s_index, p in enumerate(prepared):
        n, m = p.num_atoms, len(p.k_norms)
        cos_phase[node_offset:node_offset + n, freq_offset:freq_offset + m] = p.cos_phase
        sin_phase[node_offset:node_offset + n, freq_offset:freq_offset + m] = p.sin_phase
        atomic_numbers.extend(p.atomic_numbers)
        segments.append(np.full(n, s_index, dtype=np.int64))
        srcs.append(p.edge_src + node_offset)
        dsts.append(p.edge_dst + node_offset)
        dists.append(p.edge_distance)
        k_norms.append(p.k_norms)
        ids.append(p.id)
        node_offset += n
        freq_offset += m
    return BatchedInput(
        num_structures=len(prepared),
        atomic_numbers=atomic_numbers,
        node_segment=np.concatenate(segments),
        edge_src=np.concatenate(srcs),
        edge_dst=np.concatenate(dsts),
        edge_distance=np.concatenate(dists),
        cos_phase=cos_phase,
        sin_phase=sin_phase,
        k_norms=np.concatenate(k_norms),
        labels=np.stack([p.labels for p in prepared]),
        mask=np.stack([p.mask for p in prepared]),
        ids=ids,
    )


def fused_block(
    h_local: Tensor,
    h_global: Tensor,
    batch: BatchedInput,
    v_e: Tensor,
    block: BlockParams,
    training: bool,
    merge_streams: bool = True,
    use_reciprocal: bool = True,
) -> Tuple[Tensor, Tensor]:
    """One combined short-range + long-range update.

    With merged streams the summed update feeds both inputs of the next
    block; otherwise the streams stay separate until readout.
    """
    dt = h_local.data.dtype
    u = local_layer(h_local, batch.edge_src, batch.edge_dst, v_e, block.local, training)
    if use_reciprocal:
        w = block.filter.weights(batch.k_norms)
        cos_p = batch.cos_phase.astype(dt, copy=False)
        sin_p = batch.sin_phase.astype(dt, copy=False)
        real, imag = factors_from_phases(cos_p, sin_p, h_global)
        update = inverse_from_phases(cos_p, sin_p, real, imag, w)
        g = ad.add(h_global, update)
    else:
        g = h_global
    if merge_streams:
        fused = ad.add(u, g)
        return fused, fused
    return u, g


def pooled_embeddings(
    batch: BatchedInput,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
) -> Tensor:
    """Per-structure embeddings after all blocks and mean pooling, (B, d)."""
    dt = config.np_dtype
    feats = params.feature_table.features(batch.atomic_numbers).astype(dt, copy=False)
    h_local = ad.linear(Tensor(feats), params.atom_w.value, params.atom_b.value)
    h_global = ad.softplus(
        ad.linear(h_local, params.global_w.value, params.global_b.value)
    )
    rbf = rbf_expand(batch.edge_distance, config.edge).astype(dt, copy=False)
    v_e = ad.softplus(ad.linear(Tensor(rbf), params.edge_w.value, params.edge_b.value))

    for block in params.blocks:
        h_local, h_global = fused_block(
            h_local, h_global, batch, v_e, block, training,
            config.merge_streams, config.use_reciprocal,
        )

    h_read = h_local if config.merge_streams else ad.add(h_local, h_global)
    return ad.segment_mean(h_read, batch.node_segment, batch.num_structures)


def forward(
    batch: BatchedInput,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    noise_rng: Optional[np.random.Generator] = None,
    gate_sink: Optional[Dict[str, Tensor]] = None,
) -> Tensor:
    """Predictions, one row per structure and one column per task.

    ``gate_sink``, when given, receives each task's sparse gate weights
    (for usage statistics or an auxiliary balancing loss).
    """
    pooled = pooled_embeddings(batch, params, config, training)
    if not config.multi_task:
        return params.stl_head.apply(pooled)
    mixed = []
    for task in config.tasks:
        weights = gate(pooled, params.gates[task], noise_rng if training else None)
        if gate_sink is not None:
            gate_sink[task] = weights
        mixed.append(combine_experts(pooled, params.bank, weights))
    return task_heads(mixed, [params.heads[task] for task in config.tasks])


def predict_structures(
    structures: Sequence[CrystalStructure],
    params: ModelParams,
    config: ModelConfig,
    batch_size: int = 64,
) -> np.ndarray:
    """Eval-mode predictions for a list of structures, (len, T).

    Values are in the model's output scale; apply the checkpoint's
    normalization to get property units.
    """
    rows = []
    for start in range(0, len(structures), batch_size):
        chunk = structures[start:start + batch_size]
        batch = make_batch([prepare_structure(s, config) for s in chunk])
        rows.append(forward(batch, params, config, training=False).data)
    return np.vstack(rows)

"""Module-by-module finite-difference battery behind the gradcheck command.

Each entry builds a small fixture, runs grad_check against central
differences at float64, and reports the worst relative error.  Thresholds:
1e-5 for individual modules, 1e-4 for the assembled model.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .embeddings import EdgeFeatureConfig
from .lattice import CrystalStructure, reciprocal_basis
from .model import ModelConfig, MoeConfig, forward, init_params, make_batch, prepare_structure
from .moe import ExpertBank, GateParams, TaskHead, moe_forward
from .reciprocal import ReciprocalFilter, reciprocal_block
from .shortrange import LocalLayerParams, local_layer

MODULE_THRESHOLD = 1e-5
MODEL_THRESHOLD = 1e-4


def _random_structure(rng, num_atoms=3):
    return CrystalStructure(
        atomic_numbers=[int(z) for z in rng.integers(1, 20, size=num_atoms)],
        frac_coords=rng.uniform(0, 1, size=(num_atoms, 3)),
        lattice=rng.uniform(-1.5, 1.5, size=(3, 3)) + np.eye(3) * 3.0,
    )


def _check_core_ops(rng):
    w1 = ad.parameter(rng.normal(size=(6, 8)), "w1")
    b1 = ad.parameter(rng.normal(size=8), "b1")
    w2 = ad.parameter(rng.normal(size=(8, 4)), "w2")
    x = rng.normal(size=(5, 6))
    c = rng.normal(size=(5, 4))
    seg = np.array([0, 1, 0, 1, 1])

    def f():
        h = ad.silu(ad.linear(ad.Tensor(x), w1.value, b1.value))
        h = ad.softmax(ad.matmul(h, w2.value))
        pooled = ad.segment_mean(ad.mul(h, c), seg, 2)
        return ad.tsum(ad.mul(ad.sigmoid(pooled), ad.cos(pooled)))

    return ad.grad_check(f, [w1, b1, w2], max_entries_per_param=16)


def _check_batch_norm(rng):
    state = ad.BatchNormState.create(5)
    state.running_mean = rng.normal(size=5)
    state.running_var = rng.uniform(0.5, 2.0, size=5)
    gamma = ad.parameter(rng.normal(size=5), "gamma")
    beta = ad.parameter(rng.normal(size=5), "beta")
    x = ad.parameter(rng.normal(size=(7, 5)), "x")

    def f():
        out = ad.batch_norm(x.value, gamma.value, beta.value, state, training=False)
        return ad.tsum(ad.mul(out, out))

    return ad.grad_check(f, [x, gamma, beta], max_entries_per_param=16)


def _check_embeddings(rng):
    w = ad.parameter(rng.normal(size=(8, 6)) * 0.3, "w")
    b = ad.parameter(rng.normal(size=6) * 0.3, "b")
    h = rng.normal(size=(4, 8))

    def f():
        return ad.tsum(ad.softplus(ad.linear(ad.Tensor(h), w.value, b.value)))

    return ad.grad_check(f, [w, b], max_entries_per_param=16)


def _check_local_layer(rng):
    from .graph import build_graph

    s = _random_structure(rng, num_atoms=4)
    g = build_graph(s, k=3)
    width = 5
    params = LocalLayerParams.init(rng, width, "layer")
    h = rng.normal(size=(4, width))
    v_e = rng.normal(size=(g.num_edges, width))
    c = rng.normal(size=(4, width))

    def f():
        out = local_layer(ad.Tensor(h), g.src_array(), g.dst_array(),
                          ad.Tensor(v_e), params, training=False)
        return ad.tsum(ad.mul(out, c))

    return ad.grad_check(f, params.parameters(), max_entries_per_param=8)


def _check_reciprocal(rng):
    basis = reciprocal_basis(rng.uniform(-1.5, 1.5, size=(3, 3)) + np.eye(3) * 3.0, kmax=1)
    filt = ReciprocalFilter.init(rng, width=4, prefix="f", output_scale=0.5)
    h = ad.parameter(rng.normal(size=(3, 4)), "h")
    frac = rng.uniform(0, 1, size=(3, 3))
    c = rng.normal(size=(3, 4))

    def f():
        return ad.tsum(ad.mul(reciprocal_block(h.value, frac, basis, filt), c))

    return ad.grad_check(f, [h] + filt.parameters(), max_entries_per_param=10)


def _check_moe(rng):
    bank = ExpertBank.init(rng, width=4, num_experts=3, prefix="e")
    gate_params = GateParams.init(rng, width=4, num_experts=3, top_k=2, prefix="g",
                                  noise_enabled=False)
    head = TaskHead.init(rng, width=4, prefix="h")
    x = rng.normal(size=(4, 4))

    def f():
        return ad.tsum(head.apply(moe_forward(ad.Tensor(x), bank, gate_params)))

    params = bank.parameters() + gate_params.parameters() + head.parameters()
    return ad.grad_check(f, params, max_entries_per_param=4)


def _check_full_model(rng):
    config = ModelConfig(
        tasks=["a", "b"],
        num_blocks=2,
        hidden=6,
        k_neighbors=3,
        kmax=1,
        filter_hidden=4,
        edge=EdgeFeatureConfig(num_centers=8),
        moe=MoeConfig(num_experts=3, top_k=2, noise=False),
        seed=int(rng.integers(1 << 16)),
    )
    params = init_params(config)
    batch = make_batch(
        [prepare_structure(_random_structure(rng), config) for _ in range(2)]
    )
    c = rng.normal(size=(2, 2))

    def f():
        return ad.tsum(ad.mul(forward(batch, params, config, training=False), c))

    return ad.grad_check(f, params.parameters(), max_entries_per_param=3)


def run_suite(seed: int = 0) -> List[Tuple[str, float, float]]:
    """(name, max relative error, threshold) for every module check."""
    rng = np.random.default_rng(seed)
    return [
        ("core-ops", _check_core_ops(rng), MODULE_THRESHOLD),
        ("batch-norm", _check_batch_norm(rng), MODULE_THRESHOLD),
        ("embeddings", _check_embeddings(rng), MODULE_THRESHOLD),
        ("short-range-layer", _check_local_layer(rng), MODULE_THRESHOLD),
        ("reciprocal-block", _check_reciprocal(rng), MODULE_THRESHOLD),
        ("moe-decoder", _check_moe(rng), MODULE_THRESHOLD),
        ("full-model", _check_full_model(rng), MODEL_THRESHOLD),
    ]

import numpy as np
import pytest

from recipnet import autodiff as ad
from recipnet.embeddings import EdgeFeatureConfig
from recipnet.errors import ConfigError
from recipnet.lattice import CrystalStructure, wrap_fractional
from recipnet.model import (
    ModelConfig,
    MoeConfig,
    forward,
    fused_block,
    init_params,
    make_batch,
    predict_structures,
    prepare_structure,
)

from conftest import random_structure


def small_config(tasks=("energy",), **overrides):
    defaults = dict(
        tasks=list(tasks),
        num_blocks=2,
        hidden=8,
        k_neighbors=4,
        kmax=1,
        filter_hidden=8,
        edge=EdgeFeatureConfig(num_centers=16),
        seed=7,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def rotate(structure, q):
    return CrystalStructure(
        atomic_numbers=list(structure.atomic_numbers),
        frac_coords=structure.frac_coords.copy(),
        lattice=structure.lattice @ q,
        labels=dict(structure.labels),
        id=structure.id,
    )


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestConfig:
    def test_multi_task_gets_default_moe(self):
        config = small_config(tasks=("a", "b"))
        assert config.moe is not None
        assert config.moe.num_experts == 15 and config.moe.top_k == 4

    def test_round_trip_dict(self):
        config = small_config(tasks=("a", "b"), moe=MoeConfig(num_experts=5, top_k=2))
        again = ModelConfig.from_dict(config.to_dict())
        assert again.to_dict() == config.to_dict()

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            small_config(tasks=())
        with pytest.raises(ConfigError):
            small_config(num_blocks=0)
        with pytest.raises(ConfigError):
            small_config(dtype="float16")

    def test_frequency_count(self):
        assert small_config(kmax=1).num_frequencies == 26
        assert small_config(kmax=2).num_frequencies == 124
        assert small_config(kmax=1, include_zero_freq=True).num_frequencies == 27

    def test_empty_frequency_set_rejected(self):
        with pytest.raises(ConfigError):
            small_config(kmax=0)
        small_config(kmax=0, include_zero_freq=True)  # 1 frequency: allowed
        small_config(kmax=0, use_reciprocal=False)  # ablation does not need any


class TestInitParams:
    def test_same_seed_bitwise_identical(self):
        config = small_config()
        a = init_params(config, seed=3)
        b = init_params(config, seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_different_seeds_differ(self):
        config = small_config()
        a = init_params(config, seed=3)
        b = init_params(config, seed=4)
        assert any(
            not np.array_equal(pa.value.data, pb.value.data)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_names_unique_and_stable(self):
        params = init_params(small_config(tasks=("a", "b")))
        names = [p.name for p in params.parameters()]
        assert len(names) == len(set(names))
        assert names == [p.name for p in params.parameters()]

    def test_initial_reciprocal_contribution_small(self, rng):
        config = small_config()
        params = init_params(config)
        batch = make_batch(
            [prepare_structure(random_structure(rng, num_atoms=4), config) for _ in range(4)]
        )
        feats = params.feature_table.features(batch.atomic_numbers)
        h = ad.softplus(
            ad.linear(
                ad.linear(ad.Tensor(feats), params.atom_w.value, params.atom_b.value),
                params.global_w.value,
                params.global_b.value,
            )
        )
        from recipnet.reciprocal import factors_from_phases, inverse_from_phases

        block = params.blocks[0]
        w = block.filter.weights(batch.k_norms)
        real, imag = factors_from_phases(batch.cos_phase, batch.sin_phase, h)
        update = inverse_from_phases(batch.cos_phase, batch.sin_phase, real, imag, w)
        ratio = np.linalg.norm(update.data) / np.linalg.norm(h.data)
        assert ratio < 0.01


class TestFusedBlock:
    def test_zero_filter_reduces_to_local_plus_residual(self, rng):
        config = small_config()
        params = init_params(config)
        block = params.blocks[0]
        for p in (block.filter.w2, block.filter.b2):
            p.value.data[:] = 0.0
        batch = make_batch([prepare_structure(random_structure(rng, num_atoms=3), config)])
        h_local = ad.Tensor(rng.normal(size=(3, 8)))
        h_global = ad.Tensor(rng.normal(size=(3, 8)))
        v_e = ad.Tensor(rng.normal(size=(len(batch.edge_src), 8)))
        out_local, out_global = fused_block(h_local, h_global, batch, v_e, block, False)
        from recipnet.shortrange import local_layer

        u = local_layer(h_local, batch.edge_src, batch.edge_dst, v_e, block.local, False)
        np.testing.assert_allclose(out_local.data, u.data + h_global.data, atol=1e-12)
        np.testing.assert_array_equal(out_local.data, out_global.data)

    def test_split_streams_mode(self, rng):
        config = small_config(merge_streams=False)
        params = init_params(config)
        batch = make_batch([prepare_structure(random_structure(rng, num_atoms=3), config)])
        h_local = ad.Tensor(rng.normal(size=(3, 8)))
        h_global = ad.Tensor(rng.normal(size=(3, 8)))
        v_e = ad.Tensor(rng.normal(size=(len(batch.edge_src), 8)))
        out_local, out_global = fused_block(
            h_local, h_global, batch, v_e, params.blocks[0], False, merge_streams=False
        )
        assert not np.array_equal(out_local.data, out_global.data)


class TestForward:
    def test_single_atom_smoke(self):
        config = small_config()
        params = init_params(config)
        s = CrystalStructure(
            atomic_numbers=[6], frac_coords=np.zeros((1, 3)), lattice=np.eye(3) * 3
        )
        batch = make_batch([prepare_structure(s, config)])
        preds = forward(batch, params, config)
        assert preds.shape == (1, 1)
        assert np.all(np.isfinite(preds.data))

    def test_duplicate_structures_identical_predictions(self, rng):
        config = small_config()
        params = init_params(config)
        s = random_structure(rng, num_atoms=3)
        batch = make_batch([prepare_structure(s, config)] * 2)
        preds = forward(batch, params, config, training=False)
        assert abs(preds.data[0, 0] - preds.data[1, 0]) < 1e-10

    def test_batch_composition_independence(self, rng):
        config = small_config()
        params = init_params(config)
        target = random_structure(rng, num_atoms=3)
        others = [random_structure(rng) for _ in range(3)]
        alone = forward(
            make_batch([prepare_structure(target, config)]), params, config
        ).data[0, 0]
        mixed_prepared = [prepare_structure(s, config) for s in [others[0], target] + others[1:]]
        mixed = forward(make_batch(mixed_prepared), params, config).data[1, 0]
        assert abs(alone - mixed) < 1e-10

    def test_multi_task_shape_and_determinism(self, rng):
        config = small_config(tasks=("a", "b", "c"), moe=MoeConfig(num_experts=4, top_k=2))
        params = init_params(config)
        batch = make_batch(
            [prepare_structure(random_structure(rng), config) for _ in range(3)]
        )
        p1 = forward(batch, params, config, training=False)
        p2 = forward(batch, params, config, training=False)
        assert p1.shape == (3, 3)
        np.testing.assert_array_equal(p1.data, p2.data)

    def test_training_noise_reproducible_from_seed(self, rng):
        config = small_config(tasks=("a", "b"), moe=MoeConfig(num_experts=4, top_k=1))
        params = init_params(config)
        batch = make_batch([prepare_structure(random_structure(rng), config) for _ in range(2)])

        a = forward(batch, params, config, training=True,
                    noise_rng=np.random.default_rng(11)).data
        # reset BN running stats mutated by the training pass
        params2 = init_params(config)
        b = forward(batch, params2, config, training=True,
                    noise_rng=np.random.default_rng(11)).data
        np.testing.assert_array_equal(a, b)

    def test_float32_mode_runs(self, rng):
        config = small_config(dtype="float32")
        params = init_params(config)
        batch = make_batch([prepare_structure(random_structure(rng), config)])
        preds = forward(batch, params, config)
        assert np.all(np.isfinite(preds.data))

    def test_predict_structures_batching(self, rng):
        config = small_config()
        params = init_params(config)
        structures = [random_structure(rng, num_atoms=2) for _ in range(5)]
        all_at_once = predict_structures(structures, params, config, batch_size=64)
        chunked = predict_structures(structures, params, config, batch_size=2)
        np.testing.assert_allclose(all_at_once, chunked, atol=1e-10)


class TestInvariances:
    def invariance_case(self, rng, config, params, s, transform):
        base = predict_structures([s], params, config)[0]
        other = predict_structures([transform(s)], params, config)[0]
        return np.max(np.abs(base - other))

    def test_atom_permutation(self, rng):
        config = small_config()
        params = init_params(config)
        for _ in range(5):
            s = random_structure(rng, num_atoms=4)
            perm = rng.permutation(4)

            def permute(s):
                return CrystalStructure(
                    atomic_numbers=[s.atomic_numbers[p] for p in perm],
                    frac_coords=s.frac_coords[perm],
                    lattice=s.lattice,
                )

            assert self.invariance_case(rng, config, params, s, permute) < 1e-8

    def test_rigid_rotation(self, rng):
        config = small_config()
        params = init_params(config)
        for _ in range(5):
            s = random_structure(rng, num_atoms=3)
            q = random_rotation(rng)
            assert self.invariance_case(rng, config, params, s, lambda t: rotate(t, q)) < 1e-8

    def test_global_fractional_translation(self, rng):
        config = small_config()
        params = init_params(config)
        for _ in range(5):
            s = random_structure(rng, num_atoms=3)
            t = rng.uniform(0, 1, size=3)

            def translate(s):
                return CrystalStructure(
                    atomic_numbers=list(s.atomic_numbers),
                    frac_coords=wrap_fractional(s.frac_coords + t),
                    lattice=s.lattice,
                )

            assert self.invariance_case(rng, config, params, s, translate) < 1e-8

    def test_fractional_wrapping(self, rng):
        config = small_config()
        params = init_params(config)
        for _ in range(5):
            s = random_structure(rng, num_atoms=3)
            offsets = rng.integers(-3, 4, size=(3, 3)).astype(float)

            def unwrap(s):
                return CrystalStructure(
                    atomic_numbers=list(s.atomic_numbers),
                    frac_coords=s.frac_coords + offsets,
                    lattice=s.lattice,
                )

            assert self.invariance_case(rng, config, params, s, unwrap) < 1e-8


class TestFullModelGradient:
    def test_grad_check_eval_mode(self, rng):
        config = small_config(hidden=6, num_blocks=2, k_neighbors=3,
                              edge=EdgeFeatureConfig(num_centers=8), filter_hidden=4)
        params = init_params(config)
        batch = make_batch(
            [prepare_structure(random_structure(rng, num_atoms=3), config) for _ in range(2)]
        )
        c = rng.normal(size=(2, 1))

        def f():
            return ad.tsum(ad.mul(forward(batch, params, config, training=False), c))

        err = ad.grad_check(f, params.parameters(), max_entries_per_param=4, eps=1e-5)
        assert err < 1e-4

    def test_grad_check_multi_task(self, rng):
        config = small_config(
            tasks=("a", "b"), hidden=6, num_blocks=1, k_neighbors=3,
            edge=EdgeFeatureConfig(num_centers=8), filter_hidden=4,
            moe=MoeConfig(num_experts=3, top_k=2, noise=False),
        )
        params = init_params(config)
        batch = make_batch(
            [prepare_structure(random_structure(rng, num_atoms=2), config) for _ in range(2)]
        )
        c = rng.normal(size=(2, 2))

        def f():
            return ad.tsum(ad.mul(forward(batch, params, config, training=False), c))

        err = ad.grad_check(f, params.parameters(), max_entries_per_param=3, eps=1e-5)
        assert err < 1e-4

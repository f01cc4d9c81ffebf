import numpy as np
import pytest

from hsiadv import autodiff as ad
from hsiadv.seeding import TRANSFORM, derive_rng
from hsiadv.transforms import (
    IDENTITY_REGISTRY, TRANSFORM_KINDS, BlockOp, BlockPartition,
    BlockRandomTransform, TransformRegistry, apply_blockwise, apply_plan,
    make_copies, random_partition, sample_plan,
)

from conftest import gradcheck


def _volume(partition):
    total = 0
    for bl in partition.blocks():
        total += np.prod([s.stop - s.start for s in bl])
    return total


class TestPartition:
    def test_single_block_is_whole_cube(self):
        p = random_partition((5, 6, 6), 1, 1, seed=0)
        assert p.blocks() == [(slice(0, 5), slice(0, 6), slice(0, 6))]

    def test_volume_conservation(self):
        p = random_partition((12, 8, 8), 2, 3, seed=1)
        assert len(p.blocks()) == 2 * 2 * 3
        assert _volume(p) == 12 * 8 * 8

    def test_paper_default_divisions(self):
        # a=3, b=3 on a 103-band 32x32 patch: 27 non-empty blocks
        p = random_partition((103, 32, 32), 3, 3, seed=2)
        blocks = p.blocks()
        assert len(blocks) == 27
        assert all(all(s.stop > s.start for s in bl) for bl in blocks)
        assert _volume(p) == 103 * 32 * 32

    def test_contract_errors(self):
        with pytest.raises(ValueError):
            random_partition((4, 3, 3), 4, 1, seed=0)  # a > h
        with pytest.raises(ValueError):
            random_partition((4, 8, 8), 1, 5, seed=0)  # b > C

    def test_equal_blocks(self):
        p = random_partition((9, 9, 9), 3, 3, seed=0, equal_blocks=True)
        assert p.row_cuts == (0, 3, 6, 9)
        assert p.band_cuts == (0, 3, 6, 9)

    def test_determinism(self):
        a = random_partition((10, 16, 16), 3, 2, seed=42)
        b = random_partition((10, 16, 16), 3, 2, seed=42)
        assert a == b


class TestApplyBlockwise:
    def test_identity_only_reconstructs_exactly(self, rng):
        x = rng.random((6, 10, 10)).astype(np.float32)
        for a, b in [(1, 1), (2, 3), (3, 2)]:
            p = random_partition(x.shape, a, b, seed=5)
            plan = sample_plan(p, IDENTITY_REGISTRY, derive_rng(0, TRANSFORM))
            assert np.array_equal(apply_plan(x, plan), x)

    def test_vflip_single_block_flips_every_band(self, rng):
        x = rng.random((4, 6, 6)).astype(np.float32)
        reg = TransformRegistry(kinds=("vflip",))
        p = random_partition(x.shape, 1, 1, seed=0)
        out = apply_blockwise(x, p, reg)
        assert np.array_equal(out, x[:, ::-1, :])

    def test_scale_factor_one_is_identity(self, rng):
        x = rng.random((3, 8, 8)).astype(np.float32)
        p = random_partition(x.shape, 2, 2, seed=1)
        plan = tuple(BlockOp(bl, "scale", {"factor": 1.0}) for bl in p.blocks())
        assert np.array_equal(apply_plan(x, plan), x)

    def test_double_vflip_returns_original(self, rng):
        x = rng.random((5, 7, 9)).astype(np.float32)
        p = random_partition(x.shape, 3, 2, seed=2)
        plan = tuple(BlockOp(bl, "vflip") for bl in p.blocks())
        once = apply_plan(x, plan)
        twice = apply_plan(once, plan)
        assert np.array_equal(twice, x)

    def test_output_shape_and_range_every_kind(self, rng):
        for kind in TRANSFORM_KINDS:
            reg = TransformRegistry(kinds=(kind,), seed=7)
            for trial in range(5):
                shape = (int(rng.integers(1, 9)), int(rng.integers(2, 13)), int(rng.integers(2, 13)))
                x = rng.random(shape).astype(np.float32)
                a = int(rng.integers(1, min(shape[1], shape[2], 4) + 1))
                b = int(rng.integers(1, min(shape[0], 4) + 1))
                p = random_partition(shape, a, b, seed=trial)
                out = apply_blockwise(x, p, reg)
                assert out.shape == x.shape, kind
                assert out.min() >= 0.0 and out.max() <= 1.0, kind

    def test_structure_invariance_no_cross_block_writes(self, rng):
        x = rng.random((6, 9, 9)).astype(np.float32) * 0.8 + 0.1
        p = random_partition(x.shape, 3, 2, seed=3)
        blocks = p.blocks()
        plan_rng = derive_rng(11, TRANSFORM)
        reg = TransformRegistry(seed=11)
        full_plan = sample_plan(p, reg, plan_rng)
        for i, op in enumerate(full_plan):
            plan = tuple(
                op if j == i else BlockOp(blocks[j], "identity") for j in range(len(blocks))
            )
            out = apply_plan(x, plan)
            outside = np.ones(x.shape, dtype=bool)
            outside[op.block] = False
            assert np.array_equal(out[outside], x[outside]), op.kind

    def test_registry_seed_determinism(self, rng):
        x = rng.random((8, 12, 12)).astype(np.float32)
        p = random_partition(x.shape, 3, 3, seed=4)
        reg = TransformRegistry(seed=99)
        assert np.array_equal(apply_blockwise(x, p, reg), apply_blockwise(x, p, reg))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            TransformRegistry(kinds=("vflip", "sharpen"))


class TestMakeCopies:
    def test_identity_single_copy_returns_input(self, rng):
        x = rng.random((4, 6, 6)).astype(np.float32)
        (copy,) = make_copies(x, 1, 2, 2, seed=0, registry=IDENTITY_REGISTRY)
        assert np.array_equal(copy, x)

    def test_ten_distinct_copies(self, rng):
        x = rng.random((12, 16, 16)).astype(np.float32)
        copies = make_copies(x, 10, 3, 3, seed=1)
        for i in range(10):
            for j in range(i + 1, 10):
                assert not np.array_equal(copies[i], copies[j])

    def test_different_seeds_differ(self, rng):
        # Pr[copy(seed) == copy(seed')] should be vanishing; check 1000 pairs.
        x = rng.random((6, 8, 8)).astype(np.float32)
        same = 0
        for s in range(1000):
            a = make_copies(x, 1, 2, 2, seed=s)[0]
            b = make_copies(x, 1, 2, 2, seed=s + 1000)[0]
            same += int(np.array_equal(a, b))
        assert same <= 1

    def test_iteration_refreshes_draws(self, rng):
        x = rng.random((6, 8, 8)).astype(np.float32)
        a = make_copies(x, 1, 2, 2, seed=5, iteration=0)[0]
        b = make_copies(x, 1, 2, 2, seed=5, iteration=1)[0]
        assert not np.array_equal(a, b)

    def test_determinism_under_seed_and_iteration(self, rng):
        x = rng.random((6, 8, 8)).astype(np.float32)
        a = make_copies(x, 3, 2, 2, seed=5, iteration=7)
        b = make_copies(x, 3, 2, 2, seed=5, iteration=7)
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


class TestTransformGradients:
    """Pinned plans: analytic gradient through apply_plan vs finite differences."""

    @pytest.mark.parametrize("kind", TRANSFORM_KINDS + ("identity",))
    def test_gradient_matches_fd(self, kind, rng):
        shape = (3, 6, 6)
        # interior values: the [0,1] clip must stay inactive under FD probing
        x = rng.uniform(0.35, 0.65, size=shape)
        p = random_partition(shape, 2, 2, seed=8)
        reg = TransformRegistry(kinds=(kind,) if kind != "identity" else (), seed=8,
                                include_identity=kind == "identity",
                                noise_sigma=0.01, scale_range=(0.8, 1.2))
        plan = sample_plan(p, reg, derive_rng(13, TRANSFORM))

        def f(t):
            return ad.sum(ad.square(apply_plan(t, plan)))

        gradcheck(f, x, step=1e-6, tol=1e-4, rng=rng)

    def test_gradient_is_nonzero(self, rng):
        x = rng.uniform(0.3, 0.7, size=(4, 8, 8))
        p = random_partition(x.shape, 2, 2, seed=9)
        plan = sample_plan(p, TransformRegistry(seed=9), derive_rng(21, TRANSFORM))
        t = ad.Tensor(x, requires_grad=True)
        ad.sum(ad.square(apply_plan(t, plan))).backward()
        assert np.any(t.grad != 0.0)

    def test_clip_blocks_gradient_outside_range(self):
        # a scaled-up block pushed above 1 is clipped; its gradient dies there
        x = np.full((1, 2, 2), 0.9)
        plan = (BlockOp((slice(0, 1), slice(0, 2), slice(0, 2)), "scale", {"factor": 1.3}),)
        t = ad.Tensor(x, requires_grad=True)
        out = apply_plan(t, plan)
        assert np.all(out.data == 1.0)
        ad.sum(out).backward()
        assert np.all(t.grad == 0.0)


class TestEstimatorWrapper:
    def test_shape_preserved_and_params_roundtrip(self, rng):
        X = rng.random((4, 6, 10, 10)).astype(np.float32)
        tr = BlockRandomTransform(spatial_divisions=2, spectral_divisions=2, seed=3)
        out = tr.fit(X).transform(X)
        assert out.shape == X.shape
        params = tr.get_params()
        assert params["spatial_divisions"] == 2
        clone = BlockRandomTransform(**params)
        assert np.array_equal(clone.transform(X), out)

    def test_samples_transformed_independently(self, rng):
        X = np.repeat(rng.random((1, 5, 8, 8)).astype(np.float32), 3, axis=0)
        out = BlockRandomTransform(seed=1).transform(X)
        assert not np.array_equal(out[0], out[1])

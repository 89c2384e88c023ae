"""Network construction, shapes, determinism, and state round-trips."""

import numpy as np
import pytest
import torch

from srvd.errors import ShapeError
from srvd.nets import (
    DEFAULT_ANCHORS,
    DTYPE,
    GROUP_NAMES,
    ModelBundle,
    NetConfig,
    build_models,
)

DESK = NetConfig(base_resolution=16, n_residual_blocks=1, feature_width=8,
                 detector_grids=(4, 8, 16))


def rand_image(seed, side, batch=1, channels=3):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.uniform(size=(batch, channels, side, side)))


class TestNetConfig:
    def test_derived_resolutions(self):
        cfg = NetConfig(base_resolution=32)
        assert cfg.mid_resolution == 64
        assert cfg.output_resolution == 128

    def test_rejects_bad_base(self):
        with pytest.raises(ValueError):
            NetConfig(base_resolution=12)
        with pytest.raises(ValueError):
            NetConfig(base_resolution=30)

    def test_rejects_bad_grids(self):
        with pytest.raises(ValueError):
            NetConfig(base_resolution=16, detector_grids=(8, 4, 16))
        with pytest.raises(ValueError):
            NetConfig(base_resolution=16, detector_grids=(4, 8))

    def test_rejects_non_divisor_grid(self):
        with pytest.raises(ValueError):
            NetConfig(base_resolution=16, detector_grids=(3, 8, 16))


class TestBuildModels:
    def test_group_names_cover_bundle(self):
        models = build_models(DESK, seed=0)
        for group in GROUP_NAMES:
            assert isinstance(models.module(group), torch.nn.Module)

    def test_same_seed_is_bit_identical(self):
        a = build_models(DESK, seed=3).state_arrays()
        b = build_models(DESK, seed=3).state_arrays()
        assert sorted(a) == sorted(b)
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])

    def test_different_seed_differs(self):
        a = build_models(DESK, seed=0).state_arrays()
        b = build_models(DESK, seed=1).state_arrays()
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_all_parameters_are_float64(self):
        models = build_models(DESK, seed=0)
        for group in GROUP_NAMES:
            for p in models.module(group).parameters():
                assert p.dtype == DTYPE

    def test_default_anchor_count(self):
        models = build_models(DESK, seed=0)
        assert models.anchors.as_array().shape == (9, 2)
        assert models.anchors.anchors == DEFAULT_ANCHORS


class TestGenerator:
    def test_output_scales(self):
        models = build_models(DESK, seed=0)
        out = models.generator(rand_image(0, 16, batch=2))
        assert out.mid.shape == (2, 3, 32, 32)
        assert out.full.shape == (2, 3, 64, 64)

    def test_outputs_in_unit_range(self):
        models = build_models(DESK, seed=0)
        with torch.no_grad():
            out = models.generator(rand_image(1, 16))
        for img in (out.mid, out.full):
            assert float(img.min()) >= 0.0
            assert float(img.max()) <= 1.0

    def test_rejects_wrong_resolution(self):
        models = build_models(DESK, seed=0)
        with pytest.raises(ShapeError):
            models.generator(rand_image(0, 32))


class TestDiscriminators:
    def test_scores_are_probabilities(self):
        models = build_models(DESK, seed=0)
        with torch.no_grad():
            s_mid = models.discriminator_mid(rand_image(2, 32, batch=3))
            s_full = models.discriminator_full(rand_image(3, 64, batch=3))
        for s in (s_mid, s_full):
            assert s.shape == (3, 1)
            assert float(s.min()) > 0.0
            assert float(s.max()) < 1.0

    def test_rejects_wrong_scale(self):
        models = build_models(DESK, seed=0)
        with pytest.raises(ShapeError):
            models.discriminator_mid(rand_image(0, 64))


class TestDetector:
    def test_raw_shapes_coarse_to_fine(self):
        models = build_models(DESK, seed=0)
        raws = models.detector(rand_image(4, 64, batch=2))
        assert [tuple(r.shape) for r in raws] == [
            (2, 4, 4, 18),
            (2, 8, 8, 18),
            (2, 16, 16, 18),
        ]

    def test_rejects_wrong_resolution(self):
        models = build_models(DESK, seed=0)
        with pytest.raises(ShapeError):
            models.detector(rand_image(0, 32))


class TestFeatureExtractor:
    def test_identity_mode_passes_input_through(self):
        models = build_models(DESK, seed=0, identity_features=True)
        x = rand_image(5, 64)
        torch.testing.assert_close(models.feature_extractor(x), x, rtol=0, atol=0)

    def test_conv_stack_downsamples(self):
        models = build_models(DESK, seed=0)
        x = rand_image(6, 64)
        f1 = models.feature_extractor(x, layer=1)
        f2 = models.feature_extractor(x, layer=2)
        assert f1.shape[2] == 32
        assert f2.shape[2] == 16
        assert f2.shape[1] >= f1.shape[1]


class TestStateArrays:
    def test_roundtrip_is_bit_exact(self):
        a = build_models(DESK, seed=0)
        b = build_models(DESK, seed=1)
        b.load_state_arrays(a.state_arrays())
        sa, sb = a.state_arrays(), b.state_arrays()
        for key in sa:
            np.testing.assert_array_equal(sa[key], sb[key])

    def test_keys_are_group_prefixed(self):
        arrays = build_models(DESK, seed=0).state_arrays()
        for key in arrays:
            group = key.split("/", 1)[0]
            assert group in GROUP_NAMES

    def test_load_rejects_missing_key(self):
        models = build_models(DESK, seed=0)
        arrays = models.state_arrays()
        arrays.pop(sorted(arrays)[0])
        with pytest.raises(RuntimeError):
            models.load_state_arrays(arrays)

    def test_buffers_included(self):
        arrays = build_models(DESK, seed=0).state_arrays()
        assert any("running_mean" in key for key in arrays)


class TestModes:
    def test_eval_mode_everywhere(self):
        models = build_models(DESK, seed=0)
        models.train_mode()
        models.eval_mode()
        for group in GROUP_NAMES:
            assert not models.module(group).training

    def test_train_mode_excludes_feature_extractor(self):
        models = build_models(DESK, seed=0)
        models.train_mode()
        assert models.generator.training
        assert not models.feature_extractor.training

    def test_trainable_groups(self):
        models = build_models(DESK, seed=0)
        assert models.trainable_groups() == GROUP_NAMES[:-1]

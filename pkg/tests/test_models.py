import numpy as np
import pytest

from relfield import autodiff as ad
from relfield.models import (AlignModel, FieldConfig, FieldModel,
                             align_forward, augmented_forward, field_forward,
                             load_checkpoint, save_checkpoint)
from relfield.autodiff import ContractViolation


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture(scope="module")
def small_config():
    return FieldConfig(embedding_dim=8, width=16, depth=4, skip_layer=2)


@pytest.fixture(scope="module")
def small_field(small_config):
    return FieldModel.init(small_config, seed=0)


@pytest.fixture(scope="module")
def small_align():
    return AlignModel.init(embedding_dim=8, seed=1, width=16)


class TestFieldForward:
    def test_fresh_model_outputs_are_sane(self, small_field):
        rng = np.random.default_rng(0)
        q = unit(rng.normal(size=(5, 8)))
        v = rng.normal(size=(5, 3))
        mu, var = field_forward(small_field, q, v)
        assert np.all(np.isfinite(mu.data))
        np.testing.assert_allclose(np.linalg.norm(mu.data, axis=1), 1.0, atol=1e-12)
        cfg = small_field.config
        assert np.all(var.data >= cfg.var_min) and np.all(var.data <= cfg.var_max)

    def test_bit_identical_repeat(self, small_field):
        rng = np.random.default_rng(1)
        q = unit(rng.normal(size=(3, 8)))
        v = rng.normal(size=(3, 3))
        a = field_forward(small_field, q, v)
        b = field_forward(small_field, q, v)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_non_unit_query_rejected(self, small_field):
        with pytest.raises(ContractViolation):
            field_forward(small_field, np.full((1, 8), 0.5), np.zeros((1, 3)))

    def test_non_finite_displacement_rejected(self, small_field):
        q = unit(np.ones((1, 8)))
        with pytest.raises(ContractViolation):
            field_forward(small_field, q, np.array([[np.nan, 0, 0]]))


class TestAlignForward:
    def test_zero_final_layer_gives_zero_rotation(self, small_align):
        rng = np.random.default_rng(2)
        q = unit(rng.normal(size=(4, 8)))
        qt = unit(rng.normal(size=(4, 8)))
        v = rng.normal(size=(4, 3))
        r = align_forward(small_align, q, v, qt)
        np.testing.assert_array_equal(r.data, np.zeros((4, 3)))

    def test_deterministic_repeat(self, small_align):
        # perturb the zero init so the output is non-trivial
        model = small_align.copy()
        rng = np.random.default_rng(3)
        model.weights[1].data += rng.normal(scale=0.1, size=model.weights[1].data.shape)
        q = unit(rng.normal(size=(2, 8)))
        qt = unit(rng.normal(size=(2, 8)))
        v = rng.normal(size=(2, 3))
        a = align_forward(model, q, v, qt)
        b = align_forward(model, q, v, qt)
        np.testing.assert_array_equal(a.data, b.data)


class TestAugmentedForward:
    def test_zero_align_equals_field_forward(self, small_field, small_align):
        rng = np.random.default_rng(4)
        q = unit(rng.normal(size=(6, 8)))
        qt = unit(rng.normal(size=(6, 8)))
        v = rng.normal(size=(6, 3))
        mu_a, var_a = augmented_forward(small_field, small_align, q, v, qt)
        mu_f, var_f = field_forward(small_field, q, v)
        np.testing.assert_array_equal(mu_a.data, mu_f.data)
        np.testing.assert_array_equal(var_a.data, var_f.data)

    def test_rotated_displacement_preserves_norm(self, small_field, small_align):
        model = small_align.copy()
        rng = np.random.default_rng(5)
        model.weights[1].data = rng.normal(scale=0.5, size=model.weights[1].data.shape)
        q = unit(rng.normal(size=(100, 8)))
        qt = unit(rng.normal(size=(100, 8)))
        v = rng.normal(size=(100, 3))
        r = align_forward(model, q, v, qt)
        v_rot = ad.rodrigues(None, r, ad.Tensor(v))
        np.testing.assert_allclose(np.linalg.norm(v_rot.data, axis=1),
                                   np.linalg.norm(v, axis=1), atol=1e-9)

    def test_gradients_reach_both_networks(self, small_field, small_align):
        field = small_field.copy()
        align = small_align.copy()
        rng = np.random.default_rng(6)
        align.weights[1].data = rng.normal(scale=0.3, size=align.weights[1].data.shape)
        q = unit(rng.normal(size=(4, 8)))
        qt = unit(rng.normal(size=(4, 8)))
        v = rng.normal(size=(4, 3))
        tape = ad.Tape()
        mu, var = augmented_forward(field, align, q, v, qt, tape)
        loss = ad.mean_all(tape, ad.cosine(tape, mu, ad.Tensor(qt)))
        tape.backward(loss)
        assert any(w.grad is not None and np.any(w.grad != 0)
                   for w in field.weights)
        assert any(w.grad is not None and np.any(w.grad != 0)
                   for w in align.weights)


class TestCheckpoint:
    def test_roundtrip_aligned(self, tmp_path, small_field, small_align):
        path = tmp_path / "ck.npz"
        save_checkpoint(path, small_field, small_align, meta={"note": "t"})
        field, align, header = load_checkpoint(path)
        assert align is not None
        assert header["variant"] == "aligned"
        rng = np.random.default_rng(7)
        q = unit(rng.normal(size=(3, 8)))
        v = rng.normal(size=(3, 3))
        a = field_forward(small_field, q, v)
        b = field_forward(field, q, v)
        np.testing.assert_array_equal(a[0].data, b[0].data)

    def test_base_checkpoint_has_no_align(self, tmp_path, small_field):
        path = tmp_path / "base.npz"
        save_checkpoint(path, small_field, None)
        field, align, header = load_checkpoint(path)
        assert align is None
        assert header["variant"] == "base"

    def test_embedding_dim_mismatch_rejected(self, tmp_path, small_field):
        path = tmp_path / "ck.npz"
        save_checkpoint(path, small_field, None)
        with pytest.raises(ValueError, match="embedding dim"):
            load_checkpoint(path, expect_embedding_dim=32)

import numpy as np
import pytest

from relfield import autodiff as ad
from oracles import numerical_gradient, max_rel_error


def tensor_of(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64))


class TestDense:
    def test_identity_weights(self):
        x = tensor_of([1.0, -2.0, 3.0])
        w = tensor_of(np.eye(3))
        b = tensor_of(np.zeros(3))
        out = ad.dense(None, x, w, b)
        np.testing.assert_allclose(out.data, x.data)

    def test_zero_weights_give_bias(self):
        x = tensor_of([5.0, 7.0])
        w = tensor_of(np.zeros((4, 2)))
        b = tensor_of([1.0, 2.0, 3.0, 4.0])
        out = ad.dense(None, x, w, b)
        np.testing.assert_allclose(out.data, b.data)

    def test_shape_mismatch_raises(self):
        x = tensor_of([1.0, 2.0, 3.0])
        w = tensor_of(np.zeros((4, 2)))
        b = tensor_of(np.zeros(4))
        with pytest.raises(ad.ContractViolation):
            ad.dense(None, x, w, b)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=2)
        w0 = rng.normal(size=(3, 2))
        b0 = rng.normal(size=3)
        r = rng.normal(size=3)  # fixed contraction to scalar

        def run(x_, w_, b_):
            tape = ad.Tape()
            x, w, b = tensor_of(x_), tensor_of(w_), tensor_of(b_)
            out = ad.dense(tape, x, w, b)
            loss = ad.mean_all(tape, ad.mul(tape, out, tensor_of(r)))
            return tape, loss, (x, w, b)

        tape, loss, (x, w, b) = run(x0, w0, b0)
        tape.backward(loss)
        for val, tens, name in [(x0, x, "x"), (w0, w, "w"), (b0, b, "b")]:
            def f(v, name=name):
                args = {"x": x0, "w": w0, "b": b0}
                args[name] = v
                _, l, _ = run(args["x"], args["w"], args["b"])
                return float(l.data)
            num = numerical_gradient(f, val.copy())
            assert max_rel_error(tens.grad, num) < 1e-6


class TestRelu:
    def test_values(self):
        out = ad.relu(None, tensor_of([-1.0, 0.0, 2.0]))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_gradient(self):
        tape = ad.Tape()
        x = tensor_of([-1.0, -2.0, -0.5])
        loss = ad.mean_all(tape, ad.relu(tape, x))
        tape.backward(loss)
        np.testing.assert_allclose(loss.data, 0.0)
        np.testing.assert_allclose(x.grad, np.zeros(3))

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=8)
        x0[np.abs(x0) < 1e-3] = 0.5

        def f(v):
            tape = ad.Tape()
            return float(ad.mean_all(tape, ad.relu(tape, tensor_of(v))).data)

        tape = ad.Tape()
        x = tensor_of(x0)
        loss = ad.mean_all(tape, ad.relu(tape, x))
        tape.backward(loss)
        assert max_rel_error(x.grad, numerical_gradient(f, x0.copy())) < 1e-6


class TestL2Normalize:
    def test_three_four(self):
        out = ad.l2_normalize(None, tensor_of([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8])

    def test_unit_vector_fixed_point_and_tangent_gradient(self):
        rng = np.random.default_rng(11)
        u = rng.normal(size=5)
        u /= np.linalg.norm(u)
        c = rng.normal(size=5)
        tape = ad.Tape()
        x = tensor_of(u)
        y = ad.l2_normalize(tape, x)
        np.testing.assert_allclose(y.data, u, atol=1e-15)
        loss = ad.mean_all(tape, ad.mul(tape, y, tensor_of(c * 5)))
        tape.backward(loss)
        assert abs(np.dot(x.grad, u)) < 1e-12

    def test_degenerate_raises(self):
        with pytest.raises(ad.DegenerateVectorError):
            ad.l2_normalize(None, tensor_of([0.0, 0.0]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=16)
        r = rng.normal(size=16)

        def f(v):
            tape = ad.Tape()
            y = ad.l2_normalize(tape, tensor_of(v))
            return float(ad.mean_all(tape, ad.mul(tape, y, tensor_of(r))).data)

        tape = ad.Tape()
        x = tensor_of(x0)
        y = ad.l2_normalize(tape, x)
        loss = ad.mean_all(tape, ad.mul(tape, y, tensor_of(r)))
        tape.backward(loss)
        assert max_rel_error(x.grad, numerical_gradient(f, x0.copy())) < 1e-6


class TestCosine:
    def test_self_similarity(self):
        rng = np.random.default_rng(2)
        u = rng.normal(size=6)
        u /= np.linalg.norm(u)
        out = ad.cosine(None, tensor_of(u), tensor_of(u.copy()))
        np.testing.assert_allclose(out.data, 1.0, atol=1e-12)
        out = ad.cosine(None, tensor_of(u), tensor_of(-u))
        np.testing.assert_allclose(out.data, -1.0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        a0 = rng.normal(size=8)
        b0 = rng.normal(size=8)

        def cos_of(a_, b_):
            tape = ad.Tape()
            a, b = tensor_of(a_), tensor_of(b_)
            out = ad.cosine(tape, a, b)
            return tape, out, a, b

        tape, out, a, b = cos_of(a0, b0)
        tape.backward(out)
        na = numerical_gradient(lambda v: float(cos_of(v, b0)[1].data), a0.copy())
        nb = numerical_gradient(lambda v: float(cos_of(a0, v)[1].data), b0.copy())
        assert max_rel_error(a.grad, na) < 1e-6
        assert max_rel_error(b.grad, nb) < 1e-6


class TestRodrigues:
    def test_zero_rotation_is_identity(self):
        v = tensor_of([1.2, -0.7, 0.3])
        out = ad.rodrigues(None, tensor_of([0.0, 0.0, 0.0]), v)
        np.testing.assert_allclose(out.data, v.data, atol=1e-15)

    def test_quarter_turn_about_z(self):
        r = tensor_of([0.0, 0.0, np.pi / 2])
        v = tensor_of([1.0, 0.0, 0.0])
        out = ad.rodrigues(None, r, v)
        np.testing.assert_allclose(out.data, [0.0, 1.0, 0.0], atol=1e-12)

    def test_norm_preservation_1000_random(self):
        rng = np.random.default_rng(17)
        r = rng.normal(size=(1000, 3)) * 2.0
        v = rng.normal(size=(1000, 3)) * 3.0
        out = ad.rodrigues(None, tensor_of(r), tensor_of(v))
        err = np.abs(np.linalg.norm(out.data, axis=1) - np.linalg.norm(v, axis=1))
        assert np.max(err) < 1e-10

    def test_inverse_composition(self):
        rng = np.random.default_rng(23)
        r = rng.normal(size=(200, 3))
        v = rng.normal(size=(200, 3))
        fwd = ad.rodrigues(None, tensor_of(r), tensor_of(v))
        back = ad.rodrigues(None, tensor_of(-r), fwd)
        assert np.max(np.abs(back.data - v)) < 1e-9

    def test_series_branch_continuity(self):
        # compare the series branch against the exact formula at the switch point
        rng = np.random.default_rng(31)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        v = rng.normal(size=3)
        theta = ad.RODRIGUES_SMALL
        below = ad.rodrigues(None, tensor_of(axis * theta * 0.999999), tensor_of(v))
        r = axis * theta * 0.999999
        t = np.linalg.norm(r)
        exact = (v * np.cos(t) + np.cross(r / t, v) * np.sin(t)
                 + (r / t) * np.dot(r / t, v) * (1 - np.cos(t)))
        assert np.max(np.abs(below.data - exact)) < 1e-9

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(41)
        for scale_r in (1.0, 1e-7):  # generic and series-branch regime
            r0 = rng.normal(size=3) * scale_r
            v0 = rng.normal(size=3)
            w = rng.normal(size=3)

            def run(r_, v_):
                tape = ad.Tape()
                r, v = tensor_of(r_), tensor_of(v_)
                out = ad.rodrigues(tape, r, v)
                loss = ad.mean_all(tape, ad.mul(tape, out, tensor_of(w)))
                return tape, loss, r, v

            tape, loss, r, v = run(r0, v0)
            tape.backward(loss)
            h = 1e-5 if scale_r == 1.0 else 1e-9
            nr = numerical_gradient(lambda x: float(run(x, v0)[1].data), r0.copy(), h=h)
            nv = numerical_gradient(lambda x: float(run(r0, x)[1].data), v0.copy())
            assert max_rel_error(r.grad, nr) < 1e-5
            assert max_rel_error(v.grad, nv) < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = tensor_of([1.0, 2.0])
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0, 2.0])

    def test_constant_gradient_descends(self):
        p = tensor_of([0.0])
        opt = ad.Adam([p], lr=0.01)
        for _ in range(100):
            p.grad = np.array([3.0])
            opt.step()
        assert p.data[0] < -0.5  # moved opposite to sign(g)

    def test_single_step_on_quadratic_decreases(self):
        p = tensor_of([1.0])
        opt = ad.Adam([p], lr=0.1)
        before = float(p.data[0] ** 2)
        p.grad = np.array([2.0 * p.data[0]])
        opt.step()
        after = float(p.data[0] ** 2)
        assert after < before

    def test_nonfinite_gradient_raises(self):
        p = tensor_of([1.0])
        opt = ad.Adam([p])
        p.grad = np.array([np.nan])
        with pytest.raises(ad.TrainingDivergence):
            opt.step()


class TestPrimitiveGradientSweep:
    """Every primitive against central differences on 100 random instances."""

    def test_sweep(self):
        rng = np.random.default_rng(101)
        worst = 0.0
        for trial in range(100):
            kind = trial % 5
            if kind == 0:   # dense + relu chain
                x0 = rng.normal(size=4)
                x0[np.abs(x0) < 1e-3] = 0.3
                w0 = rng.normal(size=(3, 4))
                b0 = rng.normal(size=3)
                r = rng.normal(size=3)

                def f(v):
                    tape = ad.Tape()
                    out = ad.relu(tape, ad.dense(tape, tensor_of(v), tensor_of(w0), tensor_of(b0)))
                    return float(ad.mean_all(tape, ad.mul(tape, out, tensor_of(r))).data)

                tape = ad.Tape()
                x = tensor_of(x0)
                out = ad.relu(tape, ad.dense(tape, x, tensor_of(w0), tensor_of(b0)))
                loss = ad.mean_all(tape, ad.mul(tape, out, tensor_of(r)))
                tape.backward(loss)
                pre = x0 @ w0.T + b0
                if np.any(np.abs(pre) < 1e-3):
                    continue  # skip kink neighborhoods
                worst = max(worst, max_rel_error(x.grad, numerical_gradient(f, x0.copy())))
            elif kind == 1:  # exp/log/clamp chain
                x0 = rng.uniform(0.2, 2.0, size=5)

                def f(v):
                    tape = ad.Tape()
                    y = ad.log(tape, ad.exp(tape, ad.clamp(tape, tensor_of(v), 0.1, 3.0)))
                    return float(ad.mean_all(tape, y).data)

                tape = ad.Tape()
                x = tensor_of(x0)
                y = ad.log(tape, ad.exp(tape, ad.clamp(tape, x, 0.1, 3.0)))
                loss = ad.mean_all(tape, y)
                tape.backward(loss)
                worst = max(worst, max_rel_error(x.grad, numerical_gradient(f, x0.copy())))
            elif kind == 2:  # cosine
                a0, b0 = rng.normal(size=6), rng.normal(size=6)

                def f(v):
                    return float(ad.cosine(None, tensor_of(v), tensor_of(b0)).data)

                tape = ad.Tape()
                a = tensor_of(a0)
                out = ad.cosine(tape, a, tensor_of(b0))
                tape.backward(out)
                worst = max(worst, max_rel_error(a.grad, numerical_gradient(f, a0.copy())))
            elif kind == 3:  # l2_normalize
                x0 = rng.normal(size=7)
                r = rng.normal(size=7)

                def f(v):
                    tape = ad.Tape()
                    y = ad.l2_normalize(tape, tensor_of(v))
                    return float(ad.mean_all(tape, ad.mul(tape, y, tensor_of(r))).data)

                tape = ad.Tape()
                x = tensor_of(x0)
                y = ad.l2_normalize(tape, x)
                loss = ad.mean_all(tape, ad.mul(tape, y, tensor_of(r)))
                tape.backward(loss)
                worst = max(worst, max_rel_error(x.grad, numerical_gradient(f, x0.copy())))
            else:           # rodrigues
                r0 = rng.normal(size=3)
                v0 = rng.normal(size=3)
                w = rng.normal(size=3)

                def f(x):
                    tape = ad.Tape()
                    out = ad.rodrigues(tape, tensor_of(x), tensor_of(v0))
                    return float(ad.mean_all(tape, ad.mul(tape, out, tensor_of(w))).data)

                tape = ad.Tape()
                rt = tensor_of(r0)
                out = ad.rodrigues(tape, rt, tensor_of(v0))
                loss = ad.mean_all(tape, ad.mul(tape, out, tensor_of(w)))
                tape.backward(loss)
                worst = max(worst, max_rel_error(rt.grad, numerical_gradient(f, r0.copy())))
        assert worst < 1e-5

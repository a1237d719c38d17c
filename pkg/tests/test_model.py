import math

import numpy as np
import pytest

from fdcheck import fd_gradient, max_rel_err, pack_grads, random_params
from ssda.model import (
    Arch,
    CheckpointError,
    Gradients,
    ModelParams,
    PARAMS_MAGIC,
    ShapeError,
    TrainingFault,
    backward,
    ema_update,
    forward,
    forward_batch,
    init_params,
    load_params,
    log_softmax,
    save_params,
    sgd_step,
    softmax,
)


def zero_params(input_dim, hidden, num_classes):
    arch = Arch(input_dim, hidden, num_classes)
    return ModelParams(arch, [(np.zeros((fo, fi)), np.zeros(fo)) for fi, fo in arch.layer_dims])


class TestForward:
    def test_zero_params_give_uniform_probs(self):
        params = zero_params(6, (4,), 4)
        pred = forward(params, np.arange(6.0))
        np.testing.assert_allclose(pred.probs, [0.25, 0.25, 0.25, 0.25], atol=1e-12)

    def test_identity_single_layer_equal_logits(self):
        arch = Arch(2, (), 2)
        params = ModelParams(arch, [(np.eye(2), np.zeros(2))])
        pred = forward(params, np.zeros(2))
        np.testing.assert_allclose(pred.probs, [0.5, 0.5], atol=1e-12)

    def test_matches_hand_rolled_oracle(self):
        # independent re-computation: plain matmuls + naive softmax
        for seed in range(20):
            rng = np.random.default_rng(seed)
            arch = Arch(5, (6, 4), 3)
            params = random_params(arch, rng)
            x = rng.standard_normal(5)
            act = x
            for W, b in params.layers[:-1]:
                act = np.tanh(W @ act + b)
            W, b = params.layers[-1]
            logits = W @ act + b
            expected = np.exp(logits) / np.exp(logits).sum()
            pred = forward(params, x)
            np.testing.assert_allclose(pred.logits, logits, atol=1e-9)
            np.testing.assert_allclose(pred.probs, expected, atol=1e-9)

    def test_probs_invariants(self):
        rng = np.random.default_rng(3)
        params = random_params(Arch(4, (5,), 5), rng, scale=2.0)
        cache = forward_batch(params, rng.standard_normal((16, 4)))
        assert cache.probs.min() >= 0 and cache.probs.max() <= 1
        np.testing.assert_allclose(cache.probs.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(cache.probs, softmax(cache.logits))

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        params = random_params(Arch(8, (6,), 3), rng)
        x = rng.standard_normal(8)
        a = forward(params, x)
        b = forward(params, x)
        np.testing.assert_array_equal(a.probs, b.probs)
        np.testing.assert_array_equal(a.logits, b.logits)

    def test_dimension_mismatch_rejected(self):
        params = zero_params(4, (3,), 2)
        with pytest.raises(ShapeError):
            forward(params, np.zeros(5))

    def test_non_finite_input_rejected(self):
        params = zero_params(3, (), 2)
        with pytest.raises(ValueError):
            forward(params, np.array([1.0, np.nan, 0.0]))

    def test_softmax_stable_for_huge_logits(self):
        logits = np.array([[1e4, 0.0, -1e4]])
        probs = softmax(logits)
        assert np.isfinite(probs).all()
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-12)
        assert np.isfinite(log_softmax(logits)).all()


class TestBackward:
    def test_zero_loss_gradient_gives_zero_grads(self):
        rng = np.random.default_rng(0)
        params = random_params(Arch(4, (5,), 3), rng)
        cache = forward_batch(params, rng.standard_normal((6, 4)))
        grads = backward(params, cache, np.zeros((6, 3)))
        for gW, gb in grads.layers:
            assert not gW.any() and not gb.any()

    def test_single_layer_closed_form(self):
        # one linear layer: dW = g^T x, db = sum g
        rng = np.random.default_rng(1)
        arch = Arch(4, (), 3)
        params = random_params(arch, rng)
        X = rng.standard_normal((2, 4))
        cache = forward_batch(params, X)
        y = np.array([1, 2])
        seed_grad = cache.probs.copy()
        seed_grad[np.arange(2), y] -= 1.0
        grads = backward(params, cache, seed_grad)
        np.testing.assert_allclose(grads.layers[0][0], seed_grad.T @ X, atol=1e-12)
        np.testing.assert_allclose(grads.layers[0][1], seed_grad.sum(axis=0), atol=1e-12)

    def test_two_hidden_layers_match_finite_differences(self):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            arch = Arch(5, (6, 4), 3)
            params = random_params(arch, rng)
            X = rng.standard_normal((3, 5))
            y = rng.integers(0, 3, size=3)

            def loss(p):
                cache = forward_batch(p, X)
                return float(-log_softmax(cache.logits)[np.arange(3), y].mean())

            cache = forward_batch(params, X)
            seed_grad = cache.probs.copy()
            seed_grad[np.arange(3), y] -= 1.0
            analytic = pack_grads(backward(params, cache, seed_grad / 3))
            numeric = fd_gradient(loss, params)
            assert max_rel_err(analytic, numeric) < 1e-4

    def test_shape_mismatch_errors(self):
        rng = np.random.default_rng(2)
        params = random_params(Arch(4, (5,), 3), rng)
        cache = forward_batch(params, rng.standard_normal((2, 4)))
        with pytest.raises(ShapeError):
            backward(params, cache, np.zeros((2, 4)))  # wrong C
        other = random_params(Arch(4, (6,), 3), rng)
        with pytest.raises(ShapeError):
            backward(other, cache, np.zeros((2, 3)))  # cache from another net


class TestSgdStep:
    def test_zero_grads_leave_params_unchanged(self):
        params = zero_params(3, (2,), 2)
        new = sgd_step(params, Gradients.zeros(params), lr=0.1)
        for (W, b), (nW, nb) in zip(params.layers, new.layers):
            np.testing.assert_array_equal(W, nW)
            np.testing.assert_array_equal(b, nb)

    def test_single_weight_update(self):
        arch = Arch(1, (), 1)
        params = ModelParams(arch, [(np.array([[1.0]]), np.zeros(1))])
        grads = Gradients([(np.array([[0.5]]), np.zeros(1))])
        new = sgd_step(params, grads, lr=0.1)
        assert new.layers[0][0][0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(5)
        params = random_params(Arch(3, (4,), 2), rng)
        before = [W.copy() for W, _ in params.layers]
        grads = Gradients([(np.ones_like(W), np.ones_like(b)) for W, b in params.layers])
        sgd_step(params, grads, lr=0.5)
        for (W, _), old in zip(params.layers, before):
            np.testing.assert_array_equal(W, old)

    def test_descends_convex_quadratic(self):
        # surrogate loss 0.5 * ||theta - target||^2 has gradient theta - target
        rng = np.random.default_rng(7)
        arch = Arch(2, (3,), 2)
        params = random_params(arch, rng)
        target = random_params(arch, rng)

        def loss(p):
            return 0.5 * sum(
                float(((W - tW) ** 2).sum() + ((b - tb) ** 2).sum())
                for (W, b), (tW, tb) in zip(p.layers, target.layers)
            )

        losses = [loss(params)]
        for _ in range(3):
            grads = Gradients([(W - tW, b - tb)
                               for (W, b), (tW, tb) in zip(params.layers, target.layers)])
            params = sgd_step(params, grads, lr=0.2)
            losses.append(loss(params))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_non_finite_gradient_raises_with_layer(self):
        params = zero_params(2, (2,), 2)
        grads = Gradients.zeros(params)
        grads.layers[1][0][0, 0] = np.inf
        with pytest.raises(TrainingFault) as err:
            sgd_step(params, grads, lr=0.1)
        assert err.value.layer == 1

    def test_non_positive_lr_rejected(self):
        params = zero_params(2, (), 2)
        with pytest.raises(ValueError):
            sgd_step(params, Gradients.zeros(params), lr=0.0)


class TestEmaUpdate:
    def test_sigma_one_keeps_teacher(self):
        rng = np.random.default_rng(11)
        teacher = random_params(Arch(3, (4,), 2), rng)
        student = random_params(Arch(3, (4,), 2), rng)
        new = ema_update(teacher, student, sigma=1.0)
        for (tW, tb), (nW, nb) in zip(teacher.layers, new.layers):
            np.testing.assert_array_equal(tW, nW)
            np.testing.assert_array_equal(tb, nb)

    def test_single_value_blend(self):
        arch = Arch(1, (), 1)
        teacher = ModelParams(arch, [(np.array([[2.0]]), np.zeros(1))])
        student = ModelParams(arch, [(np.array([[1.0]]), np.zeros(1))])
        new = ema_update(teacher, student, sigma=0.99)
        assert new.layers[0][0][0, 0] == pytest.approx(1.99, abs=1e-12)

    def test_closed_form_recurrence(self):
        # |t_n - s| = sigma^n |t_0 - s| for a fixed student
        rng = np.random.default_rng(13)
        arch = Arch(3, (4,), 2)
        for sigma in (0.0, 0.5, 0.99, 1.0):
            teacher = random_params(arch, rng)
            student = random_params(arch, rng)
            initial_gap = [np.abs(tW - sW) for (tW, _), (sW, _) in zip(teacher.layers, student.layers)]
            current = teacher
            for n in range(1, 12):
                current = ema_update(current, student, sigma)
                for (cW, _), (sW, _), gap in zip(current.layers, student.layers, initial_gap):
                    np.testing.assert_allclose(np.abs(cW - sW), sigma**n * gap, atol=1e-9)

    def test_convexity_and_fixed_point(self):
        rng = np.random.default_rng(17)
        arch = Arch(4, (3,), 3)
        for trial in range(20):
            teacher = random_params(arch, rng)
            student = random_params(arch, rng)
            sigma = float(rng.uniform(0, 1))
            new = ema_update(teacher, student, sigma)
            for (nW, nb), (tW, tb), (sW, sb) in zip(new.layers, teacher.layers, student.layers):
                assert np.all(nW >= np.minimum(tW, sW) - 1e-12)
                assert np.all(nW <= np.maximum(tW, sW) + 1e-12)
                assert np.all(nb >= np.minimum(tb, sb) - 1e-12)
                assert np.all(nb <= np.maximum(tb, sb) + 1e-12)
        same = random_params(arch, rng)
        new = ema_update(same, same.copy(), sigma=0.3)
        for (nW, nb), (W, b) in zip(new.layers, same.layers):
            np.testing.assert_array_equal(nW, W)
            np.testing.assert_array_equal(nb, b)

    def test_sigma_out_of_range_rejected(self):
        params = zero_params(2, (), 2)
        with pytest.raises(ValueError):
            ema_update(params, params.copy(), sigma=1.5)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(19)
        a = random_params(Arch(3, (4,), 2), rng)
        b = random_params(Arch(3, (5,), 2), rng)
        with pytest.raises(ShapeError):
            ema_update(a, b, sigma=0.5)


class TestInit:
    def test_seeded_and_bounded(self):
        arch = Arch(10, (8, 4), 3)
        a = init_params(arch, seed=42)
        b = init_params(arch, seed=42)
        c = init_params(arch, seed=43)
        for (aW, ab_), (bW, bb) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(aW, bW)
            np.testing.assert_array_equal(ab_, bb)
        assert any(not np.array_equal(aW, cW) for (aW, _), (cW, _) in zip(a.layers, c.layers))
        for (W, b_), (fan_in, fan_out) in zip(a.layers, arch.layer_dims):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(W).max() <= bound
            assert not b_.any()

    def test_validate_catches_bad_dims(self):
        arch = Arch(3, (4,), 2)
        params = init_params(arch, 0)
        params.layers[0] = (np.zeros((5, 3)), np.zeros(5))
        with pytest.raises(ShapeError):
            params.validate()
        with pytest.raises(ValueError):
            Arch(0, (4,), 2)


class TestParamsIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(23)
        params = random_params(Arch(5, (4, 3), 2), rng)
        path = tmp_path / "model.params"
        save_params(params, path, metadata={"stage": "UDA", "iteration": 7, "seed": 1})
        loaded, meta = load_params(path)
        assert loaded.arch == params.arch
        for (W, b), (lW, lb) in zip(params.layers, loaded.layers):
            np.testing.assert_array_equal(W, lW)
            np.testing.assert_array_equal(b, lb)
        assert meta["stage"] == "UDA" and meta["iteration"] == 7

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.params"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(29)
        params = random_params(Arch(4, (3,), 2), rng)
        path = tmp_path / "model.params"
        save_params(params, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 16])
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        rng = np.random.default_rng(31)
        params = random_params(Arch(4, (3,), 2), rng)
        path = tmp_path / "model.params"
        save_params(params, path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_format_is_little_endian_f64(self, tmp_path):
        arch = Arch(1, (), 1)
        params = ModelParams(arch, [(np.array([[3.5]]), np.array([-1.25]))])
        path = tmp_path / "tiny.params"
        save_params(params, path)
        raw = path.read_bytes()
        assert raw[: len(PARAMS_MAGIC)] == PARAMS_MAGIC
        header = raw[len(PARAMS_MAGIC) : len(PARAMS_MAGIC) + 12]
        assert header == (1).to_bytes(4, "little") + (0).to_bytes(4, "little") + (1).to_bytes(4, "little")
        floats = np.frombuffer(raw[len(PARAMS_MAGIC) + 12 :], dtype="<f8")
        np.testing.assert_array_equal(floats, [3.5, -1.25])

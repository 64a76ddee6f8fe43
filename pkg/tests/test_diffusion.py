import numpy as np
import pytest

from dpembed.diffusion import (
    DiffusionSchedule,
    ImageTensor,
    ddim_step,
    forward_noise,
    make_schedule,
    predict_x0,
)


def image(values, h=1, w=None):
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    w = values.size // h if w is None else w
    return ImageTensor(pixels=values, height=h, width=w)


class TestSchedule:
    def test_fifty_step_first_alpha(self):
        sched = make_schedule(50)
        assert sched.alpha[0] == 1.0 - 1e-4 * (1000 / 50)

    def test_strictly_decreasing_any_steps(self):
        for steps in (2, 7, 50, 400):
            sched = make_schedule(steps)
            assert sched.alpha_bar(steps) < sched.alpha_bar(1)
            assert np.all(np.diff(sched.alpha) < 0)

    def test_minimal_schedule(self):
        sched = make_schedule(2)
        assert sched.steps == 2 and sched.alpha.size == 2

    def test_too_few_steps_rejected(self):
        with pytest.raises(ValueError):
            make_schedule(1)

    def test_alpha_zero_is_one(self):
        assert make_schedule(10).alpha_bar(0) == 1.0

    def test_invalid_alpha_rejected(self):
        with pytest.raises(ValueError):
            DiffusionSchedule(steps=2, alpha=np.array([0.5, 0.7]))
        with pytest.raises(ValueError):
            DiffusionSchedule(steps=2, alpha=np.array([1.2, 0.7]))


class TestForwardNoise:
    def test_high_alpha_keeps_signal(self):
        sched = make_schedule(1000)  # alpha_1 very close to 1
        x0 = image([0.5, -0.25, 0.75], h=1, w=3)
        out = forward_noise(x0, 1, np.zeros(3), sched)
        assert np.allclose(out.pixels, x0.pixels, atol=1e-4)

    def test_round_trip_with_true_noise(self):
        sched = make_schedule(40)
        rng = np.random.default_rng(0)
        x0 = image(rng.uniform(-1, 1, 12), h=3, w=4)
        for t in (1, 17, 40):
            eps = rng.standard_normal(12)
            x_t = forward_noise(x0, t, eps, sched)
            back = predict_x0(x_t, eps, t, sched)
            assert np.allclose(back.pixels, x0.pixels, atol=1e-12, rtol=0)

    def test_pure_noise_direction(self):
        sched = make_schedule(20)
        e1 = np.eye(4)[0]
        out = forward_noise(image(np.zeros(4), h=2, w=2), 9, e1, sched)
        expect = np.sqrt(1.0 - sched.alpha_bar(9)) * e1
        assert np.array_equal(out.pixels, expect)

    def test_step_bounds(self):
        sched = make_schedule(10)
        x0 = image([0.0])
        for t in (0, 11):
            with pytest.raises(ValueError):
                forward_noise(x0, t, np.zeros(1), sched)


class TestPredictX0:
    def test_zero_eps_rescales(self):
        sched = make_schedule(25)
        x_t = image([0.4, -0.8], h=1, w=2)
        out = predict_x0(x_t, np.zeros(2), 10, sched)
        assert np.array_equal(out.pixels, x_t.pixels / np.sqrt(sched.alpha_bar(10)))

    def test_linear_in_x(self):
        sched = make_schedule(25)
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 6))
        eps = np.zeros(6)
        left = predict_x0(image(a + b, h=2, w=3), eps, 7, sched).pixels
        right = (
            predict_x0(image(a, h=2, w=3), eps, 7, sched).pixels
            + predict_x0(image(b, h=2, w=3), eps, 7, sched).pixels
        )
        assert np.allclose(left, right, atol=1e-12)


class TestDdimStep:
    def test_final_step_returns_clean_estimate(self):
        sched = make_schedule(30)
        rng = np.random.default_rng(2)
        x1 = image(rng.standard_normal(9), h=3, w=3)
        eps_hat = rng.standard_normal(9)
        out = ddim_step(x1, eps_hat, 1, sched)
        expect = predict_x0(x1, eps_hat, 1, sched)
        assert np.array_equal(out.pixels, expect.pixels)

    def test_consistency_with_forward_trajectory(self):
        sched = make_schedule(35)
        rng = np.random.default_rng(3)
        x0 = image(rng.uniform(-1, 1, 8), h=2, w=4)
        eps = rng.standard_normal(8)
        for t in (2, 20, 35):
            x_t = forward_noise(x0, t, eps, sched)
            stepped = ddim_step(x_t, eps, t, sched)
            expect = forward_noise(x0, t - 1, eps, sched)
            assert np.allclose(stepped.pixels, expect.pixels, atol=1e-12, rtol=0)


class TestImageTensor:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ImageTensor(pixels=np.zeros(5), height=2, width=3)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            ImageTensor(pixels=np.array([np.inf]), height=1, width=1)

    def test_grid_view(self):
        img = image([1.0, 2.0, 3.0, 4.0], h=2, w=2)
        assert np.array_equal(img.grid(), [[1.0, 2.0], [3.0, 4.0]])

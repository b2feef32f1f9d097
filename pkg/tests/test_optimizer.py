import math

import numpy as np
import pytest

from dpadapt import accountant, optimizer
from dpadapt.models import Dataset, QuadraticModel, bernoulli_means
from dpadapt.optimizer import (GD_EMP, GD_POP, RMSPROP_EMP, RMSPROP_POP,
                               ADAM_EMP, ADAM_POP, AveragingKind,
                               OptimizerConfig, OptimizerState,
                               ParameterInfeasibleError, adam_eta_bracket,
                               adam_kind, averaging, gd_kind, noisy_gradient,
                               rmsprop_kind, run, set_params_from_theory, step,
                               with_seed)
from dpadapt.streams import stream


def brute_force_sums(kind: AveragingKind, grads: list[np.ndarray]):
    """Direct evaluation of the explicit weighted sums defining m_t, v_t."""
    t = len(grads)
    if kind.tag == "GD":
        return grads[-1], np.ones_like(grads[-1])
    v = sum((1 - kind.beta2) * kind.beta2 ** (t - j) * grads[j - 1] ** 2
            for j in range(1, t + 1))
    if kind.tag == "RMSPROP":
        return grads[-1], v
    m = sum((1 - kind.beta1) * kind.beta1 ** (t - j) * grads[j - 1]
            for j in range(1, t + 1))
    return m, v


def recursion_trace(kind: AveragingKind, grads: list[np.ndarray]):
    m = np.zeros_like(grads[0])
    v = np.zeros_like(grads[0])
    out = []
    for g in grads:
        m, v = averaging(kind, m, v, g)
        out.append((m.copy(), v.copy()))
    return out


def quadratic_setup(p=8, n=60, seed=17):
    model = QuadraticModel(bernoulli_means(p, seed))
    data = Dataset(model.sample(n, stream(seed, "data"))[0])
    return model, data


class TestNoisyGradient:
    def test_zero_sigma_identity(self):
        g = np.array([1.0, -2.0, 3.0])
        assert noisy_gradient(g, 0.0, stream(0, "noise", 1)) is g

    def test_gaussian_moments(self):
        g = np.array([0.5, -1.5])
        draws = 100_000
        rng = stream(42, "noise-oracle")
        samples = np.stack([noisy_gradient(g, 0.7, rng) for _ in range(draws)])
        mean_tol = 4 * 0.7 / math.sqrt(draws)
        assert np.all(np.abs(samples.mean(axis=0) - g) < mean_tol)
        assert np.allclose(samples.var(axis=0), 0.7 ** 2, rtol=0.05)

    def test_counter_determinism(self):
        g = np.zeros(5)
        a = noisy_gradient(g, 1.0, stream(3, "noise", 10))
        b = noisy_gradient(g, 1.0, stream(3, "noise", 10))
        assert np.array_equal(a, b)
        c = noisy_gradient(g, 1.0, stream(3, "noise", 11))
        assert not np.array_equal(a, c)


class TestAveraging:
    def test_adam_base_case(self):
        g1 = np.array([2.0, -1.0])
        m, v = averaging(adam_kind(0.9, 0.99), np.zeros(2), np.zeros(2), g1)
        assert np.allclose(m, 0.1 * g1)
        assert np.allclose(v, 0.01 * g1 ** 2)

    def test_constant_stream_geometric_form(self):
        kind = adam_kind(0.8, 0.95)
        c = np.array([1.5, -0.5])
        m = v = np.zeros(2)
        for t in range(1, 31):
            m, v = averaging(kind, m, v, c)
            assert np.allclose(m, (1 - 0.8 ** t) * c, atol=1e-12)
            assert np.allclose(v, (1 - 0.95 ** t) * c ** 2, atol=1e-12)

    @pytest.mark.parametrize("kind", [gd_kind(), rmsprop_kind(0.9),
                                      adam_kind(0.85, 0.97)])
    def test_recursion_equals_explicit_sums(self, kind):
        rng = stream(5, "table", kind.tag)
        grads = [rng.standard_normal(6) for _ in range(50)]
        trace = recursion_trace(kind, grads)
        for t in (1, 7, 25, 50):
            m_ref, v_ref = brute_force_sums(kind, grads[:t])
            m_rec, v_rec = trace[t - 1]
            assert np.abs(m_rec - m_ref).max() <= 1e-10
            assert np.abs(v_rec - v_ref).max() <= 1e-10

    def test_tag_validation(self):
        with pytest.raises(ValueError):
            AveragingKind("NADAM")
        with pytest.raises(ValueError):
            AveragingKind("RMSPROP", beta2=1.0)
        with pytest.raises(ValueError):
            AveragingKind("ADAM", beta1=1.0, beta2=0.9)
        # beta1 = 0 is the RMSprop-collapse case and must be accepted
        AveragingKind("ADAM", beta1=0.0, beta2=0.9)


class TestStep:
    def test_plain_gd_step(self):
        cfg = OptimizerConfig(eta=0.1, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                              steps=5, kind=gd_kind())
        state = OptimizerState(w=np.zeros(2), m=np.zeros(2), v=np.zeros(2))
        out = step(state, cfg, np.array([1.0, 0.0]))
        assert np.allclose(out.w, [-0.1, 0.0])
        assert out.t == 1

    def test_clamp_saturation_denominator(self):
        lam, nu = 0.25, 0.01
        cfg = OptimizerConfig(eta=1.0, nu=nu, lambda_clamp=lam, sigma=0.0,
                              steps=5, kind=rmsprop_kind(0.5))
        # choose g so v_raw = (1-b2) g^2 = 4 lam everywhere
        g = np.full(3, math.sqrt(4 * lam / 0.5))
        state = OptimizerState(w=np.zeros(3), m=np.zeros(3), v=np.zeros(3))
        out = step(state, cfg, g)
        assert np.allclose(out.w, -g / (math.sqrt(lam) + nu))
        assert np.all(out.v > lam)  # raw accumulator stored unclamped

    def test_adam_hand_computed_step(self):
        cfg = OptimizerConfig(eta=0.1, nu=0.01, lambda_clamp=100.0, sigma=0.0,
                              steps=1, kind=adam_kind(0.9, 0.99))
        state = OptimizerState(w=np.zeros(2), m=np.zeros(2), v=np.zeros(2))
        out = step(state, cfg, np.array([2.0, -2.0]))
        expected = 0.1 * (0.1 * np.array([2.0, -2.0])) / (math.sqrt(0.01 * 4) + 0.01)
        assert np.allclose(out.w, -expected, atol=1e-15)
        assert out.w[0] == pytest.approx(-0.0952380952, abs=1e-9)

    def test_step_count_guard(self):
        cfg = OptimizerConfig(eta=0.1, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                              steps=1, kind=gd_kind())
        state = OptimizerState(w=np.zeros(1), m=np.zeros(1), v=np.zeros(1), t=1)
        with pytest.raises(ValueError):
            step(state, cfg, np.zeros(1))

    def test_config_validation(self):
        with pytest.raises(ValueError):  # GD with nonunit denominator
            OptimizerConfig(eta=0.1, nu=0.1, lambda_clamp=1.0, sigma=0.0,
                            steps=1, kind=gd_kind())
        with pytest.raises(ValueError):  # adaptive without nu
            OptimizerConfig(eta=0.1, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                            steps=1, kind=rmsprop_kind(0.9))
        with pytest.raises(ValueError):  # mini-batch without clip
            OptimizerConfig(eta=0.1, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                            steps=1, kind=gd_kind(), batch_size=4)


class TestRun:
    def test_noiseless_gd_exact_quadratic_dynamics(self):
        model, data = quadratic_setup()
        cfg = OptimizerConfig(eta=1.0, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                              steps=60, kind=gd_kind(), seed=1)
        rec = run(model, data, cfg)
        assert rec.emp_grad_sq[-1] <= 1e-20  # norm <= 1e-10
        # eta = 1/2: gradient halves (or better) every step
        cfg2 = OptimizerConfig(eta=0.5, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                               steps=20, kind=gd_kind(), seed=1)
        rec2 = run(model, data, cfg2)
        norms = np.sqrt(rec2.emp_grad_sq)
        assert np.all(norms[1:] <= 0.5 * norms[:-1] + 1e-12)

    def test_beta1_zero_adam_equals_rmsprop(self):
        model, data = quadratic_setup(seed=23)
        base = dict(eta=0.05, nu=0.01, lambda_clamp=5.0, sigma=0.4, steps=40,
                    seed=11)
        rec_r = run(model, data, OptimizerConfig(kind=rmsprop_kind(0.9), **base))
        rec_a = run(model, data, OptimizerConfig(kind=adam_kind(0.0, 0.9), **base))
        assert np.abs(rec_r.final_w - rec_a.final_w).max() <= 1e-12
        assert np.abs(rec_r.emp_grad_sq - rec_a.emp_grad_sq).max() <= 1e-12

    def test_noise_deviation_concentrates_at_sigma_sqrt_p(self):
        p, sigma = 64, 0.5
        model = QuadraticModel(bernoulli_means(p, 31))
        data = Dataset(model.sample(200, stream(31, "d"))[0])
        cfg = OptimizerConfig(eta=0.3, nu=0.0, lambda_clamp=1.0, sigma=sigma,
                              steps=100, kind=gd_kind(), seed=2)
        rec = run(model, data, cfg)
        ratios = rec.noise_dev / (sigma * math.sqrt(p))
        assert abs(ratios.mean() - 1.0) < 0.2
        assert np.mean(np.abs(ratios - 1.0) < 0.2) > 0.9

    def test_trajectory_is_deterministic(self):
        model, data = quadratic_setup(seed=29)
        cfg = OptimizerConfig(eta=0.1, nu=0.01, lambda_clamp=2.0, sigma=0.7,
                              steps=30, kind=adam_kind(0.9, 0.99), seed=12)
        a, b = run(model, data, cfg), run(model, data, cfg)
        for field in ("emp_grad_sq", "pop_grad_sq", "noise_dev", "total_dev",
                      "loss", "final_w", "w_r"):
            assert np.array_equal(getattr(a, field), getattr(b, field))
        assert a.r_index == b.r_index

    def test_r_uniform_over_steps(self):
        model, data = quadratic_setup(seed=37, p=3, n=10)
        T = 7
        counts = np.zeros(T + 1)
        for s in range(400):
            cfg = OptimizerConfig(eta=0.1, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                                  steps=T, kind=gd_kind(), seed=s)
            counts[run(model, data, cfg).r_index] += 1
        assert counts[0] == 0
        freq = counts[1:] / 400
        assert np.all(np.abs(freq - 1 / T) < 4 * math.sqrt((1 / T) / 400))

    def test_w_r_matches_pre_update_point(self):
        model, data = quadratic_setup(seed=41, p=4, n=12)
        cfg = OptimizerConfig(eta=0.5, nu=0.0, lambda_clamp=1.0, sigma=0.0,
                              steps=10, kind=gd_kind(), seed=6)
        rec = run(model, data, cfg)
        # replay by hand to the pre-update point of step R
        w = model.initial_point(stream(6, "init"))
        for t in range(1, rec.r_index):
            w = w - 0.5 * (w - data.features.mean(axis=0))
        assert np.allclose(rec.w_r, w, atol=1e-15)

    def test_mini_batch_mode_runs_and_scales_noise(self):
        model, data = quadratic_setup(seed=43, p=6, n=64)
        cfg = OptimizerConfig(eta=0.05, nu=0.0, lambda_clamp=1.0, sigma=2.0,
                              steps=50, kind=gd_kind(), batch_size=16,
                              clip_bound=1.0, seed=9)
        rec = run(model, data, cfg, log_full_gradients=False)
        assert cfg.effective_sigma() == pytest.approx(2.0 * 1.0 / 16)
        ratios = rec.noise_dev / (cfg.effective_sigma() * math.sqrt(6))
        assert abs(ratios.mean() - 1.0) < 0.3
        assert np.isnan(rec.emp_grad_sq).all()
        assert np.isfinite(rec.loss).all()


class TestPrivacyPlumbing:
    def test_noise_enters_before_averaging_and_data_only_via_gradient(self, monkeypatch):
        """Interposition: per step, the averaging functions consume exactly
        (batch gradient + independently recomputed Gaussian draw), and the
        dataset is touched only by the gradient oracle."""
        model, data = quadratic_setup(seed=47, p=5, n=30)
        sigma, seed, T = 0.8, 77, 12
        events = []

        real_empirical = optimizer.empirical_gradient
        real_averaging = optimizer.averaging

        def spy_empirical(model_, data_, w, batch=None, clip_bound=None):
            out = real_empirical(model_, data_, w, batch, clip_bound)
            events.append(("data", out.copy()))
            return out

        def spy_averaging(kind, m_prev, v_prev, g):
            events.append(("averaging", g.copy()))
            return real_averaging(kind, m_prev, v_prev, g)

        monkeypatch.setattr(optimizer, "empirical_gradient", spy_empirical)
        monkeypatch.setattr(optimizer, "averaging", spy_averaging)
        cfg = OptimizerConfig(eta=0.1, nu=0.01, lambda_clamp=3.0, sigma=sigma,
                              steps=T, kind=rmsprop_kind(0.9), seed=seed)
        run(model, data, cfg)

        data_events = [e for e in events if e[0] == "data"]
        avg_events = [e for e in events if e[0] == "averaging"]
        assert len(avg_events) == T
        assert len(data_events) == T  # full-batch unclipped: one access per step
        for t in range(1, T + 1):
            g_hat = data_events[t - 1][1]
            b = sigma * stream(seed, "noise", t).standard_normal(5)
            assert np.array_equal(avg_events[t - 1][1], g_hat + b)
            # the averaging input differs from the raw gradient: noise first
            assert not np.array_equal(avg_events[t - 1][1], g_hat)


class TestTheoryParameters:
    def test_gd_pop_example(self):
        cfg = set_params_from_theory(GD_POP, n=10_000, p=16, eps=1.0, delta=1e-5,
                                     G=1.0, L=1.0)
        t_raw = 10_000 * 1.0 * 1.0 / (1.0 * math.sqrt(16 * math.log(1e5)))
        assert t_raw == pytest.approx(736.8, abs=0.1)
        assert cfg.steps == math.ceil(t_raw)
        assert cfg.eta == pytest.approx(0.25)
        assert cfg.kind.tag == "GD" and cfg.nu == 0.0 and cfg.lambda_clamp == 1.0

    def test_gd_emp_eta_is_one_over_L(self):
        cfg = set_params_from_theory(GD_EMP, n=1000, p=4, eps=1.0, delta=1e-5,
                                     G=1.0, L=2.0)
        assert cfg.eta == pytest.approx(0.5)

    def test_rmsprop_variants(self):
        pop = set_params_from_theory(RMSPROP_POP, n=1000, p=4, eps=1.0,
                                     delta=1e-5, G=1.0, L=1.0, nu=0.8, beta2=0.99)
        emp = set_params_from_theory(RMSPROP_EMP, n=1000, p=4, eps=1.0,
                                     delta=1e-5, G=1.0, L=1.0, nu=0.8, beta2=0.99)
        assert pop.eta == pytest.approx(0.8 / 4)
        assert emp.eta == pytest.approx(0.8 / 2)
        assert pop.steps == emp.steps  # same T rule
        gd = set_params_from_theory(GD_POP, n=1000, p=4, eps=1.0, delta=1e-5,
                                    G=1.0, L=4.0)
        assert gd.steps == pytest.approx(2 * pop.steps, abs=1)  # extra sqrt(L)

    def test_rmsprop_emp_constraint_violation(self):
        with pytest.raises(ParameterInfeasibleError, match="16 G"):
            set_params_from_theory(RMSPROP_EMP, n=1000, p=4, eps=1.0, delta=1e-5,
                                   G=1.0, L=1.0, nu=1.0, beta2=0.9)
        # 1 - 0.9 = 0.1 > 1/16 = 0.0625 -> infeasible; beta2 = 0.995 passes
        set_params_from_theory(RMSPROP_EMP, n=1000, p=4, eps=1.0, delta=1e-5,
                               G=1.0, L=1.0, nu=1.0, beta2=0.995)

    def test_adam_eta_matches_stated_formula(self):
        # independent high-precision evaluation of the stated coefficient
        for b1 in (1e-6, 0.1, 0.5, 0.9):
            r = 4.0 * b1 / (1.0 - b1) ** 2
            expected = (math.sqrt(0.5 + r) - 0.5) * (1.0 - b1) ** 2 / b1
            assert adam_eta_bracket(b1) == pytest.approx(expected, rel=1e-12)
        cfg = set_params_from_theory(ADAM_POP, n=1000, p=4, eps=1.0, delta=1e-5,
                                     G=1.0, L=1.0, nu=0.4, beta1=0.9, beta2=0.99)
        assert cfg.eta == pytest.approx(adam_eta_bracket(0.9) * 0.4 / 4.0)
        assert cfg.kind.tag == "ADAM"
        emp = set_params_from_theory(ADAM_EMP, n=1000, p=4, eps=1.0, delta=1e-5,
                                     G=1.0, L=1.0, nu=0.4, beta1=0.9, beta2=0.99)
        assert emp.eta == cfg.eta and emp.steps == cfg.steps

    def test_sigma_calibrated_for_budget_at_sensitivity_2G_over_n(self):
        n, G, eps, delta = 2000, 1.5, 1.0, 1e-5
        cfg = set_params_from_theory(GD_EMP, n=n, p=8, eps=eps, delta=delta,
                                     G=G, L=1.0)
        mult = cfg.sigma * n / (2 * G)
        achieved = accountant.eps_for_delta(
            accountant.MechanismSpec(mult, 1.0, cfg.steps), delta)
        assert achieved <= eps
        assert achieved == pytest.approx(eps, rel=0.01)

    def test_t_scale_knob(self):
        a = set_params_from_theory(GD_EMP, n=1000, p=4, eps=1.0, delta=1e-5,
                                   G=1.0, L=1.0)
        b = set_params_from_theory(GD_EMP, n=1000, p=4, eps=1.0, delta=1e-5,
                                   G=1.0, L=1.0, t_scale=2.0)
        assert b.steps == pytest.approx(2 * a.steps, abs=1)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            set_params_from_theory("NEWTON", n=10, p=2, eps=1.0, delta=1e-5,
                                   G=1.0, L=1.0)
        with pytest.raises(ValueError):
            set_params_from_theory(GD_POP, n=-5, p=2, eps=1.0, delta=1e-5,
                                   G=1.0, L=1.0)


class TestClampInvariantProperty:
    def test_randomized_steps_respect_clamp(self):
        rng = stream(303, "clamp")
        for trial in range(40):
            lam = float(rng.uniform(0.05, 5.0))
            kind = (rmsprop_kind(float(rng.uniform(0.5, 0.999)))
                    if trial % 2 else
                    adam_kind(float(rng.uniform(0.0, 0.95)),
                              float(rng.uniform(0.5, 0.999))))
            cfg = OptimizerConfig(eta=0.1, nu=0.01, lambda_clamp=lam, sigma=0.0,
                                  steps=10_000, kind=kind)
            m = v = np.zeros(4)
            w = np.zeros(4)
            state = OptimizerState(w=w, m=m, v=v)
            for _ in range(25):
                g = rng.standard_normal(4) * 3
                state = step(state, cfg, g)
                v_used = np.minimum(state.v, lam)
                assert np.all(v_used >= 0.0) and np.all(v_used <= lam)

import numpy as np
import pytest
from dataclasses import replace

from spdiff.corruption import build_schedule, corrupt, corrupt_freq, dft2, idft2
from spdiff.diffusion import (
    GaussianOracleDenoiser,
    LinearFrequencyDenoiser,
    SigmaVariant,
    TrainState,
    default_variant,
    expected_update,
    gaussian_oracle_denoiser,
    inverse_time_lr,
    load_denoiser,
    oracle_coefficients,
    reverse_step,
    sample,
    save_denoiser,
    sigma_schedule,
    simple_loss,
    simple_loss_grad,
    train,
    train_step,
)
from spdiff.errors import NonFiniteLoss, OutOfRange, ShapeMismatch, UnsupportedFormat
from spdiff.spectrum import SpectrumFit
from spdiff.verify import analytic_sample_variance, bin_variance, gaussian_data

from conftest import CIFAR_FIT

FLAT = SpectrumFit(1.0, 1.0, 0.0)


def small_sched(T=10, fit=CIFAR_FIT, size=8):
    return build_schedule(fit, size, size, T)


# ---------------------------------------------------------------- sigma

def test_sigma_variants(sched8):
    beta = sigma_schedule(sched8, "beta")
    tilde = sigma_schedule(sched8, SigmaVariant.BETA_TILDE)
    assert np.all(beta[0] == 0) and np.all(tilde[0] == 0)
    assert np.all(tilde[1:] <= beta[1:])
    assert np.all(tilde[1] == 0)  # (1 - psi_0) = 0
    assert np.all((beta[1:] > 0) & (beta[1:] < 1))


def test_default_variant():
    assert default_variant(300) is SigmaVariant.BETA_TILDE
    assert default_variant(301) is SigmaVariant.BETA


# ---------------------------------------------------------------- loss

def test_loss_zero_for_perfect_prediction(rng):
    e = rng.standard_normal((2, 1, 4, 4))
    assert simple_loss(e, e) == 0.0


def test_loss_of_zero_prediction_is_unit():
    e = np.random.default_rng(0).standard_normal(100_000)
    se = np.std(e ** 2, ddof=1) / np.sqrt(e.size)
    assert abs(simple_loss(np.zeros_like(e), e) - 1.0) <= 3 * se


def test_loss_gradient_matches_finite_differences(rng):
    eh, e = rng.standard_normal((1, 4, 4)), rng.standard_normal((1, 4, 4))
    g = simple_loss_grad(eh, e)
    h = 1e-6
    for idx in [(0, 0, 0), (0, 1, 3), (0, 3, 2)]:
        up, dn = eh.copy(), eh.copy()
        up[idx] += h
        dn[idx] -= h
        assert abs((simple_loss(up, e) - simple_loss(dn, e)) / (2 * h) - g[idx]) <= 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        simple_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        simple_loss_grad(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------- oracle denoiser

def test_oracle_flat_spectrum_is_ddpm_optimal():
    s = small_sched(20, FLAT)
    coef = oracle_coefficients(s)
    for t in range(20):
        assert np.allclose(coef[t], np.sqrt(t / 20), rtol=1e-12)


def test_oracle_zero_at_t0(sched8, rng):
    x = rng.standard_normal((1, 8, 8))
    assert np.all(gaussian_oracle_denoiser(sched8).predict(x, 0) == 0)


def test_oracle_slope_matches_regression():
    # per-bin least-squares slope of xi on u_t over 1e5 forward pairs
    s = small_sched(10)
    t, n = 4, 100_000
    rng = np.random.default_rng(0)
    x0 = gaussian_data(s.d_values, n, rng)
    eps = rng.standard_normal(x0.shape)
    u = corrupt_freq(dft2(x0), dft2(eps), t, s)[:, 0]
    xi = dft2(eps)[:, 0]
    uu = np.sum(np.abs(u) ** 2, axis=0)
    slope = np.sum(np.real(np.conj(u) * xi), axis=0) / uu
    resid = np.real(np.conj(u) * (xi - slope * u))
    se = np.sqrt(np.sum(resid ** 2, axis=0)) / uu
    assert np.all(np.abs(slope - oracle_coefficients(s)[t]) <= 3 * se)


def test_oracle_output_shape_and_batch(sched8, rng):
    den = GaussianOracleDenoiser(sched8)
    x = rng.standard_normal((5, 3, 8, 8))
    t = np.array([1, 2, 3, 4, 5])
    out = den.predict(x, t)
    assert out.shape == x.shape
    for i in range(5):
        assert np.allclose(out[i], den.predict(x[i], int(t[i])))


def test_linear_from_oracle_matches_oracle(sched8, rng):
    x = rng.standard_normal((2, 8, 8))
    lin = LinearFrequencyDenoiser.from_oracle(sched8, channels=2)
    for t in (0, 1, 50, 100):
        assert np.allclose(lin.predict(x, t), gaussian_oracle_denoiser(sched8).predict(x, t), atol=1e-14)
    with pytest.raises(OutOfRange):
        lin.predict(x, 101)


def test_denoiser_file_round_trip(tmp_path, rng):
    w = rng.standard_normal((3, 2, 4, 5)).astype(np.float32).astype(float)
    save_denoiser(tmp_path / "p.bin", LinearFrequencyDenoiser(w))
    back = load_denoiser(tmp_path / "p.bin")
    assert np.array_equal(back.weights, w)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw.split(b"\n", 1)[0].startswith(b"{")


def test_denoiser_file_errors(tmp_path):
    (tmp_path / "a").write_bytes(b"garbage")
    with pytest.raises(UnsupportedFormat):
        load_denoiser(tmp_path / "a")
    (tmp_path / "b").write_bytes(b'{"T": 1, "H": 1, "W": 1, "C": 1, "model": "unet"}\n')
    with pytest.raises(UnsupportedFormat):
        load_denoiser(tmp_path / "b")
    save_denoiser(tmp_path / "c", LinearFrequencyDenoiser(np.zeros((2, 1, 2, 2))))
    raw = (tmp_path / "c").read_bytes().replace(b'"T": 2', b'"T": 3')
    (tmp_path / "c").write_bytes(raw)
    with pytest.raises(UnsupportedFormat):
        load_denoiser(tmp_path / "c")


# ---------------------------------------------------------------- reverse step

def scalar_ddpm_step(x_t, t, eps_hat, abar, sigma2, z):
    """Classic ancestral step written with scalar alpha-bar (independent of the filter code)."""
    alpha = abar[t] / abar[t - 1]
    mean = (x_t - (1 - alpha) / np.sqrt(1 - abar[t]) * eps_hat) / np.sqrt(alpha)
    return mean + np.sqrt(sigma2) * z


def test_reverse_step_flat_reduces_to_ddpm(rng):
    T = 30
    s = small_sched(T, FLAT)
    abar = 1 - np.arange(T + 1) / T
    abar[-1] = 1e-8
    sig = sigma_schedule(s, "beta")
    for t in range(1, T + 1):
        x_t, e, z = (rng.standard_normal((1, 8, 8)) for _ in range(3))
        beta_t = 1 - abar[t] / abar[t - 1]
        ours = idft2(reverse_step(dft2(x_t), t, e, s, sig, z))
        ref = scalar_ddpm_step(x_t, t, e, abar, beta_t, z)
        assert np.abs(ours - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())


def test_reverse_step_with_true_noise_gives_conditional_mean():
    s = small_sched(10)
    t, n = 6, 20_000
    rng = np.random.default_rng(0)
    x0 = gaussian_data(s.d_values, 1, rng)[0]
    u0 = dft2(x0)
    eps = rng.standard_normal((n, 1, 8, 8))
    u_t = corrupt_freq(u0, dft2(eps), t, s)
    u_prev = reverse_step(u_t, t, eps, s, sigma_schedule(s, "beta"), None)
    target = np.sqrt(s.psi(t - 1)) * u0
    for part in (np.real, np.imag):
        vals = part(u_prev)
        se = vals.std(axis=0, ddof=1) / np.sqrt(n)
        dev = np.abs(vals.mean(axis=0) - part(target))
        assert np.all((dev <= 3 * se) | (se == 0) & (dev <= 1e-9))


def test_reverse_step_final_step_is_finite(sched8, rng):
    u = dft2(rng.standard_normal((1, 8, 8)))
    out = reverse_step(u, 1, rng.standard_normal((1, 8, 8)), sched8, sigma_schedule(sched8, "beta"), None)
    assert np.all(np.isfinite(out))


def test_reverse_step_range(sched8):
    sig = sigma_schedule(sched8, "beta")
    with pytest.raises(OutOfRange):
        reverse_step(np.zeros((1, 8, 8)), 0, np.zeros((1, 8, 8)), sched8, sig)
    with pytest.raises(OutOfRange):
        reverse_step(np.zeros((1, 8, 8)), 101, np.zeros((1, 8, 8)), sched8, sig)


def test_single_step_inversion(rng):
    s = small_sched(1, FLAT)
    x0 = rng.uniform(-1, 1, (1, 8, 8))
    x1, eps = corrupt(x0, 1, s, 3)
    p1 = s.psi(1)
    out = reverse_step(dft2(x1), 1, eps, s, sigma_schedule(s, "beta"), None)
    assert np.allclose(out, (dft2(x1) - np.sqrt(1 - p1) * dft2(eps)) / np.sqrt(p1))
    assert np.allclose(idft2(out), x0, atol=1e-6)


# ---------------------------------------------------------------- sampling

def test_sample_shape_determinism_and_chunking():
    s = small_sched(10)
    den = gaussian_oracle_denoiser(s)
    a = sample(s, den, "beta", seed=5, n=7, channels=2)
    b = sample(s, den, "beta", seed=5, n=7, channels=2, chunk=3)
    assert a.shape == (7, 2, 8, 8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(s, den, "beta", seed=6, n=7, channels=2))
    assert np.array_equal(a[:4], sample(s, den, "beta", seed=5, n=4, channels=2))


def test_sample_matches_exact_variance_recursion():
    s = small_sched(20)
    n = 20_000
    for variant in ("beta", "beta-tilde"):
        xs = sample(s, gaussian_oracle_denoiser(s), variant, seed=0, n=n)
        est, se = bin_variance(xs)
        z = (est - analytic_sample_variance(s, variant)) / se
        assert np.abs(z).max() <= 4.0  # 64 bins per variant


def test_canonical_sampler_bias_is_the_exact_recursion():
    # at T=100 the generated variance sits off target by the amount the exact recursion predicts
    s = small_sched(100)
    xs = sample(s, gaussian_oracle_denoiser(s), "beta-tilde", seed=0, n=10_000)
    est, se = bin_variance(xs)
    exact = analytic_sample_variance(s, "beta-tilde")
    assert np.abs((est - exact) / se).max() <= 4.0
    assert np.abs(exact / s.d_values - 1).max() > 0.05


def test_variance_sweep_improves_with_T():
    for variant in ("beta", "beta-tilde"):
        devs = []
        for T in (50, 100, 300):
            s = small_sched(T)
            devs.append(np.abs(analytic_sample_variance(s, variant) / s.d_values - 1).max())
        assert devs[0] > devs[1] > devs[2]


def test_sample_with_linear_denoiser(sched8):
    lin = LinearFrequencyDenoiser.from_oracle(sched8)
    a = sample(sched8, lin, None, seed=1, n=3)
    b = sample(sched8, gaussian_oracle_denoiser(sched8), None, seed=1, n=3)
    assert np.allclose(a, b, atol=1e-9)


# ---------------------------------------------------------------- training

def test_train_step_gradient_matches_finite_differences():
    s = small_sched(3, size=4)
    rng = np.random.default_rng(1)
    w = rng.standard_normal((3, 1, 4, 4)) * 0.3
    # weights must be conjugate-symmetric for the denoiser output to be a real image
    w = 0.5 * (w + np.roll(w[..., ::-1, ::-1], 1, axis=(-2, -1)))
    x0 = gaussian_data(s.d_values, 5, rng)
    state = TrainState(w, lr=1.0)
    new = train_step(state, x0, s, 42)
    grad = -new.last_update

    # rebuild the same draws: t, then pixel noise
    r = np.random.default_rng(42)
    t = r.integers(1, 4, size=5)
    x_t, eps = corrupt(x0, t, s, r)

    def loss(weights):
        return simple_loss(LinearFrequencyDenoiser(weights).predict(x_t, t), eps)

    assert np.isclose(new.last_loss, loss(w), rtol=1e-12)
    h = 1e-6
    for r_, i, j in np.ndindex(3, 4, 4):
        pair = {(i, j), ((-i) % 4, (-j) % 4)}
        up, dn = w.copy(), w.copy()
        for a, b in pair:
            up[r_, 0, a, b] += h
            dn[r_, 0, a, b] -= h
        fd = (loss(up) - loss(dn)) / (2 * h)
        assert abs(fd - sum(grad[r_, 0, a, b] for a, b in pair)) <= 1e-7


def test_train_step_deterministic_and_counts(sched8):
    x0 = gaussian_data(sched8.d_values, 4, 0)
    st = TrainState(LinearFrequencyDenoiser.zeros(100, 1, 8, 8).weights)
    a, b = train_step(st, x0, sched8, 3), train_step(st, x0, sched8, 3)
    assert np.array_equal(a.weights, b.weights) and a.step == 1
    assert a.running_loss == a.last_loss


def test_train_step_single_step_schedule():
    s = small_sched(1)
    st = TrainState(np.zeros((1, 1, 8, 8)), lr=1.0)
    st = train_step(st, gaussian_data(s.d_values, 16, 0), s, 0)
    assert np.all(st.weights > 0)


def test_train_step_errors(sched8):
    with pytest.raises(ShapeMismatch):
        train_step(TrainState(np.zeros((5, 1, 8, 8))), np.zeros((1, 8, 8)), sched8, 0)
    bad = TrainState(np.full((100, 1, 8, 8), np.inf))
    with pytest.raises(NonFiniteLoss):
        train_step(bad, np.ones((1, 8, 8)), sched8, 0)


def test_expected_update_vanishes_at_oracle(sched8):
    st = TrainState(LinearFrequencyDenoiser.from_oracle(sched8).weights)
    for t in (1, 50, 100):
        assert np.abs(expected_update(st, sched8, t)).max() <= 1e-15


def test_expected_update_matches_monte_carlo():
    s = small_sched(2, size=4)
    w = np.zeros((2, 1, 4, 4))
    st = TrainState(w, lr=1.0)
    rng = np.random.default_rng(0)
    ups = []
    for _ in range(4000):
        ups.append(train_step(st, gaussian_data(s.d_values, 1, rng), s, rng).last_update)
    ups = np.array(ups)
    mean, se = ups.mean(axis=0), ups.std(axis=0, ddof=1) / np.sqrt(len(ups))
    # uniform t: the mean update is the average of the per-t expectations
    exp = 0.5 * (expected_update(st, s, 1) + expected_update(st, s, 2))
    assert np.abs((mean - exp) / se).max() <= 4.0


def test_train_driver_with_dataset(sched8):
    data = gaussian_data(sched8.d_values, 10, 0)
    st = TrainState(LinearFrequencyDenoiser.zeros(100, 1, 8, 8).weights)
    a, la = train(st, sched8, data, 5, 1, batch_size=2)
    b, lb = train(st, sched8, data, 5, 1, batch_size=2)
    assert a.step == 5 and np.array_equal(a.weights, b.weights) and np.array_equal(la, lb)
    with pytest.raises(ShapeMismatch):
        train(st, sched8, np.zeros((0, 1, 8, 8)), 1, 0)


def test_inverse_time_lr():
    f = inverse_time_lr(2.0, 10.0)
    assert [f(k) for k in (1, 5, 10, 20)] == [2.0, 2.0, 1.0, 0.5]


def test_loss_strictly_decreases_single_step_schedule():
    # T=1: one time scale and multiplicative loss noise, so window means fall monotonically
    s = small_sched(1)
    st = TrainState(np.zeros((1, 1, 8, 8)), lr=0.1)
    data = lambda n, r: gaussian_data(s.d_values, n, r)  # noqa: E731
    _, losses = train(st, s, data, 1000, 0, batch_size=64)
    windows = losses.reshape(100, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def expected_loss_curve(schedule, lr, steps):
    """Mean-dynamics loss curve of zero-initialised training (batch-independent)."""
    T = schedule.T
    n = schedule.d_values.size
    var = np.stack([schedule.variance(t) for t in range(1, T + 1)])
    cov = np.sqrt(1 - np.stack([schedule.psi(t) for t in range(1, T + 1)]))
    w = np.zeros_like(var)
    out = np.empty(steps)
    for k in range(steps):
        out[k] = np.mean(1 - 2 * w * cov + w * w * var)
        w = w - lr * 2.0 / (n * T) * (w * var - cov)
    return out


def test_loss_curve_tracks_mean_dynamics():
    s = small_sched(10)
    lr, steps, batch = 0.1, 2000, 256
    expected = expected_loss_curve(s, lr, steps).reshape(100, -1)
    assert np.all(np.diff(expected.mean(axis=1)) < 0)
    st = TrainState(np.zeros((10, 1, 8, 8)), lr=lr)
    data = lambda n, r: gaussian_data(s.d_values, n, r)  # noqa: E731
    _, losses = train(st, s, data, steps, 0, batch_size=batch)
    got = losses.reshape(100, -1)
    se = got.std(axis=1, ddof=1) / np.sqrt(got.shape[1])
    z = (got.mean(axis=1) - expected.mean(axis=1)) / se
    assert np.abs(z).max() <= 4.0  # 100 windows


def test_zero_init_converges_on_flat_spectrum():
    T = 4
    s = small_sched(T, FLAT)
    st = TrainState(np.zeros((T, 1, 8, 8)))
    data = lambda n, r: gaussian_data(s.d_values, n, r)  # noqa: E731
    # running-average step size: 1 / (curvature * k) with curvature 2 / (N T)
    st, _ = train(st, s, data, 200, 0, batch_size=4096, lr_schedule=inverse_time_lr(64 * T / 2, 64 * T / 2))
    target = oracle_coefficients(s)[1:, None]
    assert np.abs(st.weights / target - 1).max() <= 0.02

import numpy as np
import pytest

from metadescent import maml_core, theory_bounds
from metadescent.maml_core import adapt_inner, adapt_test, build_meta_system, meta_loss, test_error
from metadescent.solvers import solve_min_l2
from metadescent.task_gen import ConfigError, RngStream, TaskBatch, TestTask, sample_test_task, sample_truths
from conftest import make_cfg, make_system


def test_zero_step_gives_plain_stack():
    cfg = make_cfg(alpha_t=0.0)
    batch, sys = make_system(cfg, seed=1)
    np.testing.assert_array_equal(sys.B, np.vstack([V.T for V in batch.V]))
    np.testing.assert_array_equal(sys.gamma, np.concatenate(batch.y_v))


def test_hand_expanded_block():
    # p=2, one task, one validation point, two training points.
    X = np.array([[1.0, 2.0], [0.0, -1.0]])
    V = np.array([[3.0], [1.0]])
    y, yv, w = np.array([1.0, -2.0]), np.array([0.5]), np.zeros(2)
    cfg = make_cfg(p=2, s=1, m=1, n_t=2, n_v=1, alpha_t=0.5, sigma=0.0, nu=0.0, w0_s=np.zeros(1))
    batch = TaskBatch([X], [np.zeros(2)], [y], [V], [np.zeros(1)], [yv], [w])
    sys = build_meta_system(batch, cfg)
    # X X^T = [[5, -2], [-2, 1]], step/n = 0.25, V^T = [3, 1]
    # V^T (I - 0.25 X X^T) = [3, 1] - 0.25 [13, -5] = [-0.25, 2.25]
    np.testing.assert_allclose(sys.B, [[-0.25, 2.25]])
    # X y = [-3, 2]; V^T X y = -7; gamma = 0.5 - 0.25 * (-7) = 2.25
    np.testing.assert_allclose(sys.gamma, [2.25])


def test_noiseless_homogeneous_delta_gamma_is_exact_zero():
    cfg = make_cfg(sigma=0.0, nu=0.0)
    _, sys = make_system(cfg, seed=2)
    assert np.all(sys.delta_gamma == 0)


def test_delta_gamma_identity(cfg):
    _, sys = make_system(cfg, seed=3)
    resid = sys.gamma - sys.B @ sys.w0 - sys.delta_gamma
    scale = max(np.linalg.norm(sys.gamma), np.linalg.norm(sys.B @ sys.w0))
    assert np.max(np.abs(resid)) <= 1e-13 * scale


def test_blocks_recomputable(cfg):
    batch, sys = make_system(cfg, seed=4)
    a = cfg.alpha_t / cfg.n_t
    for i in range(cfg.m):
        X, V = batch.X[i], batch.V[i]
        Bi, gi = sys.block(i)
        np.testing.assert_allclose(Bi, V.T @ (np.eye(cfg.p) - a * X @ X.T), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(gi, batch.y_v[i] - a * V.T @ X @ batch.y[i], rtol=1e-12, atol=1e-12)


def test_full_row_rank_overparameterized():
    for seed in range(20):
        _, sys = make_system(make_cfg(), seed=seed)
        assert np.linalg.svd(sys.B, compute_uv=False)[-1] > 0
        assert np.linalg.matrix_rank(sys.B) == sys.rows


def test_gram_symmetric_psd(cfg):
    _, sys = make_system(cfg, seed=5)
    assert np.array_equal(sys.gram, sys.gram.T)
    assert sys.gram_eigvals[0] > 0


def test_shape_mismatch_rejected(cfg):
    batch, _ = make_system(cfg, seed=6)
    with pytest.raises(ConfigError):
        build_meta_system(batch, cfg.with_(p=cfg.p + 1))


def test_meta_loss_interpolator_and_zero(cfg):
    _, sys = make_system(cfg, seed=7)
    w = solve_min_l2(sys).w_hat
    assert meta_loss(sys, w) <= 1e-20 * (sys.gamma @ sys.gamma)
    assert meta_loss(sys, np.zeros(cfg.p)) == pytest.approx(sys.gamma @ sys.gamma / (2 * cfg.mn_v))


def test_meta_loss_equals_per_task_validation_loss(cfg, gen):
    batch, sys = make_system(cfg, seed=8)
    for _ in range(10):
        w = gen.normal(size=cfg.p)
        total = 0.0
        for i in range(cfg.m):
            # One gradient step on the training loss ||X^T w - y||^2 / (2 n_t), then validation loss.
            grad = batch.X[i] @ (batch.X[i].T @ w - batch.y[i]) / cfg.n_t
            adapted = w - cfg.alpha_t * grad
            r = batch.V[i].T @ adapted - batch.y_v[i]
            total += r @ r / (2 * cfg.n_v)
        assert meta_loss(sys, w) == pytest.approx(total / cfg.m, rel=1e-10)


def _inner_loss(w, X, y):
    r = X.T @ w - y
    return r @ r / (2 * X.shape[1])


def _numeric_step(w, X, y, step, h=1e-5):
    grad = np.array([(_inner_loss(w + h * e, X, y) - _inner_loss(w - h * e, X, y)) / (2 * h) for e in np.eye(w.size)])
    return w - step * grad


def test_adapt_inner(gen):
    X, y, w = gen.normal(size=(6, 4)), gen.normal(size=4), gen.normal(size=6)
    assert np.array_equal(adapt_inner(w, X, y, 0.0).w_adapted, w)
    np.testing.assert_allclose(adapt_inner(w, X, X.T @ w, 0.3).w_adapted, w, atol=1e-14)
    np.testing.assert_allclose(adapt_inner(w, X, y, 0.3).w_adapted, _numeric_step(w, X, y, 0.3), atol=1e-6)


def test_adapt_test(gen):
    cfg = make_cfg(p=6, s=2, n_r=4, nu_r=1.0, sigma_r=0.5, alpha_r=0.2)
    rng = RngStream(9)
    _, w_r = sample_truths(cfg, rng)
    test = sample_test_task(cfg, w_r, rng)
    w = gen.normal(size=cfg.p)
    assert np.array_equal(adapt_test(w, test, cfg.with_(alpha_r=0.0)).w_adapted, w)
    exact = TestTask(w_r=w, X_r=test.X_r, eps_r=np.zeros(4), y_r=test.X_r.T @ w, nu_r=0.0)
    np.testing.assert_allclose(adapt_test(w, exact, cfg).w_adapted, w, atol=1e-14)
    np.testing.assert_allclose(adapt_test(w, test, cfg).w_adapted, _numeric_step(w, test.X_r, test.y_r, 0.2), atol=1e-6)


def test_test_error_trivial(gen):
    w = gen.normal(size=5)
    assert test_error(gen.normal(size=5), w, w) == 0
    assert test_error(np.zeros(5), w, gen.normal(size=5)) == 0


def test_test_error_monte_carlo_matches_expectation():
    cfg = make_cfg(p=8, s=3, n_r=5, nu_r=1.5, sigma_r=0.7, alpha_r=0.3)
    w_hat = cfg.w0 + 0.4
    zeta = float((w_hat - cfg.w0) @ (w_hat - cfg.w0))
    errs = []
    for r in range(20_000):
        rng = RngStream(10).child(r)
        _, w_r = sample_truths(cfg, rng)
        test = sample_test_task(cfg, w_r, rng)
        x = rng.role(-1, 7).standard_normal(cfg.p)
        errs.append(test_error(x, w_r, adapt_test(w_hat, test, cfg).w_adapted))
    mean, se = np.mean(errs), np.std(errs, ddof=1) / np.sqrt(len(errs))
    target = theory_bounds.f_test(theory_bounds.TestErrorParams.from_config(zeta, cfg))
    assert abs(mean - target) <= 3 * se


def test_dump_round_trip(cfg, tmp_path):
    _, sys = make_system(cfg, seed=11)
    path = tmp_path / "sys.txt"
    maml_core.dump_system(sys, path)
    B, gamma = maml_core.load_system_dump(path)
    assert np.array_equal(B, sys.B) and np.array_equal(gamma, sys.gamma)

import math

import numpy as np
import pytest

from mvdelay.engine import (
    BlowUpError,
    ConvergenceError,
    MeasureFlow,
    flow_distance,
    run_interacting,
    simulate_frozen,
    solve_mckean_vlasov_picard,
    step_frozen,
    step_interacting,
)
from mvdelay.model import (
    THEOREM2,
    CallableDrift,
    CallableKernel,
    CoefficientModel,
    LinearDrift,
    LinearKernel,
    LinearStateSigma,
    MomentSigma,
    ParticleCloud,
    Sampler,
    Scenario,
    TimeGrid,
)
from mvdelay.noise import NoiseStream


def random_cloud(n=6, m=3, d=1, h=0.05, seed=0):
    rng = np.random.default_rng(seed)
    return ParticleCloud(rng.normal(size=(n, m + 1, d)), TimeGrid(h, m))


def test_zero_dynamics_only_advances_time():
    c = random_cloud()
    model = CoefficientModel(beta=0.0)
    out = step_interacting(c, model, NoiseStream(1, c.grid.h), 0)
    shifted = np.concatenate([c.values[:, 1:], c.values[:, -1:]], axis=1)
    assert np.array_equal(out.values, shifted)
    assert out.time == pytest.approx(c.grid.h)
    const = ParticleCloud(np.repeat(c.values[:, -1:], 4, axis=1), c.grid)
    assert np.array_equal(step_interacting(const, model, NoiseStream(1, 0.05), 0).values, const.values)


def test_explicit_euler_formula_ou():
    h = 0.1
    c = ParticleCloud(np.array([[[2.0]]]), TimeGrid(h, 0))
    noise = NoiseStream(5, h)
    out = step_interacting(c, CoefficientModel(b0=LinearDrift(1.0)), noise, 0)
    dw = noise.increments("W1", 0, [0], 1)[0, 0]
    assert out.endpoints[0, 0] == pytest.approx(2.0 * (1 - h) + dw, abs=1e-15)


def test_two_particle_interaction_average():
    a, b = 0.3, 1.7
    c = ParticleCloud(np.array([[[a], [a]], [[b], [b]]]), TimeGrid(0.1, 1))
    kernel = CallableKernel(lambda xi, eta: eta[..., -1, :] - xi[..., -1, :])
    model = CoefficientModel(kernel=kernel)
    drift = model.drift(c.values, c.values)
    assert drift[0, 0] == pytest.approx((b - a) / 2)
    assert drift[1, 0] == pytest.approx((a - b) / 2)
    # the built-in linear kernel agrees
    lin = CoefficientModel(kernel=LinearKernel(1.0)).drift(c.values, c.values)
    assert np.allclose(lin, drift, atol=1e-15)


def test_blocked_mean_field_matches_loop():
    rng = np.random.default_rng(2)
    blocks = rng.normal(size=(3, 5, 4, 2))
    k = LinearKernel(0.3, delay_weight=0.2)
    fast = k.mean_field_blocks(blocks)
    slow = np.stack([k.mean_field(b, b) for b in blocks])
    assert np.allclose(fast, slow, atol=1e-14)


def test_frozen_equals_interacting_without_interaction():
    c = random_cloud()
    model = CoefficientModel(b0=LinearDrift(0.7), sigma=LinearStateSigma(0.3))
    flow = MeasureFlow.constant(random_cloud(seed=9), 3)
    noise = NoiseStream(3, c.grid.h)
    a = step_interacting(c, model, noise, 2)
    b = step_frozen(c, flow, model, noise, 2)
    assert np.array_equal(a.values, b.values)


def test_zero_moment_flow_leaves_additive_noise_only():
    g = TimeGrid(0.05, 2)
    c = random_cloud(m=2)
    model = CoefficientModel(sigma=MomentSigma(1.0, power=1.0), mode=THEOREM2, beta=0.5)
    zero_flow = MeasureFlow.constant(ParticleCloud(np.zeros((4, 3, 1)), g), 1)
    noise = NoiseStream(4, g.h)
    out = step_frozen(c, zero_flow, model, noise, 0)
    dw1 = noise.increments("W1", 0, c.ids, 1)
    assert np.allclose(out.endpoints, c.endpoints + 0.5 * dw1, atol=1e-15)


def test_frozen_on_own_flow_is_one_interacting_step():
    c = random_cloud(n=8)
    model = CoefficientModel(b0=LinearDrift(1.0), kernel=LinearKernel(0.4))
    noise = NoiseStream(11, c.grid.h)
    own = MeasureFlow.constant(c, 1)
    assert np.array_equal(step_frozen(c, own, model, noise, 0).values,
                          step_interacting(c, model, noise, 0).values)


def test_missing_snapshot():
    c = random_cloud()
    flow = MeasureFlow.constant(c, 2)
    with pytest.raises(KeyError):
        step_frozen(c, flow, CoefficientModel(), NoiseStream(0, 0.05), 3)


def test_flow_from_paths_views():
    c = random_cloud(n=3, m=2)
    paths = simulate_frozen(c, MeasureFlow.constant(c, 4), CoefficientModel(), NoiseStream(0, c.grid.h))
    flow = MeasureFlow.from_paths(paths, c.grid)
    assert flow.n_steps == 4 and flow.size == 3
    assert np.array_equal(flow.values(0), c.values)
    assert np.array_equal(flow.values(4)[:, -1], paths[:, -1])


def test_flow_distance_methods():
    c = random_cloud(n=5)
    f1 = MeasureFlow.constant(c, 2)
    f2 = MeasureFlow.constant(c.permuted([4, 3, 2, 1, 0]), 2)
    assert flow_distance(f1, f2, "assignment") == 0.0
    assert flow_distance(f1, f2, "coupled") > 0.0
    with pytest.raises(ValueError):
        flow_distance(f1, f2, "other")


# ---- Picard ------------------------------------------------------------------


def _scenario(kernel=None, sigma=None, mode="theorem3", T_steps=40, m=4, h=0.025, seed=77, b0=None):
    model = CoefficientModel(b0=b0 or LinearDrift(1.0), kernel=kernel or LinearKernel(0.0),
                             sigma=sigma or LinearStateSigma(0.0), mode=mode)
    return Scenario(TimeGrid(h, m, T_steps), model, 50, Sampler("gaussian", {"mean": 1.0, "std": 0.5}), seed)


def test_picard_measure_free_converges_immediately():
    sc = _scenario(kernel=CoefficientModel().kernel)
    res = solve_mckean_vlasov_picard(sc, 40)
    assert res.converged and res.iterations == 1 and res.trace == [0.0]


def test_picard_monotone_for_small_linear_kernel():
    sc = _scenario(kernel=LinearKernel(0.1))
    res = solve_mckean_vlasov_picard(sc, 60, tol=1e-12)
    assert res.converged
    assert res.trace[0] < res.initial_distance
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


def test_picard_is_deterministic():
    sc = _scenario(kernel=LinearKernel(0.1))
    a = solve_mckean_vlasov_picard(sc, 30)
    b = solve_mckean_vlasov_picard(sc, 30)
    assert a.trace == b.trace
    for k in range(a.flow.n_steps + 1):
        assert np.array_equal(a.flow.values(k), b.flow.values(k))


def test_picard_nonconvergence_carries_trace():
    sc = _scenario(kernel=LinearKernel(0.5))
    with pytest.raises(ConvergenceError) as info:
        solve_mckean_vlasov_picard(sc, 20, tol=1e-30, max_iter=2)
    assert len(info.value.trace) == 2
    res = solve_mckean_vlasov_picard(sc, 20, tol=1e-30, max_iter=2, raise_on_failure=False)
    assert not res.converged


def test_picard_argument_checks():
    sc = _scenario()
    with pytest.raises(ValueError):
        solve_mckean_vlasov_picard(sc, 1)
    with pytest.raises(ValueError):
        solve_mckean_vlasov_picard(sc, 10, tol=0.0)


# ---- run_interacting -----------------------------------------------------------


def test_run_zero_dynamics():
    sc = Scenario(TimeGrid(0.1, 2, 5), CoefficientModel(beta=0.0), 4, Sampler("gaussian", {"std": 1.0}), 3)
    res = run_interacting(sc)
    assert np.array_equal(res.final.values, sc.initial_cloud().values)
    assert res.final.time == pytest.approx(0.5)
    assert len(res.trace) == 6
    assert len({r["second_gamma_moment"] for r in res.trace}) == 1


def test_ou_variance_matches_exact_formula():
    n, T, h = 10_000, 10.0, 0.01
    sc = Scenario(TimeGrid(h, 0, 1000), CoefficientModel(b0=LinearDrift(1.0)), n,
                  Sampler("point", {"value": 0.0}), 2024)
    x = run_interacting(sc, record_every=1000).final.endpoints[:, 0]
    exact = 0.5 * (1 - math.exp(-2 * T))
    se = exact * math.sqrt(2.0 / (n - 1))
    assert abs(x.var(ddof=1) - exact) < 3 * se


def test_exchangeability():
    sc = Scenario(TimeGrid(0.05, 3, 20), CoefficientModel(b0=LinearDrift(0.5), kernel=LinearKernel(0.3),
                                                          sigma=LinearStateSigma(0.2)),
                  9, Sampler("brownian_history", {"std": 1.0}), 8)
    c = sc.initial_cloud()
    perm = np.random.default_rng(0).permutation(9)
    base = run_interacting(sc, cloud=c).final
    moved = run_interacting(sc, cloud=c.permuted(perm)).final
    assert np.array_equal(moved.ids, base.ids[perm])
    # the pre-step mean is summed in a different order, so agreement is to rounding
    assert np.allclose(moved.values, base.values[perm], rtol=0, atol=1e-12)
    flat = sc.replace(model=CoefficientModel(b0=LinearDrift(0.5)))
    assert np.array_equal(run_interacting(flat, cloud=c.permuted(perm)).final.values,
                          run_interacting(flat, cloud=c).final.values[perm])


def test_run_is_deterministic():
    sc = Scenario(TimeGrid(0.05, 3, 10), CoefficientModel(kernel=LinearKernel(0.3)), 5,
                  Sampler("gaussian", {"std": 1.0}), 1)
    assert np.array_equal(run_interacting(sc).final.values, run_interacting(sc).final.values)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_is_detected():
    sc = Scenario(TimeGrid(1.0, 0, 50), CoefficientModel(b0=CallableDrift(lambda x: x ** 3)), 3,
                  Sampler("point", {"value": 2.0}), 0)
    with pytest.raises(BlowUpError) as info:
        run_interacting(sc)
    assert info.value.step >= 0 and 0 <= info.value.particle < 3


def test_run_argument_checks():
    sc = Scenario(TimeGrid(0.1, 0, 0), CoefficientModel(), 2, Sampler("point"), 0)
    with pytest.raises(ValueError):
        run_interacting(sc)
    with pytest.raises(ValueError):
        run_interacting(sc.replace(grid=TimeGrid(0.1, 0, 2)), record_every=0)

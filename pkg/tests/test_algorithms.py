import math

import numpy as np
import pytest

from byzsim.aggregators import CM, Bucketed, Mean
from byzsim.algorithms import (STEP_FUNCTIONS, DeltaToleranceError, HyperParams,
                               StepsizeInputs, StreamBundle, default_momentum,
                               default_p, delta_tolerance, init_states,
                               step_byz_dasha_page, step_byz_ef21,
                               step_byz_ef21_bc, stepsize_dasha, stepsize_ef21,
                               stepsize_ef21bc, stepsize_marina,
                               stepsize_marina2, stepsize_nonconvex, stepsize_pl)
from byzsim.attacks import BitFlipping
from byzsim.compressors import Identity, RandK, ScaledUnbiased, TopK
from byzsim.core import RngStream
from byzsim.objective import (LabeledDataset, LogisticObjective,
                              QuadraticObjective, Regularizer,
                              SmoothnessConstants, global_grad)

UNIT_CONSTS = SmoothnessConstants(L=1.0, L_pm=0.0, calL_pm=0.0, mu=0.0)


def drive(algo, objectives, good_idx, attack, hp, rounds, x0, seed=0):
    streams = StreamBundle.create(seed, len(objectives))
    server, workers = init_states(algo, x0, objectives, good_idx, attack, hp,
                                  streams)
    xs = [server.x.copy()]
    stats_log = []
    for _ in range(rounds):
        server, workers, stats = STEP_FUNCTIONS[algo](
            server, workers, objectives, good_idx, attack, hp, streams)
        xs.append(server.x.copy())
        stats_log.append(stats)
    return xs, server, workers, stats_log


def _logistic_objectives(n_workers, n_samples=40, d=4, seed=3):
    rng = RngStream(seed)
    rows = rng.standard_normal(size=(n_samples, d))
    labels = np.where(rng.uniform(size=n_samples) < 0.5, -1.0, 1.0)
    ds = LabeledDataset.from_dense(rows, labels)
    obj = LogisticObjective(ds, Regularizer("nonconvex", 0.1))
    return [obj] * n_workers


def test_gd_reduction_all_algorithms():
    # delta = 0, Identity, b = m, p = 1, a = 1, Mean: every method is GD.
    quad = [QuadraticObjective(np.array([1.0, -2.0, 0.5]))] * 4
    logi = _logistic_objectives(4)
    for objectives in (quad, logi):
        m = objectives[0].n_samples
        d = objectives[0].dim
        gamma = 0.4
        hp = HyperParams(gamma=gamma, p=1.0, a=1.0, b=m, aggregator=Mean())
        x0 = np.zeros(d)
        x_ref = [x0.copy()]
        x = x0.copy()
        for _ in range(30):
            g = np.mean(np.stack([o.grad(x) for o in objectives]), axis=0)
            x = x - gamma * g
            x_ref.append(x.copy())
        for algo in STEP_FUNCTIONS:
            xs, _, _, _ = drive(algo, objectives, [0, 1, 2, 3], None, hp, 30, x0)
            for a, b in zip(xs, x_ref):
                assert np.max(np.abs(a - b)) < 1e-12, algo


def test_marina2_estimator_collapses_with_full_batch_identity():
    # With b = m and the identity compressor, g_i tracks the exact local
    # gradient by induction even when the coin mixes both branches.
    objectives = _logistic_objectives(3)
    m = objectives[0].n_samples
    hp = HyperParams(gamma=0.1, p=0.3, b=m, aggregator=Mean())
    streams = StreamBundle.create(5, 3)
    server, workers = init_states("marina2", np.zeros(4), objectives,
                                  [0, 1, 2], None, hp, streams)
    for _ in range(20):
        server, workers, _ = STEP_FUNCTIONS["marina2"](
            server, workers, objectives, [0, 1, 2], None, hp, streams)
        expected = objectives[0].grad(server.x)
        for w in workers:
            assert np.max(np.abs(w.g_i - expected)) < 1e-12


def test_marina2_single_step_unbiased_monte_carlo():
    # Homogeneous shards, no malicious workers: E[g_i^1] equals the local
    # gradient at x^1 across coin, batch, and sparsifier randomness.
    objectives = _logistic_objectives(2, n_samples=30)
    hp = HyperParams(gamma=0.05, p=0.3, b=3, uplink=RandK(1),
                     aggregator=Mean())
    replays = 10_000
    acc = np.zeros(4)
    sq = np.zeros(4)
    x1 = None
    for rep in range(replays):
        streams = StreamBundle.create(10_000 + rep, 2)
        server, workers = init_states("marina2", np.zeros(4), objectives,
                                      [0, 1], None, hp, streams)
        server, workers, _ = STEP_FUNCTIONS["marina2"](
            server, workers, objectives, [0, 1], None, hp, streams)
        x1 = server.x  # deterministic: x^1 = x^0 - gamma * grad f(x^0)
        acc += workers[0].g_i
        sq += workers[0].g_i ** 2
    mean = acc / replays
    stderr = np.sqrt(np.maximum(sq / replays - mean * mean, 0.0) / replays)
    expected = objectives[0].grad(x1)
    assert np.all(np.abs(mean - expected) <= 4.0 * stderr + 1e-12)


def test_marina_variants_coincide_for_single_worker():
    objectives = _logistic_objectives(1)
    hp = HyperParams(gamma=0.1, p=0.25, b=4, uplink=RandK(2), aggregator=Mean())
    xs1, _, _, _ = drive("marina", objectives, [0], None, hp, 25, np.zeros(4))
    xs2, _, _, _ = drive("marina2", objectives, [0], None, hp, 25, np.zeros(4))
    for a, b in zip(xs1, xs2):
        assert np.array_equal(a, b)


def test_marina_variants_diverge_under_attack():
    # Heterogeneous quadratics, CM aggregation, bit flipping: the anchor
    # change (g^t vs g_i^t) must show up within 10 rounds.
    objs = [QuadraticObjective(np.array([1.0, 0.0])),
            QuadraticObjective(np.array([0.0, 1.0])),
            QuadraticObjective(np.array([-1.0, 1.0])),
            QuadraticObjective(np.array([2.0, -1.0]))]
    hp = HyperParams(gamma=0.05, p=0.5, b=1, uplink=RandK(1), aggregator=CM())
    good = [0, 1, 2]
    xs1, _, _, _ = drive("marina", objs, good, BitFlipping(), hp, 10, np.zeros(2))
    xs2, _, _, _ = drive("marina2", objs, good, BitFlipping(), hp, 10, np.zeros(2))
    assert any(not np.array_equal(a, b) for a, b in zip(xs1, xs2))


def test_marina_sync_round_when_p_one():
    objectives = _logistic_objectives(3)
    hp = HyperParams(gamma=0.05, p=1.0, b=1, uplink=RandK(1), aggregator=Mean())
    xs, server, workers, stats = drive("marina2", objectives, [0, 1, 2], None,
                                       hp, 5, np.zeros(4))
    assert all(s.coin == 1 for s in stats)
    d = 4
    assert all(s.bits_uplink == 3 * 64 * d for s in stats)
    grads = objectives[0].grad(server.x)
    for w in workers:
        assert np.array_equal(w.g_i, grads)


def test_dasha_momentum_contraction_frozen_iterate():
    # gamma = 0 freezes x; with the coin forced to 0 the g-h gap contracts
    # by exactly (1 - a) per round under the identity compressor.
    obj = QuadraticObjective(np.array([2.0, -1.0]))
    a = 0.25
    hp = HyperParams(gamma=0.0, p=1e-12, a=a, b=1, aggregator=Mean())
    streams = StreamBundle.create(1, 1)
    server, workers = init_states("dasha", np.array([1.0, 3.0]), [obj], [0],
                                  None, hp, streams)
    # Plant a gap between g and h to watch it contract.
    workers[0].g_i = workers[0].h_i + np.array([4.0, -8.0])
    server.per_worker_g[0] = workers[0].g_i.copy()
    gap = workers[0].g_i - workers[0].h_i
    for _ in range(3):
        server, workers, stats = step_byz_dasha_page(
            server, workers, [obj], [0], None, hp, streams)
        assert stats.coin == 0
        gap = (1.0 - a) * gap
        assert np.max(np.abs((workers[0].g_i - workers[0].h_i) - gap)) < 1e-14


def test_dasha_default_momentum():
    assert default_momentum(9.0) == pytest.approx(1.0 / 19.0)


def test_dasha_uplink_always_compressed():
    objectives = _logistic_objectives(2)
    hp = HyperParams(gamma=0.02, p=1.0, a=0.5, b=2, uplink=RandK(1),
                     aggregator=Mean())
    _, _, _, stats = drive("dasha", objectives, [0, 1], None, hp, 6, np.zeros(4))
    per_msg = 1 * (64 + 2)  # K=1, d=4
    assert all(s.bits_uplink == 2 * per_msg for s in stats)


def test_ef21_lyapunov_descent_topk():
    # f + (2 gamma / alpha_D) * ||g - grad f||^2 is non-increasing at the
    # stepsize of the error-feedback bound (single quadratic worker).
    obj = QuadraticObjective(np.zeros(2))
    si = StepsizeInputs(consts=UNIT_CONSTS, alpha_D=0.5, alpha_P=1.0,
                        delta=0.0, G=1)
    gamma = stepsize_ef21(si)
    hp = HyperParams(gamma=gamma, uplink=TopK(1), aggregator=Mean())
    streams = StreamBundle.create(0, 1)
    server, workers = init_states("ef21", np.array([1.0, 10.0]), [obj], [0],
                                  None, hp, streams)

    def lyapunov():
        h = float(np.sum((workers[0].g_i - obj.grad(server.x)) ** 2))
        return obj.loss(server.x) + (2.0 * gamma / 0.5) * h

    prev = lyapunov()
    for _ in range(50):
        server, workers, _ = step_byz_ef21(server, workers, [obj], [0], None,
                                           hp, streams)
        cur = lyapunov()
        assert cur <= prev + 1e-12
        prev = cur
    assert obj.loss(server.x) < 0.05 * obj.loss(np.array([1.0, 10.0]))


def test_ef21bc_identity_downlink_reduces_to_ef21():
    objectives = _logistic_objectives(3)
    hp = HyperParams(gamma=0.05, uplink=TopK(2), downlink=Identity(),
                     aggregator=Mean())
    xs_a, _, _, _ = drive("ef21", objectives, [0, 1, 2], None, hp, 20, np.zeros(4))
    xs_b, server_b, _, _ = drive("ef21bc", objectives, [0, 1, 2], None, hp, 20,
                                 np.zeros(4))
    for a, b in zip(xs_a, xs_b):
        assert np.array_equal(a, b)
    assert np.array_equal(server_b.w, server_b.x)


def test_ef21bc_frozen_iterate_residual_contracts():
    # gamma = 0: x and w freeze, and the g residual obeys the deterministic
    # contraction of the top-k compressor round by round.
    obj = QuadraticObjective(np.array([0.5, -1.0, 2.0, 0.1]))
    hp = HyperParams(gamma=0.0, uplink=TopK(1), downlink=TopK(2),
                     aggregator=Mean())
    streams = StreamBundle.create(2, 1)
    x0 = np.array([1.0, 2.0, -3.0, 0.5])
    server, workers = init_states("ef21bc", x0, [obj], [0], None, hp, streams)
    workers[0].g_i = workers[0].g_i + np.array([1.0, -2.0, 0.7, 3.0])
    server.per_worker_g[0] = workers[0].g_i.copy()
    alpha_d = 1.0 / 4.0
    for _ in range(6):
        res_before = float(np.sum((obj.grad(server.w) - workers[0].g_i) ** 2))
        server, workers, _ = step_byz_ef21_bc(server, workers, [obj], [0], None,
                                              hp, streams)
        assert np.array_equal(server.x, x0)
        assert np.array_equal(server.w, x0)
        res_after = float(np.sum((obj.grad(server.w) - workers[0].g_i) ** 2))
        assert res_after <= (1.0 - alpha_d) * res_before + 1e-15


def test_ef21bc_anchor_consistency():
    objectives = _logistic_objectives(3)
    hp = HyperParams(gamma=0.02, uplink=TopK(1), downlink=TopK(2),
                     aggregator=Bucketed(CM(), s=1))
    _, server, workers, _ = drive("ef21bc", objectives, [0, 1], BitFlipping(),
                                  hp, 15, np.zeros(4))
    for w in workers:
        assert np.array_equal(w.w, server.w)


def test_server_mirror_matches_honest_workers():
    objectives = _logistic_objectives(4)
    configs = {
        "marina": HyperParams(gamma=0.02, p=0.3, b=3, uplink=RandK(2),
                              aggregator=Bucketed(CM(), s=2)),
        "marina2": HyperParams(gamma=0.02, p=0.3, b=3, uplink=RandK(2),
                               aggregator=Bucketed(CM(), s=2)),
        "dasha": HyperParams(gamma=0.02, p=0.3, a=0.2, b=3, uplink=RandK(2),
                             aggregator=Bucketed(CM(), s=2)),
        "ef21": HyperParams(gamma=0.02, uplink=TopK(1),
                            aggregator=Bucketed(CM(), s=2)),
        "ef21bc": HyperParams(gamma=0.02, uplink=TopK(1), downlink=TopK(2),
                              aggregator=Bucketed(CM(), s=2)),
    }
    good = [0, 1, 2]
    for algo, hp in configs.items():
        _, server, workers, _ = drive(algo, objectives, good, BitFlipping(),
                                      hp, 12, np.zeros(4))
        for i in good:
            assert np.array_equal(server.per_worker_g[i], workers[i].g_i), algo


def test_run_determinism_at_step_level():
    objectives = _logistic_objectives(3)
    hp = HyperParams(gamma=0.03, p=0.4, b=2, uplink=RandK(1), aggregator=CM())
    xs_a, _, _, stats_a = drive("marina2", objectives, [0, 1], BitFlipping(),
                                hp, 10, np.zeros(4), seed=9)
    xs_b, _, _, stats_b = drive("marina2", objectives, [0, 1], BitFlipping(),
                                hp, 10, np.zeros(4), seed=9)
    assert all(np.array_equal(a, b) for a, b in zip(xs_a, xs_b))
    assert [s.coin for s in stats_a] == [s.coin for s in stats_b]


def test_scaled_unbiased_allowed_in_ef21():
    objectives = _logistic_objectives(2)
    hp = HyperParams(gamma=0.02, uplink=ScaledUnbiased(RandK(1)),
                     aggregator=Mean())
    xs, _, _, _ = drive("ef21", objectives, [0, 1], None, hp, 5, np.zeros(4))
    assert np.all(np.isfinite(xs[-1]))


# -- stepsize theory ---------------------------------------------------------


def _si(**kw):
    base = dict(consts=SmoothnessConstants(L=2.0, L_pm=1.0, calL_pm=3.0, mu=0.0),
                omega=4.0, c=1.0, delta=0.1, G=10, b=5, m=100, p=0.2, a=0.5)
    base.update(kw)
    return StepsizeInputs(**base)


def test_stepsize_marina2_p_one_gives_inverse_L():
    si = _si(p=1.0)
    assert stepsize_marina2(si) == pytest.approx(1.0 / 2.0)


def test_stepsize_marina2_closed_form_delta_zero_single_worker():
    si = _si(delta=0.0, G=1)
    calL_sq = 9.0
    core = 4.0 * (calL_sq / 5 + 1.0 + 4.0) + calL_sq / 5
    eta = ((1 - 0.2) / 0.2) * core
    assert stepsize_marina2(si) == pytest.approx(1.0 / (2.0 + math.sqrt(eta)))


def test_stepsize_dasha_identity_compressor():
    si = _si(omega=0.0)
    bracket = (math.sqrt(1 / 10) + math.sqrt(8 * 0.1)) ** 2
    eta = ((1 - 0.2) / 5) * (2 / 0.2) * 9.0 * bracket
    assert stepsize_dasha(si) == pytest.approx(1.0 / (2.0 + math.sqrt(eta)))
    assert stepsize_dasha(_si(omega=0.0, p=1.0)) == pytest.approx(0.5)


def test_stepsize_ef21bc_plugin():
    si = _si(alpha_D=1.0, alpha_P=1.0, delta=0.0)
    eta = 192.0 * (1.0 + 4.0)
    assert stepsize_ef21bc(si) == pytest.approx(1.0 / (2.0 + math.sqrt(eta)))
    si2 = _si(alpha_D=0.5, alpha_P=1.0, delta=0.0)
    eta2 = (32.0 / 0.25) * 6.0 * 5.0
    assert stepsize_ef21bc(si2) == pytest.approx(1.0 / (2.0 + math.sqrt(eta2)))


def test_stepsize_ef21bc_monotone_in_alpha_d():
    lo = stepsize_ef21bc(_si(alpha_D=1.0 / 68.0, alpha_P=1.0, delta=3 / 16))
    hi = stepsize_ef21bc(_si(alpha_D=2.0 / 68.0, alpha_P=1.0, delta=3 / 16))
    assert 0 < lo < hi


def test_baseline_smaller_than_marina2():
    si = _si()
    assert stepsize_marina(si) < stepsize_marina2(si)


def test_delta_tolerance_values():
    assert delta_tolerance("marina2", c=1.0, B=0.0, G=10) == math.inf
    assert delta_tolerance("marina2", c=1.0, B=1.0, G=10) == pytest.approx(1 / 12)
    assert delta_tolerance("dasha", c=1.0, B=1.0, G=10) == pytest.approx(1 / 12)
    assert delta_tolerance("ef21", c=1.0, B=1.0, G=10) == pytest.approx(1 / 32)
    assert delta_tolerance("marina", c=1.0, B=1.0, G=10, p=0.1) == pytest.approx(1 / 120)


def test_delta_tolerance_enforced():
    si = _si(B=1.0, delta=0.2)  # bound is 1/12
    with pytest.raises(DeltaToleranceError):
        stepsize_marina2(si)


def test_stepsize_pl_examples():
    consts = SmoothnessConstants(L=2.0, L_pm=1.0, calL_pm=3.0, mu=0.3)
    si = _si(consts=consts, p=1.0)
    assert stepsize_pl("marina2", si) == pytest.approx(min(0.5, 1.0 / 0.6))
    # mu -> 0+: the smoothness branch wins.
    tiny = SmoothnessConstants(L=2.0, L_pm=1.0, calL_pm=3.0, mu=1e-12)
    si_tiny = _si(consts=tiny, p=0.2)
    eta = 2 * ((1 - 0.2) / 0.2) * (4 * (9 / 5 + 1 + 4) + 9 / 5) \
        * (math.sqrt(0.1) + math.sqrt(0.8)) ** 2
    assert stepsize_pl("marina2", si_tiny) == pytest.approx(1 / (2 + math.sqrt(eta)))


def test_stepsize_pl_not_larger_than_nonconvex_smoothness_branch():
    consts = SmoothnessConstants(L=2.0, L_pm=1.0, calL_pm=3.0, mu=0.1)
    for algo in ("marina2", "dasha", "ef21bc"):
        si = _si(consts=consts, alpha_D=0.5, alpha_P=0.5,
                 a=default_momentum(4.0))
        assert stepsize_pl(algo, si) <= stepsize_nonconvex(algo, si) + 1e-15


def test_stepsize_pl_requires_positive_mu():
    with pytest.raises(ValueError, match="non-convex"):
        stepsize_pl("marina2", _si())


def test_default_p():
    assert default_p("marina2", omega=9.0, b=1, m=100) == pytest.approx(0.01)
    assert default_p("marina2", omega=9.0, b=50, m=100) == pytest.approx(0.1)
    assert default_p("dasha", omega=9.0, b=2, m=100) == pytest.approx(0.02)
    assert default_p("ef21", omega=0.0, b=1, m=1) == 1.0


def test_homogeneous_robustness_all_algorithms_all_attacks():
    # Identical shards, theoretical stepsizes, robust aggregation: every
    # method drives the gradient below 1e-3 under every attack.  Round
    # budgets scale with each method's theoretical rate.
    from byzsim.harness import ExperimentConfig, run

    base = dict(dataset="synthetic", synthetic_samples=300,
                synthetic_features=20, n=10, n_byz=2, partition="homogeneous",
                regularizer="nonconvex", lam=0.1, aggregator="cm", seed=4,
                metrics_every=20, stepsize_mode="theoretical")
    plans = {
        "marina": dict(compressor="randk", k=10, batch=30, rounds=3000),
        "marina2": dict(compressor="randk", k=2, rounds=1500),
        "dasha": dict(compressor="randk", k=2, rounds=1500),
        "ef21": dict(compressor="topk", k=8, rounds=1500),
        "ef21bc": dict(compressor="topk", k=8, downlink_compressor="topk",
                       downlink_k=10, rounds=2500),
    }
    for algo, plan in plans.items():
        for attack in ("bf", "lf", "ipm", "alie"):
            res = run(ExperimentConfig(algo=algo, attack=attack, **plan, **base))
            best = min(r.grad_norm_sq for r in res.rows)
            assert best < 1e-3, (algo, attack, best)

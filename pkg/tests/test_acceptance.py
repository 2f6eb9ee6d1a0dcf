"""Acceptance suite: one test per release criterion, each emitting a PASS/FAIL
line into the pytest summary (see conftest.record).

The training-backed criteria run real desk-scale training on one CPU core;
the whole module is sized to finish in well under an hour.
"""

import itertools
import math
import struct
import threading
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from conftest import record
from swarmlab import broker as B
from swarmlab import cli
from swarmlab import encoder as enc
from swarmlab import envs as E
from swarmlab import mpc as M
from swarmlab import trainer as T
from swarmlab import world as w


def _small_gee(rng, n_cats=2, ego_dim=6):
    cats = tuple(enc.CategorySpec(f"cat{e}", int(rng.integers(3, 8)),
                                  hidden=(16,), feat_dim=6)
                 for e in range(n_cats))
    return enc.GeeConfig(ego_dim=ego_dim, categories=cats, trunk_hidden=(16,))


def _random_obs(cfg, rng, counts):
    cats = {spec.name: rng.normal(size=(n, spec.input_dim))
            for spec, n in zip(cfg.categories, counts)}
    return enc.ObservationBundle(ego=rng.normal(size=cfg.ego_dim),
                                 categories=cats)


# --- 1: permutation invariance ------------------------------------------------

def test_criterion_01_permutation_invariance():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    failures = 0
    for trial in range(1000):
        cfg = _small_gee(rng)
        params = enc.init_params(cfg, rng)
        counts = [int(rng.integers(0, 11)) for _ in cfg.categories]
        obs = _random_obs(cfg, rng, counts)
        a0, b0, v0, _ = enc.forward(params, obs)
        shuffled = {name: mat[rng.permutation(mat.shape[0])]
                    for name, mat in obs.categories.items()}
        a1, b1, v1, _ = enc.forward(
            params, enc.ObservationBundle(ego=obs.ego, categories=shuffled))
        if not (np.array_equal(a0, a1) and np.array_equal(b0, b1) and v0 == v1):
            failures += 1
    runtime = time.perf_counter() - t0
    ok = failures == 0 and runtime < 10.0
    line = record(1, "permutation invariance (1000 draws, bit-exact)", ok,
                  f"failures={failures}, {runtime:.1f}s")
    assert ok, line


# --- 2: empty-set handling ------------------------------------------------------

def test_criterion_02_empty_set_handling():
    rng = np.random.default_rng(102)
    # soccer observation with zero opponents
    ep = E.EpisodeConfig("soccer", n_agents=2, n_opponents=0, time_limit=10.0)
    env = E.Environment(ep)
    env.reset(rng)
    cfg = E.make_gee_config(ep, (16,), 8, (16,))
    params = enc.init_params(cfg, rng)
    obs = env.observe(0)
    assert obs.categories["opponents"].shape[0] == 0
    alpha, beta, value, cache = enc.forward(params, obs)
    act = enc.scale_action(enc.beta_mean(alpha, beta), cfg.action_bounds)
    valid_soccer = (np.all(np.isfinite(act)) and math.isfinite(value)
                    and all(lo <= a <= hi for a, (lo, hi)
                            in zip(act, cfg.action_bounds)))
    # the opponents pooled block (last category) is exactly the zero vector
    width = cfg.pooled_dim(1)
    pooled_zero = np.array_equal(cache.trunk_in[-width:], np.zeros(width))

    # broker degraded mode: agent keeps producing commands with no broker
    cen = E.EpisodeConfig("centroid", n_agents=2, time_limit=10.0)
    env2 = E.Environment(cen)
    env2.reset(rng)
    adapter = E.BrokerEnvAdapter(env2)
    cen_cfg = E.make_gee_config(cen, (16,), 8, (16,))
    cen_params = enc.init_params(cen_cfg, rng)
    B.run_agent(0, cen_params, adapter, ("127.0.0.1", 1), steps=2)
    cmd = adapter.pending.get(0)
    degraded_ok = (cmd is not None and abs(cmd.vx_b) <= 2.0
                   and abs(cmd.vy_b) <= 1.0 and abs(cmd.wz) <= 1.5)

    ok = valid_soccer and pooled_zero and degraded_ok
    line = record(2, "empty-set handling (0 opponents, degraded broker)", ok,
                  f"soccer={valid_soccer} pooled_zero={pooled_zero} "
                  f"degraded={degraded_ok}")
    assert ok, line


# --- 3: Beta policy correctness --------------------------------------------------

def test_criterion_03_beta_correctness():
    quad_ok = True
    for a in (1.01, 1.5, 3.0, 8.0):
        for b in (1.01, 2.0, 5.0, 10.0):
            pdf = lambda x: math.exp(
                enc.beta_logprob(np.array([a]), np.array([b]), np.array([x])))
            total, _ = integrate.quad(pdf, 0.0, 1.0, limit=200)
            quad_ok &= abs(total - 1.0) <= 1e-6
    mean_ok = enc.beta_mean(np.array([3.0]), np.array([1.0]))[0] == 0.75

    rng = np.random.default_rng(103)
    samples = np.array([enc.beta_sample(np.array([2.0]), np.array([5.0]), rng)[0]
                        for _ in range(1_000_000)])
    in_interval = bool(np.all((samples > 0.0) & (samples < 1.0)))
    sigma = math.sqrt(2 * 5 / ((7.0 ** 2) * 8.0)) / math.sqrt(samples.size)
    emp_ok = abs(samples.mean() - 2.0 / 7.0) < 3 * sigma

    bounds = ((-2.0, 2.0), (-1.0, 1.0), (-1.5, 1.5))
    bounds_ok = True
    for _ in range(200):
        al = 1.0 + rng.exponential(2.0, size=3)
        be = 1.0 + rng.exponential(2.0, size=3)
        act = enc.deterministic_action(al, be, bounds)
        bounds_ok &= all(lo <= v <= hi for v, (lo, hi) in zip(act, bounds))

    ok = quad_ok and mean_ok and in_interval and emp_ok and bounds_ok
    line = record(3, "Beta policy (quadrature, mean, sampling, bounds)", ok,
                  f"quad={quad_ok} mean={mean_ok} interval={in_interval} "
                  f"empirical={emp_ok} bounds={bounds_ok}")
    assert ok, line


# --- 4: gradient oracles ---------------------------------------------------------

def test_criterion_04_gradient_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)

    # full policy-loss gradient vs central differences (rel err < 1e-4)
    ep = E.EpisodeConfig("centroid", n_agents=3, time_limit=10.0)
    env = E.Environment(ep)
    env.reset(rng)
    gee = E.make_gee_config(ep, (32,), 16, (64,))
    params = enc.init_params(gee, rng)
    obs = env.observe(0)
    alpha, beta, _, _ = enc.forward(params, obs)
    u = enc.beta_sample(alpha, beta, rng)
    logp_old = enc.beta_logprob(alpha, beta, u) + 0.1
    tc = T.TrainConfig()
    grads = enc.zeros_like_params(params)
    T.sample_loss_and_grads(params, obs, u, logp_old, 0.8, 0.3, tc, grads, 1.0)
    g_an = enc.params_to_flat(grads)
    flat0 = enc.params_to_flat(params)

    def loss_at(flat):
        p = enc.flat_to_params(flat, params)
        return T.sample_loss_and_grads(p, obs, u, logp_old, 0.8, 0.3, tc,
                                       enc.zeros_like_params(p), 1.0)[0]

    idx = rng.choice(flat0.size, size=60, replace=False)
    fd_vec = np.zeros(idx.size)
    h = 1e-6
    for n, j in enumerate(idx):
        fp = flat0.copy(); fp[j] += h
        fm = flat0.copy(); fm[j] -= h
        fd_vec[n] = (loss_at(fp) - loss_at(fm)) / (2 * h)
    policy_err = (np.linalg.norm(fd_vec - g_an[idx])
                  / max(np.linalg.norm(fd_vec), 1e-12))

    # MPC objective gradient vs central differences (rel err < 1e-6)
    mp = M.MpcParams()
    x0 = rng.normal(size=(3, 6))
    uu = 0.1 * rng.normal(size=(mp.horizon, 3, 3))
    x_ref = M.make_references(x0, np.zeros(2), mp)
    a_mat, b_mat = M.build_dynamics(mp.dt)

    def obj(u_arr):
        states = M.rollout(x0, u_arr, a_mat, b_mat)
        return M.cost(states, u_arr, np.zeros(2), np.zeros(2), x_ref, mp,
                      smooth=True)

    states = M.rollout(x0, uu, a_mat, b_mat)
    d_states, d_inputs = M.cost_grads(states, uu, np.zeros(2), np.zeros(2),
                                      x_ref, mp)
    g_mpc = M._adjoint_to_inputs(d_states, d_inputs, a_mat, b_mat).reshape(-1)
    flat = uu.reshape(-1)
    mpc_err = 0.0
    hh = 1e-5
    for j in rng.choice(flat.size, size=60, replace=False):
        e = np.zeros_like(flat); e[j] = hh
        fd = (obj((flat + e).reshape(uu.shape))
              - obj((flat - e).reshape(uu.shape))) / (2 * hh)
        mpc_err = max(mpc_err, abs(fd - g_mpc[j]) / max(1.0, abs(fd)))

    runtime = time.perf_counter() - t0
    ok = policy_err < 1e-4 and mpc_err < 1e-6 and runtime < 60.0
    line = record(4, "gradient oracles (policy < 1e-4, control < 1e-6)", ok,
                  f"policy={policy_err:.2e} mpc={mpc_err:.2e} {runtime:.1f}s")
    assert ok, line


# --- 5: max-pool subgradient ------------------------------------------------------

def test_criterion_05_maxpool_subgradient():
    rng = np.random.default_rng(105)
    cfg = _small_gee(rng, n_cats=1)
    params = enc.init_params(cfg, rng)
    obs = _random_obs(cfg, rng, [6])
    a0, b0, v0, cache = enc.forward(params, obs)
    am = cache.argmax[0]
    losers = [i for i in range(6) if i not in set(am.tolist())]
    # perturbing a never-selected entity leaves the outputs bit-identical,
    # i.e. its subgradient is exactly zero in every feature dimension
    zero_grad = True
    if losers:
        mat = obs.categories[cfg.categories[0].name].copy()
        mat[losers[0]] += 1e-9 * rng.normal(size=mat.shape[1])
        a1, b1, v1, _ = enc.forward(params, enc.ObservationBundle(
            ego=obs.ego, categories={cfg.categories[0].name: mat}))
        zero_grad = (np.array_equal(a0, a1) and np.array_equal(b0, b1)
                     and v0 == v1)
    # routed pooled gradient is zero off the argmax rows by construction
    feats = rng.normal(size=(5, 4))
    am2 = np.argmax(feats, axis=0)
    d_pooled = rng.normal(size=4)
    d_feats = np.zeros((5, 4))
    d_feats[am2, np.arange(4)] = d_pooled
    routing_ok = all(np.all(d_feats[i] == 0.0)
                     for i in range(5) if i not in set(am2.tolist()))
    # exact tie breaks to the lowest entity index
    dup = np.array([[1.0, 2.0], [1.0, 2.0], [0.5, 2.0]])
    tie_ok = bool(np.all(np.argmax(dup, axis=0) == 0))
    obs_tie = enc.ObservationBundle(
        ego=np.zeros(cfg.ego_dim),
        categories={cfg.categories[0].name: np.tile(
            rng.normal(size=(1, cfg.categories[0].input_dim)), (3, 1))})
    _, _, _, cache_tie = enc.forward(params, obs_tie)
    tie_ok &= bool(np.all(cache_tie.argmax[0] == 0))

    ok = zero_grad and routing_ok and tie_ok and len(losers) > 0
    line = record(5, "max-pool subgradient (zeros off argmax, ties to lowest)",
                  ok, f"zero={zero_grad} routing={routing_ok} tie={tie_ok}")
    assert ok, line


# --- 6: reward table fidelity -----------------------------------------------------

def _ag(x, y, yaw=0.0, vx=0.0, vy=0.0):
    return w.Agent(w.Pose2(x, y, yaw), w.Twist2(vx, vy, 0.0))


def test_criterion_06_reward_table_fidelity():
    checks = []
    tol = 1e-12

    nav = E.EpisodeConfig("navigation", n_agents=2, n_goals=2)
    ws = w.WorldState(agents=[_ag(0, 0), _ag(10, 0)],
                      goals=[w.Goal(0, 0), w.Goal(3, 4)])
    checks.append(abs(E.reward(ws, ws, nav, E.Outcome.RUNNING)
                      - (5.0 + 5.0 * math.exp(-25.0))) <= tol)
    nav1 = E.EpisodeConfig("navigation", n_agents=2, n_goals=1)
    ws2 = w.WorldState(agents=[_ag(0, 0, vx=0.5), _ag(20, 0, vx=2.0)],
                       goals=[w.Goal(100, 100, reached=True)])
    checks.append(abs(E.reward(ws2, ws2, nav1, E.Outcome.RUNNING) - 0.75) <= tol)
    ws3 = w.WorldState(agents=[_ag(0, 0), _ag(0.8, 0)],
                       goals=[w.Goal(50, 50, reached=True)])
    checks.append(abs(E.reward(ws3, ws3, nav1, E.Outcome.RUNNING) + 3.0) <= tol)
    checks.append(abs(E.reward(ws, ws, nav, E.Outcome.SUCCESS)
                      - E.reward(ws, ws, nav, E.Outcome.RUNNING) - 10.0) <= tol)

    pk1 = E.EpisodeConfig("packing", n_agents=1, n_boxes=1)
    wp = w.WorldState(agents=[_ag(5, 5)], boxes=[w.Box(w.Pose2(0, 0, 0))])
    checks.append(abs(E.reward(wp, wp, pk1, E.Outcome.RUNNING) - 0.75) <= tol)
    wp2 = w.WorldState(agents=[_ag(8, 8)],
                       boxes=[w.Box(w.Pose2(3, 0, 0), w.Twist2(-2, 0, 0))])
    checks.append(abs(E.reward(wp2, wp2, pk1, E.Outcome.RUNNING)
                      - (0.2 + 0.5 * math.exp(-9.0))) <= tol)
    pk2 = E.EpisodeConfig("packing", n_agents=1, n_boxes=2)
    wp3 = w.WorldState(agents=[_ag(8, 8)],
                       boxes=[w.Box(w.Pose2(1, 0, 0)), w.Box(w.Pose2(5, 0, 0))])
    expected = 0.125 + 0.5 * (math.exp(-1.0) + math.exp(-25.0))
    checks.append(abs(E.reward(wp3, wp3, pk2, E.Outcome.RUNNING) - expected) <= tol)
    checks.append(abs(E.reward(wp3, wp3, pk2, E.Outcome.SUCCESS)
                      - E.reward(wp3, wp3, pk2, E.Outcome.RUNNING) - 5.0) <= tol)

    sc = E.EpisodeConfig("soccer", n_agents=1, n_opponents=1)
    wsoc = w.WorldState(agents=[_ag(-7, 0), _ag(7, 0, math.pi)],
                        ball=w.Ball(6.0, 0.0, 1.5, 0.0))
    checks.append(abs(E.reward(wsoc, wsoc, sc, E.Outcome.RUNNING)
                      - (1.5 + 0.25 * math.exp(-4.0))) <= tol)
    sc0 = E.EpisodeConfig("soccer", n_agents=1, n_opponents=0)
    wsoc2 = w.WorldState(agents=[_ag(-7, 0)], ball=w.Ball(0, 0, 0, 0))
    checks.append(abs(E.reward(wsoc2, wsoc2, sc0, E.Outcome.RUNNING)
                      - 0.25 * math.exp(-64.0)) <= tol)
    checks.append(abs(E.reward(wsoc, wsoc, sc, E.Outcome.SUCCESS)
                      - E.reward(wsoc, wsoc, sc, E.Outcome.RUNNING) - 5.0) <= tol)
    checks.append(abs(E.reward(wsoc, wsoc, sc, E.Outcome.FAILURE)
                      - E.reward(wsoc, wsoc, sc, E.Outcome.RUNNING) + 5.0) <= tol)

    ok = all(checks)
    line = record(6, "reward table fidelity (hand states, 1e-12)", ok,
                  f"{sum(checks)}/{len(checks)} states exact")
    assert ok, line


# --- 7: curriculum transitions -----------------------------------------------------

def test_criterion_07_curriculum():
    checks = [
        E.update_curriculum(E.CurriculumState(9.5, 9.5), "packing",
                            E.Outcome.SUCCESS) == E.CurriculumState(10.0, 10.0),
        E.update_curriculum(E.CurriculumState(10.0, 10.0), "packing",
                            E.Outcome.SUCCESS) == E.CurriculumState(10.0, 10.0),
        E.update_curriculum(E.CurriculumState(5.0, 4.0), "packing",
                            E.Outcome.FAILURE) == E.CurriculumState(4.0, 3.0),
        E.update_curriculum(E.CurriculumState(2.0, 1.5), "packing",
                            E.Outcome.FAILURE) == E.CurriculumState(2.0, 1.5),
        E.update_curriculum(E.CurriculumState(difficulty=3), "navigation",
                            E.Outcome.SUCCESS).difficulty == 4,
        E.update_curriculum(E.CurriculumState(difficulty=0), "navigation",
                            E.Outcome.FAILURE, goals_reached=0).difficulty == 0,
    ]
    ok = all(checks)
    line = record(7, "curriculum transitions at caps and floors", ok,
                  f"{sum(checks)}/{len(checks)} transitions exact")
    assert ok, line


# --- 8: MPC dynamics and feasibility -----------------------------------------------

def test_criterion_08_mpc_dynamics_and_feasibility():
    mp = M.MpcParams()
    dt = mp.dt
    a, b = M.build_dynamics(dt)
    a_expect = np.eye(6)
    a_expect[0, 3] = a_expect[1, 4] = a_expect[2, 5] = dt
    b_expect = np.zeros((6, 3))
    b_expect[0, 0] = b_expect[1, 1] = b_expect[2, 2] = dt * dt
    b_expect[3, 0] = b_expect[4, 1] = b_expect[5, 2] = dt
    ab_ok = (np.max(np.abs(a - a_expect)) <= 1e-15
             and np.max(np.abs(b - b_expect)) <= 1e-15)

    tight = replace(mp, viol_tol=1e-7)
    min_dist = math.inf
    vel_excess = -math.inf
    all_converged = True
    for seed in (0, 1, 2):
        pos = M.sample_positions(4, seed, 2 * tight.rho + 0.1)
        x0 = np.zeros((4, 6))
        x0[:, 0:2] = pos
        x_ref = M.make_references(x0, np.zeros(2), tight)
        sol = M.solve(x0, np.zeros(2), np.zeros(2), x_ref, tight)
        all_converged &= sol.converged
        p = sol.states[1:, :, 0:2]
        for i, j in itertools.combinations(range(4), 2):
            min_dist = min(min_dist,
                           float(np.min(np.linalg.norm(p[:, i] - p[:, j], axis=1))))
        yaw = sol.states[1:, :, 2]
        vx, vy = sol.states[1:, :, 3], sol.states[1:, :, 4]
        f_fwd = np.cos(yaw) * vx + np.sin(yaw) * vy
        f_lat = -np.sin(yaw) * vx + np.cos(yaw) * vy
        vel_excess = max(vel_excess,
                         float(np.max(np.abs(f_fwd)) - tight.v_max_x),
                         float(np.max(np.abs(f_lat)) - tight.v_max_y),
                         float(np.max(np.abs(sol.states[1:, :, 5])) - tight.w_max))
    ok = (ab_ok and all_converged and min_dist >= 2 * mp.rho - 1e-3
          and vel_excess <= 1e-6)
    line = record(8, "control dynamics exact; distance/velocity feasibility", ok,
                  f"AB={ab_ok} min_dist={min_dist:.3f}>=1.597 "
                  f"vel_excess={vel_excess:.2e}")
    assert ok, line


# --- 9: closed-loop centroid control -----------------------------------------------

@pytest.fixture(scope="module")
def mpc_episodes():
    mp = M.MpcParams()
    results = []
    t0 = time.perf_counter()
    for seed in range(10):
        results.append(M.run_centroid_episode(4, seed, mp, duration=20.0))
    return results, time.perf_counter() - t0


def test_criterion_09_mpc_centroid_episodes(mpc_episodes):
    results, runtime = mpc_episodes
    settled = all(r["settled"] for r in results)
    max_settle = max(r["settling_time"] for r in results)
    max_track = max(r["tracking_error"] for r in results)
    ok = settled and max_settle <= 12.0 and max_track <= 0.05 and runtime < 600
    line = record(9, "closed-loop centroid control, 10 seeded instances", ok,
                  f"settle<={max_settle:.2f}s track<={max_track:.4f}m "
                  f"{runtime:.0f}s total")
    assert ok, line


# --- 10: scalability contrast -------------------------------------------------------

def test_criterion_10_scalability(mpc_episodes):
    results, _ = mpc_episodes
    t4 = float(np.mean([r["mean_solve_time_ms"] for r in results]))
    mp = M.MpcParams()
    t10 = float(np.mean([M.run_centroid_episode(10, s, mp, duration=6.0)
                         ["mean_solve_time_ms"] for s in (0, 1)]))
    mpc_ratio = t10 / t4

    rng = np.random.default_rng(110)
    def per_agent_time(n_agents):
        ep = E.EpisodeConfig("centroid", n_agents=n_agents, time_limit=20.0)
        params = enc.init_params(E.make_gee_config(ep), rng)
        env = E.Environment(ep)
        env.reset(np.random.default_rng(1))
        obs = env.observe(0)
        ts = []
        for _ in range(400):
            t0 = time.perf_counter()
            enc.forward(params, obs)
            ts.append(time.perf_counter() - t0)
        return float(np.median(ts))

    rl_ratio = per_agent_time(16) / per_agent_time(2)
    ok = mpc_ratio >= 3.0 and rl_ratio < 2.0
    line = record(10, "scalability (central solver grows, policy ~constant)",
                  ok, f"solver 10v4 robots {mpc_ratio:.1f}x (>=3), "
                  f"policy 16v2 entities {rl_ratio:.2f}x (<2)")
    assert ok, line


# --- 11: desk-scale centroid training -----------------------------------------------

CENTROID_TRAIN = dict(iterations=150, n_envs=8, horizon=64, minibatch_size=256,
                      epochs=4, lr=1e-3, enc_hidden=(32,), feat_dim=16,
                      trunk_hidden=(64,), time_limit=20.0)


@pytest.fixture(scope="module")
def centroid_policy(tmp_path_factory):
    out = tmp_path_factory.mktemp("centroid_train")
    t0 = time.perf_counter()
    res = T.train("centroid", T.TrainConfig(**CENTROID_TRAIN), seed=0, out_dir=out)
    return res, time.perf_counter() - t0


def test_criterion_11_centroid_training(centroid_policy):
    res, train_time = centroid_policy
    ep4 = E.EpisodeConfig("centroid", n_agents=4, time_limit=20.0)
    rate4, _ = T.evaluate("centroid", res.params, ep4, episodes=100, seed=9000)
    ep10 = E.EpisodeConfig("centroid", n_agents=10, time_limit=20.0)
    rate10, _ = T.evaluate("centroid", res.params, ep10, episodes=100, seed=9100)
    ok = rate4 >= 0.80 and rate10 >= 0.50 and train_time < 7200
    line = record(11, "trained centroid policy (4-robot and 10-robot zero-shot)",
                  ok, f"4-robot {rate4:.0%} (>=80%), 10-robot {rate10:.0%} "
                  f"(>=50%), trained in {train_time/60:.1f} min")
    assert ok, line


# --- 12: packing trend ---------------------------------------------------------------

# Training uses single-robot single-box episodes for clean credit assignment; the
# trained policy is then evaluated zero-shot on the multi-robot / multi-box grid.
PACKING_TRAIN = dict(iterations=800, n_envs=8, horizon=64, minibatch_size=256,
                     epochs=4, lr=1e-3, enc_hidden=(32,), feat_dim=16,
                     trunk_hidden=(64,), time_limit=20.0)
PACKING_TRAIN_OVERRIDES = {"n_agents": 1, "n_boxes": 1}
PACKING_EVAL_CURRICULUM = E.CurriculumState(3.0, 2.5)


def _packing_cell(params, n_robots, n_boxes, episodes, seed):
    ep = E.EpisodeConfig("packing", n_agents=n_robots, n_boxes=n_boxes,
                         time_limit=45.0)
    env = E.Environment(ep, PACKING_EVAL_CURRICULUM)
    rng = np.random.default_rng(seed)
    succ, times = 0, []
    for _ in range(episodes):
        out, t, _ = T.run_episode(env, params, rng)
        if out == E.Outcome.SUCCESS:
            succ += 1
            times.append(t)
        else:
            times.append(ep.time_limit)  # timeouts counted at the limit (censored mean)
    return succ / episodes, float(np.mean(times))


def test_criterion_12_packing_trend(tmp_path_factory):
    out = tmp_path_factory.mktemp("packing_train")
    res = T.train("packing", T.TrainConfig(**PACKING_TRAIN), seed=0, out_dir=out,
                  env_overrides=PACKING_TRAIN_OVERRIDES)
    r14, _ = _packing_cell(res.params, 1, 4, 50, 9200)
    r44, _ = _packing_cell(res.params, 4, 4, 50, 9200)
    r11, t11 = _packing_cell(res.params, 1, 1, 50, 9300)
    r41, t41 = _packing_cell(res.params, 4, 1, 50, 9300)
    nontrivial = r41 > 0.0 and r11 > 0.0
    ok = r44 >= r14 and t41 <= t11 and nontrivial
    line = record(12, "packing trend (more robots help)", ok,
                  f"success 4r4b {r44:.0%} >= 1r4b {r14:.0%}; "
                  f"time 4r1b {t41:.1f}s <= 1r1b {t11:.1f}s "
                  f"(success 4r1b {r41:.0%}, 1r1b {r11:.0%})")
    assert ok, line


# --- 13: pooled encoder vs fixed-width concatenation ---------------------------------

def test_criterion_13_gee_vs_concat(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    base = dict(CENTROID_TRAIN)
    results = {}
    for name in ("gee", "concat"):
        kw = dict(base)
        if name == "concat":
            kw.update(aggregator="concat", max_entities=(4,))
        res = T.train("centroid", T.TrainConfig(**kw), seed=0,
                      out_dir=out / name, env_overrides={"n_agents": 4})
        results[name] = res

    ep4 = E.EpisodeConfig("centroid", n_agents=4, time_limit=20.0)
    rate = {name: T.evaluate("centroid", res.params, ep4, episodes=50,
                             seed=9400)[0]
            for name, res in results.items()}

    ep9 = E.EpisodeConfig("centroid", n_agents=9, time_limit=20.0)  # 8 entities
    try:
        T.evaluate("centroid", results["concat"].params, ep9, episodes=1,
                   seed=9500)
        concat_rejects = False
    except enc.CapacityError:
        concat_rejects = True
    rate9, _ = T.evaluate("centroid", results["gee"].params, ep9, episodes=50,
                          seed=9500)

    within_5 = rate["gee"] >= rate["concat"] - 0.05
    ok = concat_rejects and within_5
    line = record(13, "pooled encoder vs fixed-width concat", ok,
                  f"concat rejects 8 entities={concat_rejects}; in-capacity "
                  f"gee {rate['gee']:.0%} vs concat {rate['concat']:.0%} "
                  f"(gap<=5pts); gee 8-entity {rate9:.0%}")
    assert ok, line


# --- 14: broker ------------------------------------------------------------------------

def test_criterion_14_broker():
    # (a) 1e5-frame fuzzing: malformed input only ever raises FrameError
    rng = np.random.default_rng(114)
    base = B.encode_frame(B.MSG_PUT, B.encode_put_body(
        B.RobotMessage(3, 10, 50, B.payload_from_vector(np.array([1.0, 2.0])))))
    crashes = 0
    for k in range(100_000):
        if k % 2 == 0:
            n = int(rng.integers(0, 60))
            data = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        else:
            buf = bytearray(base)
            for _ in range(int(rng.integers(1, 4))):
                buf[int(rng.integers(0, len(buf)))] = int(rng.integers(0, 256))
            data = bytes(buf)
        try:
            B.decode_frame(data)
        except B.FrameError:
            pass
        except Exception:
            crashes += 1
    fuzz_ok = crashes == 0

    # (b) 1e5 concurrent register operations from 8 clients, checked for
    # last-write-wins linearizability per robot id
    server = B.BrokerServer().start()
    n_clients, ops_each, n_ids = 8, 12_500, 4
    violations = []
    # every k % 5 == 4 slot is a GET; the rest are PUTs with a globally
    # unique sequence number seq = k * n_clients + cid + 1
    payload_of = {}  # (rid, seq) -> payload value, filled before threads start
    top_seq = {rid: 0 for rid in range(n_ids)}
    for c in range(n_clients):
        for k in range(ops_each):
            if k % 5 == 4:
                continue
            rid, seq = k % n_ids, k * n_clients + c + 1
            payload_of[(rid, seq)] = float(seq)
            top_seq[rid] = max(top_seq[rid], seq)

    def client_worker(cid):
        cl = B.BrokerClient(server.address)
        last_seen = {}
        try:
            for k in range(ops_each):
                rid = k % n_ids
                if k % 5 == 4:
                    snap = cl.get([rid])
                    if rid in snap:
                        m = snap[rid]
                        if m.vector()[0] != payload_of.get((rid, m.seq)):
                            violations.append(("phantom", rid, m.seq))
                        if m.seq < last_seen.get(rid, 0):
                            violations.append(("regress", rid, m.seq))
                        last_seen[rid] = m.seq
                else:
                    seq = k * n_clients + cid + 1
                    stored = cl.put(B.RobotMessage(
                        rid, seq, 0, B.payload_from_vector(
                            np.array([payload_of[(rid, seq)]]))))
                    if stored < seq or stored < last_seen.get(rid, 0):
                        violations.append(("stale-ack", rid, seq, stored))
                    last_seen[rid] = stored
        finally:
            cl.close()

    threads = [threading.Thread(target=client_worker, args=(c,))
               for c in range(n_clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    cl = B.BrokerClient(server.address)
    final = cl.get()
    cl.close()
    for rid in range(n_ids):
        if final[rid].seq != top_seq[rid]:
            violations.append(("final", rid, final[rid].seq, top_seq[rid]))
    linearizable = not violations
    server.close()
    server = B.BrokerServer().start()  # fresh register state for lockstep

    # (c) lockstep broker-mediated execution equals in-process execution
    cen = E.EpisodeConfig("centroid", n_agents=3, time_limit=60.0)
    rng2 = np.random.default_rng(7)
    gee = E.make_gee_config(cen, (8,), 4, (8,))
    params = enc.init_params(gee, rng2)
    env_ref = E.Environment(cen)
    env_ref.reset(np.random.default_rng(100))
    env_brk = E.Environment(cen)
    env_brk.reset(np.random.default_rng(100))
    steps = 6
    ref_traj = []
    for _ in range(steps):
        cmds = []
        for a in range(3):
            alpha, beta, _, _ = enc.forward(params, env_ref.observe(a))
            cmds.append(w.BodyCommand(*enc.deterministic_action(
                alpha, beta, params.config.action_bounds)))
        env_ref.step(cmds)
        ref_traj.append([(ag.pose.x, ag.pose.y, ag.pose.yaw) for ag in
                         env_ref.world.agents])
    adapter = E.BrokerEnvAdapter(env_brk)
    brk_traj = []

    def advance():
        adapter.step_if_complete()
        brk_traj.append([(ag.pose.x, ag.pose.y, ag.pose.yaw) for ag in
                         env_brk.world.agents])

    pub = threading.Barrier(3)
    stp = threading.Barrier(3, action=advance)
    agents = [threading.Thread(
        target=B.run_agent, args=(rid, params, adapter, server.address, steps),
        kwargs={"sync": stp.wait, "publish_sync": pub.wait})
        for rid in range(3)]
    for t in agents:
        t.start()
    for t in agents:
        t.join()
    server.close()
    lockstep_ok = brk_traj == ref_traj

    ok = fuzz_ok and linearizable and lockstep_ok
    line = record(14, "broker (fuzz 1e5, linearizable 1e5 ops, lockstep)", ok,
                  f"fuzz_crashes={crashes} violations={len(violations)} "
                  f"lockstep={lockstep_ok}")
    assert ok, line


# --- 15: byte-identical determinism ----------------------------------------------------

TINY_INI = """\
[train]
iterations = 1
n_envs = 2
horizon = 6
minibatch_size = 8
epochs = 1
enc_hidden = 8
feat_dim = 4
trunk_hidden = 8
time_limit = 5
"""


def test_criterion_15_determinism(tmp_path):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)
    details = []

    def run(subcmd_args, out_name):
        outs = []
        for rep in ("x", "y"):
            outdir = tmp_path / f"{out_name}_{rep}"
            rc = cli.main(["--config", str(ini), "--seed", "21",
                           "--out", str(outdir)] + subcmd_args)
            assert rc == 0
            outs.append(outdir)
        return outs

    ok = True
    a, b = run(["train", "--task", "centroid"], "train")
    same = ((a / "checkpoint_final.bin").read_bytes()
            == (b / "checkpoint_final.bin").read_bytes()
            and (a / "learning_curve.csv").read_bytes()
            == (b / "learning_curve.csv").read_bytes())
    ok &= same
    details.append(f"train={same}")
    ckpt = str(a / "checkpoint_final.bin")

    a, b = run(["eval", "--task", "centroid", "--checkpoint", ckpt,
                "--robots-min", "2", "--robots-max", "2", "--episodes", "2",
                "--time-limit", "3"], "eval")
    same = ((a / "eval_results.csv").read_bytes()
            == (b / "eval_results.csv").read_bytes())
    ok &= same
    details.append(f"eval={same}")

    a, b = run(["saliency", "--task", "centroid", "--checkpoint", ckpt,
                "--robots", "2"], "sal")
    same = ((a / "saliency.jsonl").read_bytes()
            == (b / "saliency.jsonl").read_bytes())
    ok &= same
    details.append(f"saliency={same}")

    a, b = run(["ablate", "--task", "navigation", "--iters", "1",
                "--max-entities", "2", "--eval-entities", "2",
                "--episodes", "1"], "abl")
    same = (a / "ablation.csv").read_bytes() == (b / "ablation.csv").read_bytes()
    ok &= same
    details.append(f"ablate={same}")

    # wall-clock timing columns are measurements, not derived outputs; the
    # remaining columns must be byte-identical
    a, b = run(["bench-mpc", "--checkpoint", ckpt, "--robots", "2",
                "--instances", "1", "--duration", "2"], "bench")

    def strip_timing(path):
        rows = []
        for line in path.read_text().splitlines():
            cols = line.split(",")
            rows.append(",".join(c for i, c in enumerate(cols)
                                 if i not in (8, 9)))
        return "\n".join(rows)

    same = (strip_timing(a / "bench_mpc.csv")
            == strip_timing(b / "bench_mpc.csv"))
    ok &= same
    details.append(f"bench-mpc={same}")

    line = record(15, "seeded outputs byte-identical per subcommand", ok,
                  " ".join(details))
    assert ok, line

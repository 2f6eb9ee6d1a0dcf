"""Centralized receding-horizon optimal control for the centroid task.

Single-shooting over the input accelerations (the semi-implicit Euler
dynamics are linear, so states are eliminated analytically), a 1-norm
centroid tracking cost smoothed with a small Huber radius inside the solver,
and inequality constraints (pairwise collision, base-frame velocity bounds)
handled with augmented-Lagrangian penalties around an L-BFGS inner solver.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import world as w

HUBER_RADIUS = 1e-3


@dataclass(frozen=True)
class MpcParams:
    horizon: int = 30
    dt: float = 1.0 / 30.0
    rho: float = 0.8  # half of the minimum pairwise distance
    w_c: tuple = (10.0, 10.0)
    w_cdot: tuple = (0.6, 0.6)
    w_x: tuple = (0.0, 0.0, 10.0, 0.04, 0.04, 0.04)   # 1e-2 * diag(0,0,1000,4,4,4)
    w_u: tuple = (1e-5, 1e-5, 1e-2)                   # 1e-5 * diag(1,1,1000)
    v_max_x: float = 2.0
    v_max_y: float = 1.0
    w_max: float = 1.5
    # solver knobs
    grad_tol: float = 1e-4
    viol_tol: float = 1e-3
    max_outer: int = 15
    max_inner: int = 60


@dataclass
class OcpSolution:
    states: np.ndarray       # (N+1, R, 6)
    inputs: np.ndarray       # (N, R, 3)
    objective: float         # exact 1-norm cost
    max_violation: float
    grad_norm: float
    iterations: int
    wall_time: float
    converged: bool
    multipliers: np.ndarray | None = None
    penalty: float = 10.0


def build_dynamics(dt: float):
    """Semi-implicit Euler transition matrices A (6x6) and B (6x3)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = np.eye(6)
    a[0, 3] = a[1, 4] = a[2, 5] = dt
    b = np.zeros((6, 3))
    b[0, 0] = b[1, 1] = b[2, 2] = dt * dt
    b[3, 0] = b[4, 1] = b[5, 2] = dt
    return a, b


def rollout(x0: np.ndarray, inputs: np.ndarray, a: np.ndarray, b: np.ndarray):
    """States (N+1, R, 6) under linear dynamics from x0 (R, 6)."""
    n = inputs.shape[0]
    states = np.empty((n + 1,) + x0.shape)
    states[0] = x0
    for k in range(n):
        states[k + 1] = states[k] @ a.T + inputs[k] @ b.T
    return states


def _huber(z, delta):
    az = np.abs(z)
    return np.where(az <= delta, 0.5 * z * z / delta, az - 0.5 * delta)


def _huber_grad(z, delta):
    return np.clip(z / delta, -1.0, 1.0)


def cost(states, inputs, c_ref, cdot_ref, x_ref, params: MpcParams,
         smooth: bool = False) -> float:
    """Stage cost summed over the horizon; exact 1-norm unless smooth=True."""
    wc = np.asarray(params.w_c)
    wcd = np.asarray(params.w_cdot)
    wx = np.asarray(params.w_x)
    wu = np.asarray(params.w_u)
    n = inputs.shape[0]
    cen = states[:n, :, 0:2].mean(axis=1) - c_ref          # (N, 2)
    pen = _huber(cen, HUBER_RADIUS) if smooth else np.abs(cen)
    total = float(np.sum(wc * pen))
    cdot = states[:n, :, 3:5].mean(axis=1) - cdot_ref
    total += float(np.sum(wcd * cdot * cdot))
    dx = states[:n] - x_ref
    total += float(np.sum(wx * dx * dx))
    total += float(np.sum(wu * inputs * inputs))
    return total


def cost_grads(states, inputs, c_ref, cdot_ref, x_ref, params: MpcParams):
    """Gradients of the Huber-smoothed cost w.r.t. states and inputs."""
    wc = np.asarray(params.w_c)
    wcd = np.asarray(params.w_cdot)
    wx = np.asarray(params.w_x)
    wu = np.asarray(params.w_u)
    n = inputs.shape[0]
    r = states.shape[1]
    d_states = np.zeros_like(states)
    cen = states[:n, :, 0:2].mean(axis=1) - c_ref
    d_states[:n, :, 0:2] += (wc * _huber_grad(cen, HUBER_RADIUS))[:, None, :] / r
    cdot = states[:n, :, 3:5].mean(axis=1) - cdot_ref
    d_states[:n, :, 3:5] += (2.0 * wcd * cdot)[:, None, :] / r
    d_states[:n] += 2.0 * wx * (states[:n] - x_ref)
    d_inputs = 2.0 * wu * inputs
    return d_states, d_inputs


def constraint_values(states, params: MpcParams):
    """All inequality residuals g <= 0, flattened deterministically.

    Only predicted states k = 1..N are constrained -- the measured state k=0
    is fixed, so residuals there would be uncontrollable and stall the
    multiplier loop. Order: collision (k major, pair minor), then per-state
    velocity bounds (forward +/-, lateral +/-, yaw-rate +/-).
    """
    states = states[1:]
    _, r, _ = states.shape
    ii, jj = np.triu_indices(r, k=1)
    diff = states[:, ii, 0:2] - states[:, jj, 0:2]        # (N, P, 2)
    coll = (2.0 * params.rho - np.linalg.norm(diff, axis=-1)).reshape(-1)
    psi = states[:, :, 2]
    vx, vy, om = states[:, :, 3], states[:, :, 4], states[:, :, 5]
    f_fwd = np.cos(psi) * vx + np.sin(psi) * vy
    f_lat = -np.sin(psi) * vx + np.cos(psi) * vy
    vel = np.stack([f_fwd - params.v_max_x, -f_fwd - params.v_max_x,
                    f_lat - params.v_max_y, -f_lat - params.v_max_y,
                    om - params.w_max, -om - params.w_max], axis=-1)
    return np.concatenate([coll, vel.reshape(-1)])


def _accumulate_constraint_grads(states, weights, params: MpcParams, d_states):
    """d_states += sum_i weights[i] * dg_i/dstates (same ordering as values)."""
    st = states[1:]
    ds = d_states[1:]
    n, r, _ = st.shape
    ii, jj = np.triu_indices(r, k=1)
    npairs = ii.size
    coll_w = weights[: n * npairs].reshape(n, npairs)
    diff = st[:, ii, 0:2] - st[:, jj, 0:2]                # (N, P, 2)
    dist = np.linalg.norm(diff, axis=-1)
    unit = np.where(dist[..., None] > 1e-12, diff / np.maximum(dist, 1e-12)[..., None], 0.0)
    contrib = -coll_w[..., None] * unit                    # dg/dx_i = -unit
    np.add.at(ds[:, :, 0:2], (slice(None), ii), contrib)
    np.add.at(ds[:, :, 0:2], (slice(None), jj), -contrib)
    vel_w = weights[n * npairs:].reshape(n, r, 6)
    psi = st[:, :, 2]
    vx, vy = st[:, :, 3], st[:, :, 4]
    c, s = np.cos(psi), np.sin(psi)
    f_fwd = c * vx + s * vy
    f_lat = -s * vx + c * vy
    w_fwd = vel_w[:, :, 0] - vel_w[:, :, 1]
    w_lat = vel_w[:, :, 2] - vel_w[:, :, 3]
    w_om = vel_w[:, :, 4] - vel_w[:, :, 5]
    ds[:, :, 2] += w_fwd * f_lat + w_lat * (-f_fwd)
    ds[:, :, 3] += w_fwd * c + w_lat * (-s)
    ds[:, :, 4] += w_fwd * s + w_lat * c
    ds[:, :, 5] += w_om


def _adjoint_to_inputs(d_states, d_inputs, a, b):
    """Backward sweep turning state-space gradients into input-space gradients."""
    n = d_inputs.shape[0]
    grad_u = d_inputs.copy()
    lam = d_states[n].copy()
    for k in reversed(range(n)):
        grad_u[k] += lam @ b
        lam = d_states[k] + lam @ a
    return grad_u


# --- Gauss-Newton inner solver ----------------------------------------------
#
# The dynamics are linear and decouple per robot and per channel (x, y, yaw
# are independent double integrators), so the input-to-state sensitivities
# are two lower-triangular Toeplitz chains: position dp_k/du_j = dt^2 (k - j)
# and velocity dv_k/du_j = dt, for k > j. The augmented-Lagrangian objective
# is quadratic except for the Huber centroid term and the active inequality
# penalties, so a damped Gauss-Newton step with an exact dense solve
# converges in a handful of iterations where quasi-Newton needs hundreds.

_CHAIN_CACHE: dict = {}


def _chains(n: int, dt: float):
    """(P, V): P[k-1, j] = dt^2 (k-j), V[k-1, j] = dt for states k=1..N."""
    key = (n, dt)
    if key not in _CHAIN_CACHE:
        k = np.arange(1, n + 1)[:, None]
        j = np.arange(n)[None, :]
        mask = j < k
        _CHAIN_CACHE[key] = (dt * dt * (k - j) * mask, dt * np.ones((n, n)) * mask)
    return _CHAIN_CACHE[key]


def _gn_hessian(states, lam, mu, c_ref, params: MpcParams):
    """Gauss-Newton Hessian of the AL objective in flat input space.

    Input layout matches inputs.reshape(-1): index ((j * r) + i) * 3 + ch.
    Internally assembled per robot block (ch-major 90x90 blocks), then
    permuted to the flat layout.
    """
    n = params.horizon
    r = states.shape[1]
    dt = params.dt
    P, V = _chains(n, dt)
    m = 3 * n  # per-robot block size, channel-major: [u_x(0..n), u_y, u_psi]
    wx = params.w_x
    wu = params.w_u
    wc = np.asarray(params.w_c)
    wcd = np.asarray(params.w_cdot)

    # constant per-robot block: w_x / w_u quadratic costs (channel diagonal)
    blk = np.zeros((m, m))
    for ch in range(3):
        sl = slice(ch * n, (ch + 1) * n)
        blk[sl, sl] = 2.0 * (wx[ch] * (P.T @ P) + wx[3 + ch] * (V.T @ V))
        blk[sl, sl] += 2.0 * wu[ch] * np.eye(n)

    # couplings shared by every robot pair: centroid velocity (quadratic)
    # and Huber centroid position with secant weights min(1/delta, 1/|cen|)
    cen = states[1:, :, 0:2].mean(axis=1) - c_ref      # (n, 2); k = 1..N
    cen0 = states[0, :, 0:2].mean(axis=0) - c_ref      # stage k=0 has no u dep
    del cen0
    couple = np.zeros((m, m))
    for ax in range(2):
        sl = slice(ax * n, (ax + 1) * n)
        sec = wc[ax] * np.minimum(1.0 / HUBER_RADIUS, 1.0 / np.maximum(np.abs(cen[:, ax]), 1e-300))
        # cost sums k = 0..n-1; k=0 is constant, states 1..n-1 carry u terms
        sec = np.concatenate([sec[:-1], [0.0]])         # drop uncosted state n
        couple[sl, sl] = (P.T * sec) @ P / (r * r)
        couple[sl, sl] += 2.0 * wcd[ax] * (V.T * np.concatenate([np.ones(n - 1), [0.0]])) @ V / (r * r)

    h = np.zeros((r * m, r * m))
    hv = h.reshape(r, m, r, m)
    for i in range(r):
        hv[i, :, i, :] += blk
    hv += couple[None, :, None, :]

    # active inequality penalties: mu * J' J per active residual
    st = states[1:]
    ii, jj = np.triu_indices(r, k=1)
    npairs = ii.size
    act = np.maximum(0.0, lam + mu * constraint_values(states, params))
    coll_w = act[: n * npairs].reshape(n, npairs)
    vel_w = act[n * npairs:].reshape(n, r, 6)

    rows = []
    ks, ps = np.nonzero(coll_w)
    for k, p_idx in zip(ks, ps):
        i, j = int(ii[p_idx]), int(jj[p_idx])
        diff = st[k, i, 0:2] - st[k, j, 0:2]
        d = np.linalg.norm(diff)
        if d < 1e-12:
            continue
        unit = diff / d
        row = np.zeros(r * m)
        row[i * m: i * m + n] = -unit[0] * P[k]
        row[i * m + n: i * m + 2 * n] = -unit[1] * P[k]
        row[j * m: j * m + n] = unit[0] * P[k]
        row[j * m + n: j * m + 2 * n] = unit[1] * P[k]
        rows.append(row)

    psi = st[:, :, 2]
    c, s = np.cos(psi), np.sin(psi)
    vx, vy = st[:, :, 3], st[:, :, 4]
    f_fwd = c * vx + s * vy
    f_lat = -s * vx + c * vy
    for k, i, which in zip(*np.nonzero(vel_w)):
        row = np.zeros(r * m)
        base = i * m
        if which in (0, 1):      # +/- forward speed
            row[base: base + n] = c[k, i] * V[k]
            row[base + n: base + 2 * n] = s[k, i] * V[k]
            row[base + 2 * n: base + 3 * n] = f_lat[k, i] * P[k]
        elif which in (2, 3):    # +/- lateral speed
            row[base: base + n] = -s[k, i] * V[k]
            row[base + n: base + 2 * n] = c[k, i] * V[k]
            row[base + 2 * n: base + 3 * n] = -f_fwd[k, i] * P[k]
        else:                    # +/- yaw rate
            row[base + 2 * n: base + 3 * n] = V[k]
        rows.append(row)
    if rows:
        jmat = np.array(rows)
        h += mu * jmat.T @ jmat

    # permute channel-major robot blocks to the (step, robot, channel) layout
    perm = np.arange(r * m).reshape(r, 3, n).transpose(2, 0, 1).reshape(-1)
    return h[np.ix_(perm, perm)]


def _newton_inner(al_fun, u0, states_of, lam, mu, c_ref, params: MpcParams,
                  gtol: float, max_iter: int):
    """Damped Gauss-Newton descent on the AL objective. Returns (u, grad, nit)."""
    u = u0.copy()
    val, grad = al_fun(u)
    tau = 1e-8
    nit = 0
    for _ in range(max_iter):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < gtol:
            break
        h = _gn_hessian(states_of(u), lam, mu, c_ref, params)
        step = None
        for _ in range(30):
            try:
                chol = np.linalg.cholesky(h + tau * np.eye(h.shape[0]))
                step = np.linalg.solve(chol.T, np.linalg.solve(chol, -grad.reshape(-1)))
                break
            except np.linalg.LinAlgError:
                tau = max(tau * 10.0, 1e-10)
        if step is None:
            break
        step = step.reshape(u.shape)
        slope = float(np.sum(grad * step))
        alpha = 1.0
        improved = False
        for _ in range(40):
            cand = u + alpha * step
            v_new, g_new = al_fun(cand)
            if v_new <= val + 1e-4 * alpha * slope:
                u, val, grad = cand, v_new, g_new
                improved = True
                break
            alpha *= 0.5
        nit += 1
        if not improved:
            tau = min(tau * 100.0, 1e6)
            if tau >= 1e6:
                break
            continue
        tau = max(tau * 0.25, 1e-10) if alpha == 1.0 else min(tau * 4.0, 1e4)
    return u, grad, nit


def solve(x0: np.ndarray, c_ref, cdot_ref, x_ref, params: MpcParams,
          warm_start: np.ndarray | None = None,
          warm_multipliers: np.ndarray | None = None,
          warm_penalty: float | None = None) -> OcpSolution:
    """Augmented-Lagrangian single shooting with analytic gradients."""
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite measured states")
    r = x0.shape[0]
    n = params.horizon
    a_mat, b_mat = build_dynamics(params.dt)
    c_ref = np.asarray(c_ref, dtype=np.float64)
    cdot_ref = np.asarray(cdot_ref, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if warm_start is not None and warm_start.shape == (n, r, 3):
        inputs = warm_start.copy()
    else:
        inputs = np.zeros((n, r, 3))

    n_con = constraint_values(rollout(x0, inputs, a_mat, b_mat), params).size
    if warm_multipliers is not None and warm_multipliers.size == n_con:
        lam = warm_multipliers.copy()
    else:
        lam = np.zeros(n_con)
    mu = warm_penalty if warm_penalty is not None else 10.0
    t0 = time.perf_counter()
    total_iters = 0
    prev_viol = np.inf
    converged = False
    grad_norm = np.inf
    max_viol = np.inf

    def al_fun(u_flat):
        u = u_flat.reshape(n, r, 3)
        states = rollout(x0, u, a_mat, b_mat)
        val = cost(states, u, c_ref, cdot_ref, x_ref, params, smooth=True)
        g = constraint_values(states, params)
        act = np.maximum(0.0, lam + mu * g)
        val += float(np.sum(act * act - lam * lam)) / (2.0 * mu)
        d_states, d_inputs = cost_grads(states, u, c_ref, cdot_ref, x_ref, params)
        _accumulate_constraint_grads(states, act, params, d_states)
        grad_u = _adjoint_to_inputs(d_states, d_inputs, a_mat, b_mat)
        return val, grad_u.reshape(-1)

    def al_of(u):
        val, g_flat = al_fun(u.reshape(-1))
        return val, g_flat.reshape(n, r, 3)

    states_of = lambda u: rollout(x0, u, a_mat, b_mat)

    for _ in range(params.max_outer):
        inputs, jac, nit = _newton_inner(al_of, inputs, states_of, lam, mu,
                                         c_ref, params, 0.5 * params.grad_tol,
                                         params.max_inner)
        total_iters += nit
        states = rollout(x0, inputs, a_mat, b_mat)
        g = constraint_values(states, params)
        max_viol = float(np.maximum(0.0, g).max()) if g.size else 0.0
        grad_norm = float(np.max(np.abs(jac)))
        if grad_norm < params.grad_tol and max_viol < params.viol_tol:
            converged = True
            break
        lam = np.maximum(0.0, lam + mu * g)
        if max_viol > 0.25 * prev_viol:
            mu = min(mu * 4.0, 1e8)
        prev_viol = max_viol

    states = rollout(x0, inputs, a_mat, b_mat)
    objective = cost(states, inputs, c_ref, cdot_ref, x_ref, params, smooth=False)
    if not math.isfinite(objective):
        raise FloatingPointError("NaN in OCP solution")
    return OcpSolution(states, inputs, objective, max_viol, grad_norm,
                       total_iters, time.perf_counter() - t0, converged,
                       multipliers=lam, penalty=mu)


def make_references(x0: np.ndarray, goal, params: MpcParams):
    """Per-robot reference states: yaw toward the goal, velocities to zero.

    Position entries are irrelevant (zero weights in w_x).
    """
    r = x0.shape[0]
    x_ref = np.zeros((params.horizon, r, 6))
    for i in range(r):
        dx, dy = goal[0] - x0[i, 0], goal[1] - x0[i, 1]
        if math.hypot(dx, dy) > 1.0:
            x_ref[:, i, 2] = math.atan2(dy, dx)
        else:
            # near the goal the bearing is ill-conditioned; hold current yaw
            x_ref[:, i, 2] = x0[i, 2]
    return x_ref


@dataclass
class ControllerCache:
    last_inputs: np.ndarray | None = None
    last_multipliers: np.ndarray | None = None
    last_penalty: float | None = None
    solve_times: list = field(default_factory=list)
    iterations: list = field(default_factory=list)


def controller_step(measured: np.ndarray, goal, params: MpcParams,
                    cache: ControllerCache):
    """Re-plan once and emit the next-step (position, velocity) target per robot."""
    x_ref = make_references(measured, goal, params)
    warm = None
    if cache.last_inputs is not None:
        warm = np.concatenate([cache.last_inputs[1:], cache.last_inputs[-1:]])
    sol = solve(measured, np.asarray(goal, dtype=np.float64), np.zeros(2),
                x_ref, params, warm,
                warm_multipliers=cache.last_multipliers,
                warm_penalty=cache.last_penalty)
    cache.last_inputs = sol.inputs
    cache.last_multipliers = sol.multipliers
    cache.last_penalty = sol.penalty
    cache.solve_times.append(sol.wall_time)
    cache.iterations.append(sol.iterations)
    return sol.states[1], sol


def metrics(times: np.ndarray, centroids: np.ndarray, goal,
            band: float = 0.1):
    """Tracking error, settling time, centroid travel distance.

    Settling time is the first time after which the centroid stays within
    `band` of the goal; if it never settles, the episode length is reported
    and flagged.
    """
    times = np.asarray(times, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    dist = np.linalg.norm(centroids - np.asarray(goal), axis=1)
    outside = np.nonzero(dist > band)[0]
    settled = not (outside.size and outside[-1] == dist.size - 1)
    if not settled:
        return {"tracking_error": float(dist[-1]), "settling_time": float(times[-1]),
                "travel_distance": float(np.sum(np.linalg.norm(np.diff(centroids, axis=0), axis=1))),
                "settled": False}
    first = 0 if outside.size == 0 else outside[-1] + 1
    travel = float(np.sum(np.linalg.norm(np.diff(centroids, axis=0), axis=1)))
    return {"tracking_error": float(dist[first:].mean()),
            "settling_time": float(times[first]) if first > 0 else 0.0,
            "travel_distance": travel, "settled": True}


def sample_positions(n_robots: int, seed: int, min_sep: float) -> np.ndarray:
    """Spawn positions 5-15 m from the origin with pairwise separation."""
    rng = np.random.default_rng(seed)
    placed = []
    for _ in range(n_robots):
        while True:
            ang = rng.uniform(-math.pi, math.pi)
            dist = rng.uniform(5.0, 15.0)
            x, y = dist * math.cos(ang), dist * math.sin(ang)
            if all(math.hypot(x - px, y - py) > min_sep for px, py in placed):
                break
        placed.append((x, y))
    return np.array(placed)


def run_centroid_episode(n_robots: int, seed: int, params: MpcParams,
                         duration: float = 20.0, replan_dt: float = 0.1,
                         positions=None):
    """Closed-loop MPC on the centroid task; cuboids track the emitted targets
    through the kinematic world integrator."""
    if positions is None:
        positions = sample_positions(n_robots, seed, 2.0 * params.rho + 0.1)
    agents = [w.Agent(w.Pose2(x, y, 0.0)) for x, y in positions]
    goal = np.zeros(2)
    cache = ControllerCache()
    sub_steps = int(round(replan_dt / w.SIM_DT))
    n_replans = int(round(duration / replan_dt))
    times = [0.0]
    cents = [np.mean([[a.pose.x, a.pose.y] for a in agents], axis=0)]
    t = 0.0
    for _ in range(n_replans):
        measured = np.array([[a.pose.x, a.pose.y, a.pose.yaw,
                              a.twist.vx, a.twist.vy, a.twist.wz] for a in agents])
        target, _ = controller_step(measured, goal, params, cache)
        for _ in range(sub_steps):
            for i, a in enumerate(agents):
                c, s = math.cos(a.pose.yaw), math.sin(a.pose.yaw)
                vx, vy, om = target[i, 3], target[i, 4], target[i, 5]
                cmd = w.BodyCommand(c * vx + s * vy, -s * vx + c * vy, om)
                a.pose, a.twist = w.step_agent(a.pose, a.twist, cmd, w.SIM_DT)
            t += w.SIM_DT
        times.append(t)
        cents.append(np.mean([[a.pose.x, a.pose.y] for a in agents], axis=0))
    result = metrics(np.array(times), np.array(cents), goal)
    result["mean_solve_time_ms"] = 1e3 * float(np.mean(cache.solve_times))
    result["mean_iterations"] = float(np.mean(cache.iterations))
    return result

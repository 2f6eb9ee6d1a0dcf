"""Task environments: multi-goal navigation, box packing, soccer, centroid control.

Each environment is a Dec-POMDP with a common reward shared by all agents.
Observations are assembled per entity category in the ego base frame so the
downstream set encoder can pool them order-independently.
"""

from __future__ import annotations

import copy
import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import world as w
from .encoder import CategorySpec, GeeConfig, ObservationBundle

TASKS = ("navigation", "packing", "soccer", "centroid")

GOAL_RADIUS = 0.5
PACKING_SITE_RADIUS = 1.5
SOCCER_FIELD_X = 9.0  # half extents of the 18 m x 12 m field
SOCCER_FIELD_Y = 6.0
SOCCER_GOAL_X = 8.0
SOCCER_GOAL_RADIUS = 1.0
TOO_CLOSE_DIST = 1.0
CENTROID_SUCCESS_DIST = 0.1

# observation normalization (fixed scale factors)
POS_SCALE = 0.1
VEL_SCALE = 0.5

# centroid-task shaping (invented stand-in; the other tasks follow fixed tables)
CENTROID_SHAPING_SCALE = 1.0
CENTROID_SUCCESS_BONUS = 10.0

RESET_MAX_ATTEMPTS = 100


class ResetError(RuntimeError):
    """Could not place entities after the allowed rejection-sampling attempts."""


class Outcome(enum.Enum):
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"
    DRAW = "draw"


@dataclass
class EpisodeConfig:
    task: str
    n_agents: int = 2
    n_goals: int = 0
    n_boxes: int = 0
    n_opponents: int = -1
    time_limit: float = 45.0
    history_len: int = 4
    include_scan: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "navigation" and self.n_goals <= 0:
            self.n_goals = self.n_agents
        if self.task == "packing" and self.n_boxes <= 0:
            self.n_boxes = self.n_agents
        if self.task == "soccer":
            if self.n_opponents < 0:
                self.n_opponents = self.n_agents
        else:
            self.n_opponents = max(0, self.n_opponents)


@dataclass
class CurriculumState:
    robot_range_hi: float = 2.0   # packing robot spawn upper bound, [2, 10] m
    box_range_hi: float = 1.5     # packing box spawn upper bound, [1.5, 10] m
    difficulty: int = 0           # navigation terrain level, >= 0


def sample_episode_config(task: str, rng: np.random.Generator, **overrides) -> EpisodeConfig:
    """Draw training entity counts for one episode."""
    if task == "navigation":
        cfg = EpisodeConfig(task, n_agents=int(rng.integers(1, 5)),
                            n_goals=int(rng.integers(1, 5)))
    elif task == "packing":
        cfg = EpisodeConfig(task, n_agents=int(rng.integers(1, 5)),
                            n_boxes=int(rng.integers(1, 5)))
    elif task == "soccer":
        cfg = EpisodeConfig(task, n_agents=int(rng.integers(1, 4)),
                            n_opponents=int(rng.integers(0, 4)))
    else:
        cfg = EpisodeConfig(task, n_agents=int(rng.integers(1, 7)))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# world construction


def _place_disc(rng, candidates_fn, clear_of, min_sep):
    for _ in range(RESET_MAX_ATTEMPTS):
        x, y = candidates_fn()
        if all(math.hypot(x - ox, y - oy) >= min_sep for ox, oy in clear_of):
            return x, y
    raise ResetError("infeasible placement after 100 attempts")


def _nav_obstacles(difficulty: int, centroid, goals, rng) -> list:
    """Random rectangular obstacles between the spawn cluster and the goals.

    Obstacle count grows with difficulty (capped at 8) and free corridors
    shrink from 3 m to 1.5 m as a planar stand-in for harder terrain.
    """
    n_obs = min(difficulty, 8)
    corridor = max(3.0 - 0.2 * difficulty, 1.5)
    obstacles = []
    keep_clear = [centroid] + [(g.x, g.y) for g in goals]
    attempts = 0
    while len(obstacles) < n_obs and attempts < RESET_MAX_ATTEMPTS * max(n_obs, 1):
        attempts += 1
        gx, gy = goals[int(rng.integers(len(goals)))].x, goals[int(rng.integers(len(goals)))].y
        t = rng.uniform(0.3, 0.8)
        cx = centroid[0] + t * (gx - centroid[0]) + rng.uniform(-4, 4)
        cy = centroid[1] + t * (gy - centroid[1]) + rng.uniform(-4, 4)
        rect = w.ObstacleRect(cx, cy, rng.uniform(-math.pi, math.pi),
                              rng.uniform(0.5, 2.0), rng.uniform(0.3, 0.8))
        if any(math.hypot(cx - px, cy - py) < corridor + 2.5 for px, py in keep_clear):
            continue
        obstacles.append(rect)
    return obstacles


def reset(cfg: EpisodeConfig, curriculum: CurriculumState, rng: np.random.Generator) -> w.WorldState:
    """Build the initial world for one episode."""
    if cfg.task == "navigation":
        arena = w.Arena(-40.0, 40.0, -40.0, 40.0)
        placed = []
        agents = []
        for _ in range(cfg.n_agents):
            x, y = _place_disc(rng, lambda: (rng.uniform(-3, 3), rng.uniform(-3, 3)),
                               placed, 2 * w.AGENT_RADIUS + 0.1)
            placed.append((x, y))
            agents.append(w.Agent(w.Pose2(x, y, rng.uniform(-math.pi, math.pi))))
        centroid = (sum(p[0] for p in placed) / len(placed),
                    sum(p[1] for p in placed) / len(placed))
        goals = []
        for _ in range(cfg.n_goals):
            ang = rng.uniform(-math.pi, math.pi)
            dist = rng.uniform(15.0, 30.0)
            goals.append(w.Goal(centroid[0] + dist * math.cos(ang),
                                centroid[1] + dist * math.sin(ang)))
        obstacles = _nav_obstacles(curriculum.difficulty, centroid, goals, rng)
        return w.WorldState(agents=agents, goals=goals, obstacles=obstacles, arena=arena)

    if cfg.task == "packing":
        arena = w.Arena(-12.0, 12.0, -12.0, 12.0)
        placed = []
        agents = []
        for _ in range(cfg.n_agents):
            def cand():
                ang = rng.uniform(-math.pi, math.pi)
                dist = rng.uniform(2.0, curriculum.robot_range_hi)
                return dist * math.cos(ang), dist * math.sin(ang)
            x, y = _place_disc(rng, cand, placed, 2 * w.AGENT_RADIUS + 0.1)
            placed.append((x, y))
            agents.append(w.Agent(w.Pose2(x, y, rng.uniform(-math.pi, math.pi))))
        boxes = []
        for _ in range(cfg.n_boxes):
            def cand():
                ang = rng.uniform(-math.pi, math.pi)
                dist = rng.uniform(1.5, curriculum.box_range_hi)
                return dist * math.cos(ang), dist * math.sin(ang)
            x, y = _place_disc(rng, cand, placed, 2 * w.BOX_HALF_EXTENT + 0.2)
            placed.append((x, y))
            boxes.append(w.Box(w.Pose2(x, y, 0.0)))
        return w.WorldState(agents=agents, boxes=boxes, arena=arena)

    if cfg.task == "soccer":
        arena = w.Arena(-SOCCER_FIELD_X, SOCCER_FIELD_X, -SOCCER_FIELD_Y, SOCCER_FIELD_Y)
        agents = []
        for i in range(cfg.n_agents):  # training team lines up before its own goal
            y = (i - (cfg.n_agents - 1) / 2.0) * 1.5
            agents.append(w.Agent(w.Pose2(-SOCCER_GOAL_X + 1.5, y, 0.0)))
        for i in range(cfg.n_opponents):
            y = (i - (cfg.n_opponents - 1) / 2.0) * 1.5
            agents.append(w.Agent(w.Pose2(SOCCER_GOAL_X - 1.5, y, math.pi)))
        ball = w.Ball(0.0, 0.0, rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))
        return w.WorldState(agents=agents, ball=ball, arena=arena)

    # centroid
    arena = w.Arena(-25.0, 25.0, -25.0, 25.0)
    placed = []
    agents = []
    for _ in range(cfg.n_agents):
        def cand():
            ang = rng.uniform(-math.pi, math.pi)
            dist = rng.uniform(5.0, 15.0)
            return dist * math.cos(ang), dist * math.sin(ang)
        x, y = _place_disc(rng, cand, placed, 2 * w.AGENT_RADIUS + 0.1)
        placed.append((x, y))
        agents.append(w.Agent(w.Pose2(x, y, rng.uniform(-math.pi, math.pi))))
    return w.WorldState(agents=agents, goals=[w.Goal(0.0, 0.0)], arena=arena)


# ---------------------------------------------------------------------------
# reward / termination / curriculum


def _pairwise_too_close(agents) -> int:
    n = 0
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            if math.hypot(agents[i].pose.x - agents[j].pose.x,
                          agents[i].pose.y - agents[j].pose.y) < TOO_CLOSE_DIST:
                n += 1
    return n


def _centroid(agents):
    return (sum(a.pose.x for a in agents) / len(agents),
            sum(a.pose.y for a in agents) / len(agents))


def reward(world_before: w.WorldState, world_after: w.WorldState,
           cfg: EpisodeConfig, outcome: Outcome) -> float:
    """Common reward shared by all agents for one policy step."""
    ws = world_after
    train_agents = ws.agents[: cfg.n_agents]
    if cfg.task == "navigation":
        r = 10.0 if outcome == Outcome.SUCCESS else 0.0
        for g in ws.goals:
            if g.reached:
                continue
            d = min(math.hypot(a.pose.x - g.x, a.pose.y - g.y) for a in train_agents)
            r += 5.0 * math.exp(-d * d)
        speeds = [min(max(math.hypot(a.twist.vx, a.twist.vy), 0.0), 1.0) for a in train_agents]
        r += 1.0 * (sum(speeds) / len(speeds))
        r -= 1.0 * _pairwise_too_close(train_agents)
        r -= 2.0 * len(w.check_collisions(ws))
        return r

    if cfg.task == "packing":
        r = 5.0 if outcome == Outcome.SUCCESS else 0.0
        total = len(ws.boxes)
        completed = sum(1 for b in ws.boxes
                        if math.hypot(b.pose.x, b.pose.y) <= PACKING_SITE_RADIUS)
        r += 0.25 * (completed / total)
        for b in ws.boxes:
            d = math.hypot(b.pose.x, b.pose.y)
            if d > 1e-9:
                dirx, diry = -b.pose.x / d, -b.pose.y / d
                r += 0.1 * (b.twist.vx * dirx + b.twist.vy * diry)
            r += 0.5 * math.exp(-d * d)
        r -= 1.0 * _pairwise_too_close(train_agents)
        return r

    if cfg.task == "soccer":
        r = 0.0
        if outcome == Outcome.SUCCESS:
            r += 5.0
        elif outcome == Outcome.FAILURE:
            r -= 5.0
        ball = ws.ball
        gx, gy = SOCCER_GOAL_X, 0.0  # training team attacks +x
        d = math.hypot(ball.x - gx, ball.y - gy)
        if d > 1e-9:
            dirx, diry = (gx - ball.x) / d, (gy - ball.y) / d
            r += 1.0 * (ball.vx * dirx + ball.vy * diry)
        r += 0.25 * math.exp(-d * d)
        r -= 1.0 * _pairwise_too_close(train_agents)
        return r

    # centroid: potential-based progress shaping plus success bonus
    cx, cy = _centroid(train_agents)
    px, py = _centroid(world_before.agents[: cfg.n_agents])
    gx, gy = ws.goals[0].x, ws.goals[0].y
    r = CENTROID_SHAPING_SCALE * (math.hypot(px - gx, py - gy)
                                  - math.hypot(cx - gx, cy - gy))
    if outcome == Outcome.SUCCESS:
        r += CENTROID_SUCCESS_BONUS
    return r


def terminate(ws: w.WorldState, cfg: EpisodeConfig) -> Outcome:
    if cfg.task == "navigation":
        if all(g.reached for g in ws.goals):
            return Outcome.SUCCESS
        return Outcome.FAILURE if ws.t >= cfg.time_limit else Outcome.RUNNING

    if cfg.task == "packing":
        if all(math.hypot(b.pose.x, b.pose.y) <= PACKING_SITE_RADIUS for b in ws.boxes):
            return Outcome.SUCCESS
        return Outcome.FAILURE if ws.t >= cfg.time_limit else Outcome.RUNNING

    if cfg.task == "soccer":
        ball = ws.ball
        if math.hypot(ball.x - SOCCER_GOAL_X, ball.y) <= SOCCER_GOAL_RADIUS:
            return Outcome.SUCCESS
        if math.hypot(ball.x + SOCCER_GOAL_X, ball.y) <= SOCCER_GOAL_RADIUS:
            return Outcome.FAILURE
        return Outcome.DRAW if ws.t >= cfg.time_limit else Outcome.RUNNING

    cx, cy = _centroid(ws.agents[: cfg.n_agents])
    if math.hypot(cx - ws.goals[0].x, cy - ws.goals[0].y) <= CENTROID_SUCCESS_DIST:
        return Outcome.SUCCESS
    return Outcome.FAILURE if ws.t >= cfg.time_limit else Outcome.RUNNING


def update_curriculum(curr: CurriculumState, task: str, outcome: Outcome,
                      goals_reached: int = 0) -> CurriculumState:
    """Adapt spawn ranges / terrain difficulty from the episode outcome."""
    if task == "packing":
        if outcome == Outcome.SUCCESS:
            return CurriculumState(min(curr.robot_range_hi + 1.0, 10.0),
                                   min(curr.box_range_hi + 1.0, 10.0),
                                   curr.difficulty)
        return CurriculumState(max(curr.robot_range_hi - 1.0, 2.0),
                               max(curr.box_range_hi - 1.0, 1.5),
                               curr.difficulty)
    if task == "navigation":
        if outcome == Outcome.SUCCESS:
            return CurriculumState(curr.robot_range_hi, curr.box_range_hi,
                                   curr.difficulty + 1)
        if goals_reached == 0:
            return CurriculumState(curr.robot_range_hi, curr.box_range_hi,
                                   max(curr.difficulty - 1, 0))
    return curr


# ---------------------------------------------------------------------------
# opponent pool (soccer self-play)


class OpponentPool:
    def __init__(self, capacity: int = 10):
        assert capacity >= 1
        self.snapshots = deque(maxlen=capacity)

    def push(self, params):
        self.snapshots.append(params)

    def sample(self, rng: np.random.Generator):
        if not self.snapshots:
            raise IndexError("sample from empty opponent pool")
        return self.snapshots[int(rng.integers(len(self.snapshots)))]

    def __len__(self):
        return len(self.snapshots)


# ---------------------------------------------------------------------------
# observation assembly


def ego_extra_dim(task: str) -> int:
    return {"navigation": 0, "packing": 2, "soccer": 8, "centroid": 5}[task]


def ego_base_dim(cfg: EpisodeConfig) -> int:
    d = 6 + ego_extra_dim(cfg.task)
    if cfg.include_scan:
        d += w.SCAN_NX * w.SCAN_NY
    return d


def category_specs(task: str, history_len: int, enc_hidden=(64, 64), feat_dim=32):
    k = history_len
    if task == "navigation":
        return (CategorySpec("neighbors", 4 + 2 * k, enc_hidden, feat_dim),
                CategorySpec("goals", 3 + 2 * k, enc_hidden, feat_dim))
    if task == "packing":
        return (CategorySpec("neighbors", 4 + 2 * k, enc_hidden, feat_dim),
                CategorySpec("boxes", 5 + 2 * k, enc_hidden, feat_dim))
    if task == "soccer":
        return (CategorySpec("teammates", 5 + 2 * k, enc_hidden, feat_dim),
                CategorySpec("opponents", 5 + 2 * k, enc_hidden, feat_dim))
    return (CategorySpec("neighbors", 4 + 2 * k, enc_hidden, feat_dim),)


def make_gee_config(cfg: EpisodeConfig, enc_hidden=(64, 64), feat_dim=32,
                    trunk_hidden=(128, 128), aggregator="max",
                    max_entities=None) -> GeeConfig:
    cats = category_specs(cfg.task, cfg.history_len, tuple(enc_hidden), feat_dim)
    kwargs = {}
    if aggregator == "concat":
        kwargs = {"aggregator": "concat", "max_entities": tuple(max_entities)}
    return GeeConfig(ego_dim=ego_base_dim(cfg), categories=cats,
                     trunk_hidden=tuple(trunk_hidden), **kwargs)


def _rel_pos(ego: w.Agent, x: float, y: float):
    c, s = math.cos(ego.pose.yaw), math.sin(ego.pose.yaw)
    dx, dy = x - ego.pose.x, y - ego.pose.y
    return (c * dx + s * dy) * POS_SCALE, (-s * dx + c * dy) * POS_SCALE


def _rel_vel(ego: w.Agent, vx: float, vy: float):
    c, s = math.cos(ego.pose.yaw), math.sin(ego.pose.yaw)
    return (c * vx + s * vy) * VEL_SCALE, (-s * vx + c * vy) * VEL_SCALE


def neighbor_entity_vector(ego: w.Agent, pos, vel, past_positions) -> np.ndarray:
    """Relative-state vector for one neighboring agent (shared with the broker path)."""
    out = list(_rel_pos(ego, pos[0], pos[1])) + list(_rel_vel(ego, vel[0], vel[1]))
    for px, py in past_positions:
        out.extend(_rel_pos(ego, px, py))
    return np.array(out, dtype=np.float64)


class BrokerEnvAdapter:
    """Bridges an Environment to the broker agent loop (neighbor-category tasks).

    Each agent publishes its absolute public state [x, y, vx, vy, K past
    positions]; observers rebuild the relative neighbor vectors with the same
    transform the in-process observer uses, so broker-mediated execution is
    bit-identical given identical snapshots.
    """

    def __init__(self, env: "Environment"):
        if env.cfg.task not in ("centroid", "navigation", "packing"):
            raise ValueError("adapter covers single-neighbor-category tasks")
        self.env = env
        self.pending: dict = {}

    def public_state(self, robot_id: int):
        obs = self.env.observe(robot_id)
        agent = self.env.world.agents[robot_id]
        hist = self.env.histories[("agent", robot_id)]
        payload = np.array([agent.pose.x, agent.pose.y,
                            agent.twist.vx, agent.twist.vy]
                           + [c for p in hist for c in p])
        k = self.env.cfg.history_len
        extra = {name: mat for name, mat in obs.categories.items()
                 if name != "neighbors"}

        def build(ego_vec, neighbors: dict) -> ObservationBundle:
            rows = []
            for rid in sorted(neighbors):
                v = neighbors[rid]
                past = v[4:].reshape(-1, 2)
                rows.append(neighbor_entity_vector(agent, v[0:2], v[2:4], past))
            cats = dict(extra)
            cats["neighbors"] = np.array(rows).reshape(len(rows), 4 + 2 * k)
            return ObservationBundle(ego=ego_vec, categories=cats)

        return obs.ego, payload, build

    def send_command(self, robot_id: int, cmd):
        self.pending[robot_id] = cmd

    def step_if_complete(self):
        """Advance the world once every agent has submitted its command."""
        if len(self.pending) == len(self.env.world.agents):
            cmds = [self.pending[i] for i in range(len(self.env.world.agents))]
            self.pending.clear()
            return self.env.step(cmds)
        return None


class Environment:
    """One steppable episode instance (single-writer; pure given rng seed)."""

    def __init__(self, cfg: EpisodeConfig, curriculum: CurriculumState | None = None):
        self.cfg = cfg
        self.curriculum = curriculum or CurriculumState()
        self.world: w.WorldState | None = None
        self.histories: dict = {}
        self.last_cmds: list = []
        self.episode_id = 0

    @property
    def n_agents_total(self) -> int:
        return self.cfg.n_agents + (self.cfg.n_opponents if self.cfg.task == "soccer" else 0)

    def reset(self, rng: np.random.Generator) -> w.WorldState:
        # unlucky rejection-sampling draws get fresh retries; genuinely
        # infeasible configurations still fail after the retry budget
        for attempt in range(5):
            try:
                self.world = reset(self.cfg, self.curriculum, rng)
                break
            except ResetError:
                if attempt == 4:
                    raise
        k = self.cfg.history_len
        self.histories = {}
        for i, a in enumerate(self.world.agents):
            self.histories[("agent", i)] = deque([(a.pose.x, a.pose.y)] * k, maxlen=k)
        for i, b in enumerate(self.world.boxes):
            self.histories[("box", i)] = deque([(b.pose.x, b.pose.y)] * k, maxlen=k)
        for i, g in enumerate(self.world.goals):
            self.histories[("goal", i)] = deque([(g.x, g.y)] * k, maxlen=k)
        self.last_cmds = [w.BodyCommand(0.0, 0.0, 0.0) for _ in self.world.agents]
        return self.world

    def _team(self, idx: int) -> int:
        return 0 if idx < self.cfg.n_agents else 1

    def observe(self, agent_idx: int) -> ObservationBundle:
        ws = self.world
        ego = ws.agents[agent_idx]
        c, s = math.cos(ego.pose.yaw), math.sin(ego.pose.yaw)
        vxb = c * ego.twist.vx + s * ego.twist.vy
        vyb = -s * ego.twist.vx + c * ego.twist.vy
        last = self.last_cmds[agent_idx]
        ego_vec = [vxb / w.VX_MAX, vyb / w.VY_MAX, ego.twist.wz / w.WZ_MAX,
                   last.vx_b / w.VX_MAX, last.vy_b / w.VY_MAX, last.wz / w.WZ_MAX]

        task = self.cfg.task
        if task == "packing":
            ego_vec += list(_rel_pos(ego, 0.0, 0.0))  # packing site center
        elif task == "soccer":
            ball = ws.ball
            own_gx = -SOCCER_GOAL_X if self._team(agent_idx) == 0 else SOCCER_GOAL_X
            ego_vec += list(_rel_pos(ego, ball.x, ball.y))
            ego_vec += list(_rel_vel(ego, ball.vx, ball.vy))
            ego_vec += list(_rel_pos(ego, own_gx, 0.0))
            ego_vec += list(_rel_pos(ego, -own_gx, 0.0))
        elif task == "centroid":
            g = ws.goals[0]
            rx, ry = _rel_pos(ego, g.x, g.y)
            d = math.hypot(g.x - ego.pose.x, g.y - ego.pose.y)
            if d > 1e-9:
                ux, uy = rx / (d * POS_SCALE), ry / (d * POS_SCALE)
            else:
                ux, uy = 0.0, 0.0
            ego_vec += [rx, ry, ux, uy, d * POS_SCALE]
        if self.cfg.include_scan:
            ego_vec = np.concatenate([ego_vec, w.local_scan(ws, agent_idx).flat()])
        ego_vec = np.asarray(ego_vec, dtype=np.float64)

        categories: dict = {}
        k = self.cfg.history_len

        def others(pred):
            rows = []
            for j, a in enumerate(ws.agents):
                if j == agent_idx or not pred(j):
                    continue
                rows.append((j, a))
            return rows

        def agent_rows(rows, mask=None):
            vecs = []
            for j, a in rows:
                vec = neighbor_entity_vector(ego, (a.pose.x, a.pose.y),
                                             (a.twist.vx, a.twist.vy),
                                             self.histories[("agent", j)])
                if mask is not None:
                    vec = np.insert(vec, 4, float(mask))
                vecs.append(vec)
            dim = (4 if mask is None else 5) + 2 * k
            return np.array(vecs).reshape(len(vecs), dim)

        if task == "soccer":
            my_team = self._team(agent_idx)
            categories["teammates"] = agent_rows(
                others(lambda j: self._team(j) == my_team), mask=0.0)
            categories["opponents"] = agent_rows(
                others(lambda j: self._team(j) != my_team), mask=1.0)
        else:
            categories["neighbors"] = agent_rows(others(lambda j: True))

        if task == "navigation":
            rows = []
            for i, g in enumerate(ws.goals):
                vec = list(_rel_pos(ego, g.x, g.y)) + [float(g.reached)]
                for px, py in self.histories[("goal", i)]:
                    vec.extend(_rel_pos(ego, px, py))
                rows.append(vec)
            categories["goals"] = np.array(rows).reshape(len(rows), 3 + 2 * k)
        elif task == "packing":
            rows = []
            for i, b in enumerate(ws.boxes):
                in_range = float(math.hypot(b.pose.x, b.pose.y) <= PACKING_SITE_RADIUS)
                vec = (list(_rel_pos(ego, b.pose.x, b.pose.y))
                       + list(_rel_vel(ego, b.twist.vx, b.twist.vy)) + [in_range])
                for px, py in self.histories[("box", i)]:
                    vec.extend(_rel_pos(ego, px, py))
                rows.append(vec)
            categories["boxes"] = np.array(rows).reshape(len(rows), 5 + 2 * k)

        return ObservationBundle(ego=ego_vec, categories=categories)

    def _project_agent(self, agent: w.Agent):
        x, y = self.world.arena.clamp(agent.pose.x, agent.pose.y)
        for obs in self.world.obstacles:
            if obs.disc_overlaps(x, y, agent.radius):
                px, py = obs.closest_point(x, y)
                d = math.hypot(x - px, y - py)
                if d > 1e-9 and not obs.contains(x, y):
                    x = px + (x - px) * agent.radius / d
                    y = py + (y - py) * agent.radius / d
        agent.pose = w.Pose2(x, y, agent.pose.yaw)

    def step(self, commands: list) -> tuple[float, Outcome]:
        """Advance one policy step (10 sim substeps) under per-agent commands."""
        ws = self.world
        if ws is None:
            raise RuntimeError("step before reset")
        before = copy.deepcopy(ws)
        for i, a in enumerate(ws.agents):
            self.histories[("agent", i)].append((a.pose.x, a.pose.y))
        for i, b in enumerate(ws.boxes):
            self.histories[("box", i)].append((b.pose.x, b.pose.y))
        for i, g in enumerate(ws.goals):
            self.histories[("goal", i)].append((g.x, g.y))

        for _ in range(w.SIM_STEPS_PER_CONTROL):
            for i, a in enumerate(ws.agents):
                a.pose, a.twist = w.step_agent(a.pose, a.twist, commands[i], w.SIM_DT)
                self._project_agent(a)
            if self.cfg.task == "packing":
                ws.boxes = [w.step_box(b, ws.agents, w.SIM_DT, ws.obstacles, ws.arena)
                            for b in ws.boxes]
            if self.cfg.task == "soccer":
                ws.ball = w.step_ball(ws.ball, ws.agents, w.SIM_DT, ws.arena)
            if self.cfg.task == "navigation":
                for g in ws.goals:
                    if not g.reached and any(
                            math.hypot(a.pose.x - g.x, a.pose.y - g.y) <= GOAL_RADIUS
                            for a in ws.agents[: self.cfg.n_agents]):
                        g.reached = True
            ws.t += w.SIM_DT

        self.last_cmds = [c.clamped() for c in commands]
        outcome = terminate(ws, self.cfg)
        r = reward(before, ws, self.cfg, outcome)
        return r, outcome

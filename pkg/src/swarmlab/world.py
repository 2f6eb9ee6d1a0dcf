"""Planar kinematic world: agents, boxes, ball, obstacles, perception."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

TAU = 2.0 * math.pi

# simulation rates
SIM_DT = 0.02
CONTROL_DT = 0.2
SIM_STEPS_PER_CONTROL = 10

# body-velocity command bounds (m/s, m/s, rad/s)
VX_MAX = 2.0
VY_MAX = 1.0
WZ_MAX = 1.5

# quasi-static box contact (stand-in constants, see config defaults)
BOX_PUSH_GAIN = 10.0
BOX_SPEED_CAP = 2.0

# rolling ball
BALL_FRICTION_DECAY = 0.99
BALL_RESTITUTION = 0.5

# default footprints
AGENT_RADIUS = 0.5
BOX_HALF_EXTENT = 0.4

# local scan: 4.35 m x 2.85 m at 0.15 m/cell -> 29 x 19 cells
SCAN_RESOLUTION = 0.15
SCAN_NX = 29
SCAN_NY = 19
SCAN_EXTENT_X = SCAN_NX * SCAN_RESOLUTION
SCAN_EXTENT_Y = SCAN_NY * SCAN_RESOLUTION


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = a % TAU
    if r > math.pi:
        r -= TAU
    return r


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class Twist2:
    vx: float  # world frame
    vy: float
    wz: float


@dataclass(frozen=True)
class BodyCommand:
    vx_b: float  # base frame longitudinal
    vy_b: float  # lateral
    wz: float

    def clamped(self) -> "BodyCommand":
        return BodyCommand(
            vx_b=min(max(self.vx_b, -VX_MAX), VX_MAX),
            vy_b=min(max(self.vy_b, -VY_MAX), VY_MAX),
            wz=min(max(self.wz, -WZ_MAX), WZ_MAX),
        )


@dataclass
class Agent:
    pose: Pose2
    twist: Twist2 = Twist2(0.0, 0.0, 0.0)
    radius: float = AGENT_RADIUS


@dataclass
class Box:
    pose: Pose2
    twist: Twist2 = Twist2(0.0, 0.0, 0.0)
    half_extent: float = BOX_HALF_EXTENT


@dataclass
class Goal:
    x: float
    y: float
    reached: bool = False


@dataclass
class Ball:
    x: float
    y: float
    vx: float
    vy: float
    radius: float = 0.3


@dataclass
class ObstacleRect:
    """Oriented rectangle obstacle."""

    cx: float
    cy: float
    yaw: float
    half_w: float  # along local x
    half_h: float  # along local y

    def to_local(self, x: float, y: float) -> tuple[float, float]:
        dx, dy = x - self.cx, y - self.cy
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return c * dx + s * dy, -s * dx + c * dy

    def contains(self, x: float, y: float) -> bool:
        lx, ly = self.to_local(x, y)
        return abs(lx) <= self.half_w and abs(ly) <= self.half_h

    def closest_point(self, x: float, y: float) -> tuple[float, float]:
        """Closest point on the rectangle boundary-or-interior, world frame."""
        lx, ly = self.to_local(x, y)
        qx = min(max(lx, -self.half_w), self.half_w)
        qy = min(max(ly, -self.half_h), self.half_h)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return self.cx + c * qx - s * qy, self.cy + s * qx + c * qy

    def disc_overlaps(self, x: float, y: float, radius: float) -> bool:
        if self.contains(x, y):
            return True
        px, py = self.closest_point(x, y)
        return math.hypot(x - px, y - py) < radius


@dataclass(frozen=True)
class Arena:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def clamp(self, x: float, y: float) -> tuple[float, float]:
        return (
            min(max(x, self.xmin), self.xmax),
            min(max(y, self.ymin), self.ymax),
        )


@dataclass
class WorldState:
    agents: list[Agent]
    boxes: list[Box] = field(default_factory=list)
    goals: list[Goal] = field(default_factory=list)
    ball: Ball | None = None
    obstacles: list[ObstacleRect] = field(default_factory=list)
    arena: Arena = Arena(-50.0, 50.0, -50.0, 50.0)
    t: float = 0.0


@dataclass
class LocalScan:
    grid: np.ndarray  # (SCAN_NX, SCAN_NY), values in {0, 1}, axis 0 = forward
    resolution: float = SCAN_RESOLUTION

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1).astype(np.float64)


def _check_finite(*vals: float):
    for v in vals:
        if not math.isfinite(v):
            raise ValueError("non-finite input to world step")


def step_agent(pose: Pose2, twist: Twist2, cmd: BodyCommand, dt: float) -> tuple[Pose2, Twist2]:
    """Integrate one agent under a clamped body-velocity command.

    The command is clamped, rotated into the world frame by the current yaw,
    and the pose integrated explicitly. Returns the new pose and the applied
    world-frame velocity.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_finite(pose.x, pose.y, pose.yaw, cmd.vx_b, cmd.vy_b, cmd.wz)
    c = cmd.clamped()
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    vx = cy * c.vx_b - sy * c.vy_b
    vy = sy * c.vx_b + cy * c.vy_b
    new_pose = Pose2(pose.x + dt * vx, pose.y + dt * vy, wrap_angle(pose.yaw + dt * c.wz))
    return new_pose, Twist2(vx, vy, c.wz)


def step_box(box: Box, pushing_agents: list[Agent], dt: float,
             obstacles: list[ObstacleRect] | None = None,
             arena: Arena | None = None) -> Box:
    """Quasi-static box push: penetration-proportional velocity from contacts.

    The box is approximated by a disc of radius equal to its half-extent.
    Pushes from all overlapping agents sum; speed is capped at BOX_SPEED_CAP.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    br = box.half_extent
    vx = vy = 0.0
    for a in pushing_agents:
        dx = box.pose.x - a.pose.x
        dy = box.pose.y - a.pose.y
        dist = math.hypot(dx, dy)
        pen = a.radius + br - dist
        if pen <= 0.0:
            continue
        if dist > 1e-12:
            nx, ny = dx / dist, dy / dist
        else:
            nx, ny = 1.0, 0.0
        vx += BOX_PUSH_GAIN * pen * nx
        vy += BOX_PUSH_GAIN * pen * ny
    speed = math.hypot(vx, vy)
    if speed > BOX_SPEED_CAP:
        vx *= BOX_SPEED_CAP / speed
        vy *= BOX_SPEED_CAP / speed
    x = box.pose.x + dt * vx
    y = box.pose.y + dt * vy
    for obs in obstacles or []:
        if obs.disc_overlaps(x, y, br):
            px, py = obs.closest_point(x, y)
            d = math.hypot(x - px, y - py)
            if d < 1e-12 or obs.contains(x, y):
                # center inside: push out along the shallowest local axis
                lx, ly = obs.to_local(x, y)
                c, s = math.cos(obs.yaw), math.sin(obs.yaw)
                if obs.half_w - abs(lx) < obs.half_h - abs(ly):
                    sgn = 1.0 if lx >= 0 else -1.0
                    lx = sgn * (obs.half_w + br)
                else:
                    sgn = 1.0 if ly >= 0 else -1.0
                    ly = sgn * (obs.half_h + br)
                x = obs.cx + c * lx - s * ly
                y = obs.cy + s * lx + c * ly
            else:
                scale = br / d
                x = px + (x - px) * scale
                y = py + (y - py) * scale
    if arena is not None:
        x, y = arena.clamp(x, y)
    return Box(Pose2(x, y, box.pose.yaw), Twist2(vx, vy, 0.0), box.half_extent)


def step_ball(ball: Ball, contacts: list[Agent], dt: float,
              field_bounds: Arena | None = None) -> Ball:
    """Roll the ball one step: friction decay, contact impulses, wall reflection."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    vx = ball.vx * BALL_FRICTION_DECAY
    vy = ball.vy * BALL_FRICTION_DECAY
    for a in contacts:
        dx = ball.x - a.pose.x
        dy = ball.y - a.pose.y
        dist = math.hypot(dx, dy)
        if dist >= a.radius + ball.radius or dist < 1e-12:
            continue
        nx, ny = dx / dist, dy / dist
        rel = (a.twist.vx - vx) * nx + (a.twist.vy - vy) * ny
        if rel > 0.0:
            vx += rel * nx
            vy += rel * ny
    x = ball.x + dt * vx
    y = ball.y + dt * vy
    if field_bounds is not None:
        if x < field_bounds.xmin and vx < 0:
            x = field_bounds.xmin
            vx = -BALL_RESTITUTION * vx
        elif x > field_bounds.xmax and vx > 0:
            x = field_bounds.xmax
            vx = -BALL_RESTITUTION * vx
        if y < field_bounds.ymin and vy < 0:
            y = field_bounds.ymin
            vy = -BALL_RESTITUTION * vy
        elif y > field_bounds.ymax and vy > 0:
            y = field_bounds.ymax
            vy = -BALL_RESTITUTION * vy
    return Ball(x, y, vx, vy, ball.radius)


def local_scan(world: WorldState, agent_idx: int) -> LocalScan:
    """Binary occupancy grid in the agent base frame (1 = obstacle or out of arena)."""
    agent = world.agents[agent_idx]
    c, s = math.cos(agent.pose.yaw), math.sin(agent.pose.yaw)
    grid = np.zeros((SCAN_NX, SCAN_NY), dtype=np.float64)
    for ix in range(SCAN_NX):
        bx = (ix - (SCAN_NX - 1) / 2.0) * SCAN_RESOLUTION
        for iy in range(SCAN_NY):
            by = (iy - (SCAN_NY - 1) / 2.0) * SCAN_RESOLUTION
            wx = agent.pose.x + c * bx - s * by
            wy = agent.pose.y + s * bx + c * by
            if not world.arena.contains(wx, wy):
                grid[ix, iy] = 1.0
                continue
            for obs in world.obstacles:
                if obs.contains(wx, wy):
                    grid[ix, iy] = 1.0
                    break
    return LocalScan(grid)


def check_collisions(world: WorldState) -> list[tuple[tuple[str, int], tuple[str, int]]]:
    """All agent-agent and agent-obstacle overlaps, ordered by index."""
    pairs = []
    agents = world.agents
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            d = math.hypot(agents[i].pose.x - agents[j].pose.x,
                           agents[i].pose.y - agents[j].pose.y)
            if d < agents[i].radius + agents[j].radius:
                pairs.append((("agent", i), ("agent", j)))
    for i, a in enumerate(agents):
        for k, obs in enumerate(world.obstacles):
            if obs.disc_overlaps(a.pose.x, a.pose.y, a.radius):
                pairs.append((("agent", i), ("obstacle", k)))
    return pairs


def transform_pose(pose: Pose2, dx: float, dy: float, dtheta: float) -> Pose2:
    """Apply a global rigid transform (rotate by dtheta about origin, then translate)."""
    c, s = math.cos(dtheta), math.sin(dtheta)
    return Pose2(c * pose.x - s * pose.y + dx,
                 s * pose.x + c * pose.y + dy,
                 wrap_angle(pose.yaw + dtheta))


def log_trajectory_record(fh, world: WorldState, commands=None, reward=None):
    """Append one JSON-lines record for the current policy step."""
    rec = {
        "t": world.t,
        "agents": [[a.pose.x, a.pose.y, a.pose.yaw] for a in world.agents],
        "boxes": [[b.pose.x, b.pose.y, b.pose.yaw] for b in world.boxes],
        "goals": [[g.x, g.y, int(g.reached)] for g in world.goals],
    }
    if world.ball is not None:
        rec["ball"] = [world.ball.x, world.ball.y, world.ball.vx, world.ball.vy]
    if commands is not None:
        rec["commands"] = [[c.vx_b, c.vy_b, c.wz] for c in commands]
    if reward is not None:
        rec["reward"] = reward
    fh.write(json.dumps(rec) + "\n")

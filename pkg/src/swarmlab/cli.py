"""Command-line entry point: train / eval / bench-mpc / saliency / ablate / broker."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import broker as B
from . import encoder as enc
from . import envs as E
from . import mpc as M
from . import trainer as T
from . import world as w
from .config import digest_of, load_config

log = logging.getLogger("swarmlab")

EVAL_TIME_LIMITS = {"packing": 20.0, "centroid": 20.0, "navigation": 45.0, "soccer": 45.0}


def _setup_logging():
    level = os.environ.get("SWARMLAB_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _train_config(cfg_file: dict, overrides: dict) -> T.TrainConfig:
    section = dict(cfg_file.get("train", {}))
    section.update({k: v for k, v in overrides.items() if v is not None})
    fields = T.TrainConfig.__dataclass_fields__
    kwargs = {}
    for k, v in section.items():
        if k in fields:
            if isinstance(v, list):
                v = tuple(v)
            elif isinstance(fields[k].default, tuple) and not isinstance(v, tuple):
                v = (v,)
            kwargs[k] = v
    return T.TrainConfig(**kwargs)


def _episode_config(task: str, cfg_file: dict, n_agents: int, n_entities: int,
                    time_limit: float, history_len: int) -> E.EpisodeConfig:
    ep = E.EpisodeConfig(task, n_agents=n_agents, time_limit=time_limit,
                         history_len=history_len)
    if task == "navigation":
        ep.n_goals = n_entities
    elif task == "packing":
        ep.n_boxes = n_entities
    elif task == "soccer":
        ep.n_opponents = n_entities
    for k, v in cfg_file.get("episode", {}).items():
        if hasattr(ep, k):
            setattr(ep, k, v)
    return ep


def _gee_config(task: str, train_cfg: T.TrainConfig) -> enc.GeeConfig:
    ep = E.EpisodeConfig(task, history_len=train_cfg.history_len)
    return E.make_gee_config(ep, train_cfg.enc_hidden, train_cfg.feat_dim,
                             train_cfg.trunk_hidden, train_cfg.aggregator,
                             train_cfg.max_entities or None)


def _provenance(*objs) -> str:
    return digest_of(*objs)[:16]


def cmd_train(args):
    cfg_file = load_config(args.config) if args.config else {}
    tc = _train_config(cfg_file, {"iterations": args.iters})
    out = Path(args.out)
    result = T.train(args.task, tc, args.seed, out, log=log.info)
    log.info("wrote %s and %s", result.checkpoints[-1], result.curve_path)
    return 0


def _eval_cell(task, params, cfg_file, history_len, n_robots, n_ent, episodes, seed,
               time_limit):
    ep = _episode_config(task, cfg_file, n_robots, n_ent, time_limit, history_len)
    try:
        rate, mean_time = T.evaluate(task, params, ep, episodes, seed)
        return {"n_robots": n_robots, "n_entities": n_ent,
                "success_rate": rate, "mean_completion_time": mean_time,
                "error": ""}
    except enc.CapacityError as exc:
        return {"n_robots": n_robots, "n_entities": n_ent,
                "success_rate": "", "mean_completion_time": "",
                "error": f"capacity: {exc}"}


def cmd_eval(args):
    cfg_file = load_config(args.config) if args.config else {}
    tc = _train_config(cfg_file, {})
    gee_cfg = _gee_config(args.task, tc)
    params = enc.load_checkpoint(args.checkpoint, gee_cfg)
    time_limit = args.time_limit or EVAL_TIME_LIMITS[args.task]
    cells = [(r, e)
             for r in range(args.robots_min, args.robots_max + 1)
             for e in range(args.entities_min, args.entities_max + 1)]
    rows = []
    for idx, (r, e) in enumerate(cells):
        rows.append(_eval_cell(args.task, params, cfg_file, tc.history_len,
                               r, e, args.episodes, args.seed + idx, time_limit))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval_results.csv"
    ckpt_bytes = Path(args.checkpoint).read_bytes()
    with open(path, "w") as fh:
        fh.write(f"# provenance {_provenance(gee_cfg.to_dict(), ckpt_bytes, args.seed)}\n")
        fh.write("n_robots,n_entities,success_rate,mean_completion_time,error\n")
        for row in rows:
            sr = row["success_rate"]
            mt = row["mean_completion_time"]
            fh.write(f"{row['n_robots']},{row['n_entities']},"
                     f"{sr if sr == '' else f'{sr:.6g}'},"
                     f"{mt if mt == '' else f'{mt:.6g}'},{row['error']}\n")
    log.info("wrote %s", path)
    return 0


def run_rl_centroid_episode(params, positions, duration=20.0):
    """Decentralized policy on a fixed centroid instance; mirrors the MPC runner."""
    n = len(positions)
    ep = E.EpisodeConfig("centroid", n_agents=n, time_limit=duration)
    env = E.Environment(ep)
    env.reset(np.random.default_rng(0))
    env.world.goals = [w.Goal(0.0, 0.0)]
    for i, (x, y) in enumerate(positions):
        env.world.agents[i].pose = w.Pose2(x, y, 0.0)
        env.world.agents[i].twist = w.Twist2(0.0, 0.0, 0.0)
        env.histories[("agent", i)] = type(env.histories[("agent", i)])(
            [(x, y)] * ep.history_len, maxlen=ep.history_len)
    times = [0.0]
    cents = [np.mean(positions, axis=0)]
    inference = []
    steps = int(duration / w.CONTROL_DT)
    for _ in range(steps):
        commands = []
        for a in range(n):
            t0 = time.perf_counter()
            obs = env.observe(a)
            alpha, beta, _, _ = enc.forward(params, obs)
            act = enc.deterministic_action(alpha, beta, params.config.action_bounds)
            inference.append(time.perf_counter() - t0)
            commands.append(w.BodyCommand(*act))
        env.step(commands)
        times.append(env.world.t)
        cents.append(np.array(E._centroid(env.world.agents)))
    result = M.metrics(np.array(times), np.array(cents), np.zeros(2))
    result["mean_solve_time_ms"] = 1e3 * float(np.mean(inference))
    return result


def cmd_bench_mpc(args):
    cfg_file = load_config(args.config) if args.config else {}
    tc = _train_config(cfg_file, {})
    gee_cfg = _gee_config("centroid", tc)
    params = enc.load_checkpoint(args.checkpoint, gee_cfg)
    mpc_params = M.MpcParams()
    robot_counts = [int(x) for x in args.robots.split(",")]
    rows = []
    for method in ("rl", "mpc"):
        for r in robot_counts:
            metrics = []
            failed = 0
            for i in range(args.instances):
                seed = args.seed + i
                positions = M.sample_positions(r, seed, 2 * mpc_params.rho + 0.1)
                if method == "mpc":
                    res = M.run_centroid_episode(r, seed, mpc_params,
                                                 duration=args.duration,
                                                 positions=positions)
                else:
                    res = run_rl_centroid_episode(params, positions,
                                                  duration=args.duration)
                metrics.append(res)
                if not res["settled"]:
                    failed += 1
            def agg(key):
                vals = [m[key] for m in metrics]
                return float(np.mean(vals)), float(np.std(vals))
            te = agg("tracking_error")
            st = agg("settling_time")
            tr = agg("travel_distance")
            tm = agg("mean_solve_time_ms")
            rows.append([method, r, *te, *st, *tr, *tm,
                         "FLAGGED" if failed > args.instances / 2 else ""])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench_mpc.csv"
    with open(path, "w") as fh:
        fh.write(f"# provenance {_provenance(gee_cfg.to_dict(), args.seed)}\n")
        fh.write("method,robots,tracking_error_m,tracking_error_std,"
                 "settling_time_s,settling_time_std,travel_distance_m,"
                 "travel_distance_std,solver_time_ms,solver_time_std,flag\n")
        for row in rows:
            fh.write(",".join(f"{v:.6g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    log.info("wrote %s", path)
    return 0


def cmd_saliency(args):
    cfg_file = load_config(args.config) if args.config else {}
    tc = _train_config(cfg_file, {})
    gee_cfg = _gee_config(args.task, tc)
    params = enc.load_checkpoint(args.checkpoint, gee_cfg)
    rng = np.random.default_rng(args.seed)
    ep = _episode_config(args.task, cfg_file, args.robots, args.entities,
                         EVAL_TIME_LIMITS[args.task], tc.history_len)
    env = E.Environment(ep)
    env.reset(rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "saliency.jsonl"
    steps = int(ep.time_limit / w.CONTROL_DT)
    with open(path, "w") as fh:
        for step in range(steps):
            commands = []
            for a in range(env.cfg.n_agents):
                obs = env.observe(a)
                sal = enc.saliency(params, obs)
                for cat, scores in sal.items():
                    for ent, val in enumerate(scores):
                        fh.write(json.dumps({"step": step, "agent": a,
                                             "category": cat, "entity": ent,
                                             "value": float(val)}) + "\n")
                alpha, beta, _, _ = enc.forward(params, obs)
                act = enc.deterministic_action(alpha, beta, gee_cfg.action_bounds)
                commands.append(w.BodyCommand(*act))
            _, outcome = env.step(commands)
            if outcome != E.Outcome.RUNNING:
                break
    log.info("wrote %s", path)
    return 0


def cmd_ablate(args):
    cfg_file = load_config(args.config) if args.config else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = {}
    for name in ("gee", "concat"):
        overrides = {"iterations": args.iters}
        tc = _train_config(cfg_file, overrides)
        env_overrides = {"n_agents": min(args.max_entities, 4)}
        if name == "concat":
            n_cats = len(E.category_specs(args.task, tc.history_len))
            from dataclasses import replace
            tc = replace(tc, aggregator="concat",
                         max_entities=(args.max_entities,) * n_cats)
            # training episodes must stay inside the fixed concat budget
            if args.task == "navigation":
                env_overrides["n_goals"] = args.max_entities
            elif args.task == "packing":
                env_overrides["n_boxes"] = args.max_entities
            elif args.task == "soccer":
                env_overrides["n_opponents"] = min(args.max_entities, 3)
        result = T.train(args.task, tc, args.seed, out / name,
                         env_overrides=env_overrides, log=log.info)
        variants[name] = (result.params, tc)
    path = out / "ablation.csv"
    with open(path, "w") as fh:
        fh.write(f"# provenance {_provenance(args.task, args.seed, args.iters)}\n")
        fh.write("variant,n_robots,n_entities,success_rate,mean_completion_time,error\n")
        for name, (params, tc) in variants.items():
            for n_ent in args.eval_entities:
                row = _eval_cell(args.task, params, cfg_file, tc.history_len,
                                 min(args.max_entities, 4), n_ent,
                                 args.episodes, args.seed, EVAL_TIME_LIMITS[args.task])
                sr, mt = row["success_rate"], row["mean_completion_time"]
                fh.write(f"{name},{row['n_robots']},{n_ent},"
                         f"{sr if sr == '' else f'{sr:.6g}'},"
                         f"{mt if mt == '' else f'{mt:.6g}'},{row['error']}\n")
    log.info("wrote %s", path)
    return 0


def cmd_broker_serve(args):
    server = B.serve(args.bind)
    log.info("broker serving on %s:%d", *server.address)
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        server.close()
    return 0


class _SoloSim:
    """Self-contained single-robot kinematic sim for a distributed agent process."""

    def __init__(self, x, y, goal, history_len=4):
        from collections import deque
        self.agent = w.Agent(w.Pose2(x, y, 0.0))
        self.goal = goal
        self.k = history_len
        self.hist = deque([(x, y)] * history_len, maxlen=history_len)
        self.last_cmd = w.BodyCommand(0.0, 0.0, 0.0)

    def public_state(self, robot_id):
        a = self.agent
        c, s = math.cos(a.pose.yaw), math.sin(a.pose.yaw)
        vxb = c * a.twist.vx + s * a.twist.vy
        vyb = -s * a.twist.vx + c * a.twist.vy
        gx, gy = self.goal
        rx, ry = E._rel_pos(a, gx, gy)
        d = math.hypot(gx - a.pose.x, gy - a.pose.y)
        if d > 1e-9:
            ux, uy = rx / (d * E.POS_SCALE), ry / (d * E.POS_SCALE)
        else:
            ux, uy = 0.0, 0.0
        ego = np.array([vxb / w.VX_MAX, vyb / w.VY_MAX, a.twist.wz / w.WZ_MAX,
                        self.last_cmd.vx_b / w.VX_MAX, self.last_cmd.vy_b / w.VY_MAX,
                        self.last_cmd.wz / w.WZ_MAX,
                        rx, ry, ux, uy, d * E.POS_SCALE])
        payload = np.array([a.pose.x, a.pose.y, a.twist.vx, a.twist.vy]
                           + [c for p in self.hist for c in p])

        def build(ego_vec, neighbors):
            rows = []
            for rid in sorted(neighbors):
                v = neighbors[rid]
                rows.append(E.neighbor_entity_vector(a, v[0:2], v[2:4],
                                                     v[4:].reshape(-1, 2)))
            cats = {"neighbors": np.array(rows).reshape(len(rows), 4 + 2 * self.k)}
            return enc.ObservationBundle(ego=ego_vec, categories=cats)

        return ego, payload, build

    def send_command(self, robot_id, cmd):
        self.hist.append((self.agent.pose.x, self.agent.pose.y))
        for _ in range(w.SIM_STEPS_PER_CONTROL):
            self.agent.pose, self.agent.twist = w.step_agent(
                self.agent.pose, self.agent.twist, cmd, w.SIM_DT)
        self.last_cmd = cmd.clamped()


def cmd_agent_run(args):
    cfg_file = load_config(args.config) if args.config else {}
    tc = _train_config(cfg_file, {})
    gee_cfg = _gee_config("centroid", tc)
    params = enc.load_checkpoint(args.checkpoint, gee_cfg)
    env = _SoloSim(args.x, args.y, (0.0, 0.0), tc.history_len)
    latencies = B.run_agent(args.id, params, env, args.broker, args.steps,
                            rate_hz=args.rate, realtime=args.rate > 0)
    log.info("robot %d finished at (%.2f, %.2f); mean inference %.3f ms",
             args.id, env.agent.pose.x, env.agent.pose.y,
             1e3 * float(np.mean(latencies)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarmlab")
    p.add_argument("--config", default=None, help="structured key-value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train")
    sp.add_argument("--task", choices=E.TASKS, required=True)
    sp.add_argument("--iters", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval")
    sp.add_argument("--task", choices=E.TASKS, required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--robots-min", type=int, default=1)
    sp.add_argument("--robots-max", type=int, default=1)
    sp.add_argument("--entities-min", type=int, default=1)
    sp.add_argument("--entities-max", type=int, default=1)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--time-limit", type=float, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench-mpc")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--robots", default="4,10")
    sp.add_argument("--instances", type=int, default=10)
    sp.add_argument("--duration", type=float, default=20.0)
    sp.set_defaults(func=cmd_bench_mpc)

    sp = sub.add_parser("saliency")
    sp.add_argument("--task", choices=E.TASKS, required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--robots", type=int, default=2)
    sp.add_argument("--entities", type=int, default=2)
    sp.set_defaults(func=cmd_saliency)

    sp = sub.add_parser("ablate")
    sp.add_argument("--task", choices=E.TASKS, default="navigation")
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--max-entities", type=int, default=4)
    sp.add_argument("--eval-entities", type=int, nargs="+", default=[2, 4, 5])
    sp.add_argument("--episodes", type=int, default=10)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("broker-serve")
    sp.add_argument("--bind", default="127.0.0.1:0")
    sp.set_defaults(func=cmd_broker_serve)

    sp = sub.add_parser("agent-run")
    sp.add_argument("--id", type=int, required=True)
    sp.add_argument("--broker", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--rate", type=float, default=0.0)
    sp.add_argument("--x", type=float, default=0.0)
    sp.add_argument("--y", type=float, default=0.0)
    sp.set_defaults(func=cmd_agent_run)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""swarmlab: planar multi-robot simulation and learning stack.

Modules:
  world    -- kinematic simulation primitives (agents, boxes, balls, scans)
  envs     -- task environments, rewards, curricula, observation builders
  encoder  -- entity-set policy network (shared encoders + pooling) and Beta policy
  trainer  -- PPO with GAE, Adam, self-play opponent pool
  mpc      -- centralized receding-horizon centroid controller baseline
  broker   -- TCP last-write-wins state-sharing service and agent loop
  cli      -- command-line front end
"""

__version__ = "0.1.0"

"""Desk-scale swarm formation lab.

A 2-D point-mass swarm environment with radius-limited observation and
message exchange, a consensus-communication policy trained by multi-agent
PPO, and policy distillation that folds the per-fleet-size teachers into
one student that re-forms as agents drop out.
"""

__version__ = "0.1.0"

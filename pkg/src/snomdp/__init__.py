"""Safe near-optimal exploration of deterministic grid MDPs with GP beliefs."""

from .agent import (AgentConfig, TrajectoryLog, run_method, run_oracle,
                    run_safemdp_baseline, run_sno_mdp)
from .gp import ConfidenceSchedule, GaussianProcess, Kernel
from .gridworld import EnvironmentTruth, GridWorld

__all__ = ["AgentConfig", "ConfidenceSchedule", "EnvironmentTruth", "GaussianProcess",
           "GridWorld", "Kernel", "TrajectoryLog", "run_method", "run_oracle",
           "run_safemdp_baseline", "run_sno_mdp"]

__version__ = "0.1.0"

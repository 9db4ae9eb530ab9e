"""Three-part reward: trajectory quality + output format + endpoint accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import MetricConfig, pdms, score_batch, sub_scores
from .response import ParsedResponse
from .scene import Scene, Trajectory

# (upper bound, reward); a tier applies when dis < bound. dis == 0 falls in the
# first tier, dis == 15 is closed onto the 0.2 tier.
GOAL_TIERS = ((2.0, 1.0), (4.0, 0.8), (6.0, 0.6), (10.0, 0.4))


@dataclass(frozen=True)
class RewardBreakdown:
    r_traj: float
    r_fmt: float
    r_goal: float

    @property
    def total(self) -> float:
        return self.r_traj + self.r_fmt + self.r_goal


def trajectory_reward(scene: Scene, resp: ParsedResponse, cfg: MetricConfig | None = None) -> float:
    if not resp.well_formed_trajectory:
        return 0.0
    return pdms(sub_scores(scene, resp.trajectory, cfg))


def format_reward(resp: ParsedResponse) -> float:
    return 0.5 * resp.well_formed_structure + 0.5 * resp.well_formed_trajectory


def goal_tier(dis: float) -> float:
    for bound, reward in GOAL_TIERS:
        if dis < bound:
            return reward
    if dis <= 15.0:
        return 0.2
    return 0.0


def endpoint_l1(traj: Trajectory, gt: Trajectory) -> float:
    return float(np.sum(np.abs(traj.array[-1] - gt.array[-1])))


def goal_reward(resp: ParsedResponse, gt: Trajectory) -> float:
    if not resp.well_formed_trajectory:
        return 0.0
    return goal_tier(endpoint_l1(resp.trajectory, gt))


def total_reward(scene: Scene, resp: ParsedResponse, gt: Trajectory, cfg: MetricConfig | None = None) -> RewardBreakdown:
    return RewardBreakdown(trajectory_reward(scene, resp, cfg), format_reward(resp), goal_reward(resp, gt))


def batch_rewards(scene: Scene, responses: list[ParsedResponse], gt: Trajectory, cfg: MetricConfig | None = None):
    """Rewards plus the batched sub-scores for a whole rollout group.

    Malformed trajectories are still scored (for diagnostics) but earn zero
    trajectory and goal reward.
    """
    sc = score_batch(scene, [r.trajectory for r in responses], cfg)
    p = sc.pdms
    out = []
    for i, r in enumerate(responses):
        r_traj = float(p[i]) if r.well_formed_trajectory else 0.0
        out.append(RewardBreakdown(r_traj, format_reward(r), goal_reward(r, gt)))
    return out, sc

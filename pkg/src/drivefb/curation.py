"""Pre-RL curation: keep scenarios the SFT policy finds hard or ambiguous."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import policy
from .features import scene_features
from .grpo import sample_rng
from .metrics import MetricConfig
from .response import parse
from .rewards import batch_rewards
from .scene import ScenarioRecord

CURATION_STREAM = 3


@dataclass(frozen=True)
class CurationConfig:
    N: int = 8
    discard_mean_min: float = 0.9
    discard_std_max: float = 0.08
    temperature: float = 1.2
    s: float = 0.8

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")


@dataclass(frozen=True)
class RolloutStats:
    scenario_id: str
    N: int
    mean_reward: float
    std_reward: float
    all_fail_pdms: bool
    all_fail_nc: bool
    all_fail_dac: bool
    mean_pdms: float = 0.0

    def __post_init__(self):
        if self.std_reward < 0:
            raise ValueError("std_reward must be non-negative")


def rollout_stats(params: policy.PolicyParams, record: ScenarioRecord, cfg: CurationConfig, seed: int, metric_cfg: MetricConfig | None = None) -> RolloutStats:
    feat = scene_features(record.scene)
    rngs = [sample_rng(seed, record.scenario_id, 0, i, stream=CURATION_STREAM) for i in range(cfg.N)]
    samples = policy.generate(params, np.repeat(feat[None], cfg.N, axis=0), cfg.temperature, rngs)
    parsed = [parse(s.tokens) for s in samples]
    rewards, sc = batch_rewards(record.scene, parsed, record.gt_trajectory, metric_cfg)
    total = np.array([r.total for r in rewards])
    r_traj = np.array([r.r_traj for r in rewards])
    return RolloutStats(
        scenario_id=record.scenario_id,
        N=cfg.N,
        mean_reward=float(total.mean()),
        std_reward=float(total.std()),
        all_fail_pdms=bool(np.all(r_traj < cfg.s)),
        all_fail_nc=bool(np.all(sc.nc == 0)),
        all_fail_dac=bool(np.all(sc.dac == 0)),
        mean_pdms=float(r_traj.mean()),
    )


def estimate_stats(params: policy.PolicyParams, corpus: list[ScenarioRecord], cfg: CurationConfig | None = None, seed: int = 0) -> list[RolloutStats]:
    cfg = cfg or CurationConfig()
    return [rollout_stats(params, rec, cfg, seed) for rec in corpus]


def discard(st: RolloutStats, cfg: CurationConfig) -> bool:
    return st.mean_reward >= cfg.discard_mean_min and st.std_reward <= cfg.discard_std_max


def filter(stats: list[RolloutStats], cfg: CurationConfig | None = None) -> list[str]:  # noqa: A001
    """Scenario ids to keep: everything except high-mean, low-variance ones."""
    if not stats:
        raise ValueError("no rollout statistics to filter")
    cfg = cfg or CurationConfig()
    return [st.scenario_id for st in stats if not discard(st, cfg)]


def write_stats_csv(stats: list[RolloutStats], path: str | Path) -> None:
    names = [f.name for f in fields(RolloutStats)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for st in stats:
            w.writerow(asdict(st))


def read_stats_csv(path: str | Path) -> list[RolloutStats]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                RolloutStats(
                    row["scenario_id"],
                    int(row["N"]),
                    float(row["mean_reward"]),
                    float(row["std_reward"]),
                    row["all_fail_pdms"] == "True",
                    row["all_fail_nc"] == "True",
                    row["all_fail_dac"] == "True",
                    float(row["mean_pdms"]),
                )
            )
    return out

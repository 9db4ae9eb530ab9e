"""Supervised fine-tuning data and loop.

The dataset mixes base pairs (q_base, o_gt) with feedback pairs (q_fb, o_gt).
Feedback pairs are built by perturbing the ground-truth response (speed
scaling, lateral drift, wrong meta-action or obstacle cell), letting the
teacher judge and diagnose the perturbed answer, and pairing the resulting
feedback query with the ground truth as target. This teaches the policy to
read the feedback block before RL ever uses it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import policy, response, teacher
from .features import scene_features
from .metrics import MetricConfig, score_batch
from .response import NO_OBSTACLE, OBS_BASE, compose, encode_gt, parse, trajectory_tokens
from .scene import LATERAL, LONGITUDINAL, HORIZON_STEPS, MetaAction, ScenarioRecord, Trajectory

log = logging.getLogger(__name__)


@dataclass
class SFTConfig:
    epochs: int = 300
    learning_rate: float = 1.0
    batch_size: int = 32
    feedback_per_record: int = 2
    clip: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class SFTPair:
    features: np.ndarray
    tokens: tuple[int, ...]
    kind: str  # "base" or "feedback"


def perturb(record: ScenarioRecord, rng: np.random.Generator) -> list[int]:
    """A plausible wrong-ish response near the ground truth."""
    gt = record.gt_trajectory.array
    meta = record.gt_meta
    t = np.arange(1, HORIZON_STEPS + 1) / HORIZON_STEPS
    arr = gt.copy()
    mode = int(rng.integers(4))
    if mode == 0:
        arr = gt * rng.uniform(0.3, 1.6)
    elif mode == 1:
        arr[:, 1] += rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 4.0) * t
    elif mode == 2:
        arr = gt * rng.uniform(0.6, 1.3)
        arr[:, 1] += rng.uniform(-2.5, 2.5) * t
    if mode == 3 or rng.random() < 0.3:
        meta = MetaAction(LONGITUDINAL[rng.integers(4)], LATERAL[rng.integers(5)])
    cell = response.key_obstacle_cell(record.scene, record.gt_trajectory)
    if rng.random() < 0.3:
        cell = int(rng.choice([NO_OBSTACLE, OBS_BASE + int(rng.integers(25))]))
    return compose(meta, cell, trajectory_tokens(Trajectory.from_array(arr)))


def feedback_query_for(record: ScenarioRecord, tokens, s: float = 0.8, cfg: MetricConfig | None = None) -> np.ndarray:
    scene = record.scene
    resp = parse(tokens)
    sc = score_batch(scene, [resp.trajectory], cfg)
    r_traj = float(sc.pdms[0]) if resp.well_formed_trajectory else 0.0
    base = scene_features(scene)
    if teacher.classify(r_traj, s) is teacher.Verdict.CORRECT:
        return teacher.build_feedback_query(base, resp, None)
    report = teacher.diagnose(scene, resp, record.gt_trajectory, record.gt_meta, sc.sub_scores(0), s, cfg)
    return teacher.build_feedback_query(base, resp, report)


def build_dataset(records: list[ScenarioRecord], feedback_per_record: int = 2, seed: int = 0, s: float = 0.8) -> list[SFTPair]:
    rng = np.random.default_rng([seed, 0x5F7])
    pairs = []
    for rec in records:
        gt_tokens = tuple(encode_gt(rec))
        pairs.append(SFTPair(scene_features(rec.scene), gt_tokens, "base"))
        for _ in range(feedback_per_record):
            q_fb = feedback_query_for(rec, perturb(rec, rng), s)
            pairs.append(SFTPair(q_fb, gt_tokens, "feedback"))
    return pairs


def run_sft(params: policy.PolicyParams, pairs: list[SFTPair], cfg: SFTConfig, on_epoch=None) -> tuple[policy.PolicyParams, list[float]]:
    """Minibatch SGD over shuffled pairs; returns trained params and per-epoch mean loss.

    The reference snapshot is frozen from the final weights.
    """
    if not pairs:
        raise ValueError("empty SFT dataset")
    params = params.copy()
    rng = np.random.default_rng([cfg.seed, 0x5F7, 1])
    feats = np.stack([policy.pad_base(p.features) for p in pairs])
    toks = [list(p.tokens) for p in pairs]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = policy.nll_and_grad(params, feats[idx], [toks[i] for i in idx])
            policy.sgd_update(params, grads, cfg.learning_rate, cfg.clip)
            losses.append(loss * len(idx))
        history.append(float(np.sum(losses) / len(order)))
        log.info("sft epoch %d loss %.4f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    params.freeze_reference()
    return params, history

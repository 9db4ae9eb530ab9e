"""Group-relative policy optimisation with feedback re-injection.

One training step draws a group of n rollouts per scenario, optionally asks
the teacher for feedback and re-samples under the feedback query, injects up
to k re-sampled responses that beat the best original, normalises rewards
over the union and takes ``iterations`` gradient-ascent passes on the
clipped / shaped / KL-regularised objective.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import policy, teacher
from .features import scene_features
from .metrics import BatchScores, MetricConfig
from .policy import Batch, NumericalFailure, PolicyParams, SampleOutput
from .response import ParsedResponse, encode_gt, parse
from .rewards import RewardBreakdown, batch_rewards
from .scene import ScenarioRecord

log = logging.getLogger(__name__)

STD_GUARD = 1e-8


class Mode(str, enum.Enum):
    GRPO = "grpo"
    GT_GRPO = "gt_grpo"
    RULE_GRPO = "rule_grpo"
    ELF = "elf"


class Origin(str, enum.Enum):
    ONPOLICY = "onpolicy"
    FEEDBACK = "feedback"
    GT = "gt"
    DUPLICATE = "duplicate"


CLIPPED_ORIGINS = (Origin.ONPOLICY, Origin.DUPLICATE, Origin.GT)


@dataclass
class TrainConfig:
    n: int = 8
    k: int = 1
    s: float = 0.8
    gamma: float = 0.1
    beta: float = 0.01
    epsilon: float = 0.2
    temperature: float = 1.2
    iterations: int = 2
    learning_rate: float = 0.05
    clip_norm: float = 1.0
    scenarios_per_step: int = 4
    mode: Mode = Mode.ELF
    seed: int = 0
    freeze_shaping_denominator: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 1 <= self.k < self.n:
            raise ValueError("k must satisfy 1 <= k < n")
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.iterations < 1 or self.scenarios_per_step < 1:
            raise ValueError("iterations and scenarios_per_step must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def scenario_key(scenario_id: str) -> int:
    return zlib.crc32(scenario_id.encode())


def sample_rng(seed: int, scenario_id: str, step: int, index: int, stream: int = 0) -> np.random.Generator:
    """Per-sample stream derived from (run seed, scenario, step, sample index)."""
    return np.random.default_rng([seed, scenario_key(scenario_id), step, index, stream])


# --- rollouts --------------------------------------------------------------


@dataclass
class RolloutGroup:
    scenario_id: str
    features: np.ndarray
    samples: list[SampleOutput]
    parsed: list[ParsedResponse]
    rewards: list[RewardBreakdown]
    verdicts: list[teacher.Verdict]
    scores: BatchScores

    @property
    def r_traj(self) -> np.ndarray:
        return np.array([r.r_traj for r in self.rewards])


@dataclass
class FeedbackSamples:
    queries: np.ndarray
    samples: list[SampleOutput]
    parsed: list[ParsedResponse]
    rewards: list[RewardBreakdown]
    reports: list[teacher.DiagnosticReport | None]

    @property
    def r_traj(self) -> np.ndarray:
        return np.array([r.r_traj for r in self.rewards])


def rollout_group(params: PolicyParams, record: ScenarioRecord, cfg: TrainConfig, step: int = 0, metric_cfg: MetricConfig | None = None) -> RolloutGroup:
    feat = scene_features(record.scene)
    rngs = [sample_rng(cfg.seed, record.scenario_id, step, i) for i in range(cfg.n)]
    samples = policy.generate(params, np.repeat(feat[None], cfg.n, axis=0), cfg.temperature, rngs)
    parsed = [parse(s.tokens) for s in samples]
    rewards, scores = batch_rewards(record.scene, parsed, record.gt_trajectory, metric_cfg)
    verdicts = [teacher.classify(r, cfg.s) for r in rewards]
    return RolloutGroup(record.scenario_id, feat, samples, parsed, rewards, verdicts, scores)


def feedback_queries(record: ScenarioRecord, group: RolloutGroup, cfg: TrainConfig, rule_only: bool = False, metric_cfg: MetricConfig | None = None):
    queries, reports = [], []
    for i, (resp, verdict) in enumerate(zip(group.parsed, group.verdicts)):
        correct = verdict is teacher.Verdict.CORRECT
        if rule_only:
            queries.append(teacher.rule_feedback_query(group.features, resp, correct))
            reports.append(None)
            continue
        report = None
        if not correct:
            report = teacher.diagnose(
                record.scene, resp, record.gt_trajectory, record.gt_meta, group.scores.sub_scores(i), cfg.s, metric_cfg
            )
        queries.append(teacher.build_feedback_query(group.features, resp, report))
        reports.append(report)
    return np.stack(queries), reports


def feedback_rollout(
    params: PolicyParams,
    record: ScenarioRecord,
    group: RolloutGroup,
    cfg: TrainConfig,
    step: int = 0,
    rule_only: bool = False,
    metric_cfg: MetricConfig | None = None,
) -> FeedbackSamples:
    queries, reports = feedback_queries(record, group, cfg, rule_only, metric_cfg)
    rngs = [sample_rng(cfg.seed, record.scenario_id, step, i, stream=1) for i in range(cfg.n)]
    samples = policy.generate(params, queries, cfg.temperature, rngs, conditioning="feedback")
    parsed = [parse(s.tokens) for s in samples]
    rewards, _ = batch_rewards(record.scene, parsed, record.gt_trajectory, metric_cfg)
    return FeedbackSamples(queries, samples, parsed, rewards, reports)


# --- final batch -----------------------------------------------------------


@dataclass
class Entry:
    tokens: list[int]
    old_logprob: np.ndarray | None  # base-conditioned, under the rollout policy
    reward: RewardBreakdown
    origin: Origin
    source: int  # index into the on-policy group or the feedback samples


@dataclass
class FinalBatch:
    scenario_id: str
    features: np.ndarray  # base features, used for every entry
    entries: list[Entry]
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.reward.total for e in self.entries])

    def count(self, origin: Origin) -> int:
        return sum(e.origin is origin for e in self.entries)


def argmax_index(values) -> int:
    """First index of the maximum (ties go to the lowest index)."""
    return int(np.argmax(np.asarray(values)))


def select_refinements(group: RolloutGroup, fb: FeedbackSamples, cfg: TrainConfig, rng: np.random.Generator) -> list[Entry]:
    r_max = float(np.max(group.r_traj))
    candidates = [j for j, r in enumerate(fb.r_traj) if r > r_max]
    take = min(cfg.k, len(candidates))
    if take == len(candidates):
        chosen = candidates
    else:
        chosen = sorted(int(c) for c in rng.choice(candidates, size=take, replace=False))
    out = [Entry(list(fb.samples[j].tokens), None, fb.rewards[j], Origin.FEEDBACK, j) for j in chosen]
    best = argmax_index(group.r_traj)
    for _ in range(cfg.k - take):
        s = group.samples[best]
        out.append(Entry(list(s.tokens), s.per_token_logprob.copy(), group.rewards[best], Origin.DUPLICATE, best))
    return out


def compute_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    std = float(np.std(r))
    if std < STD_GUARD:
        return np.zeros_like(r)
    return (r - float(np.mean(r))) / std


def build_final_batch(
    params: PolicyParams,
    record: ScenarioRecord,
    cfg: TrainConfig,
    step: int,
    metric_cfg: MetricConfig | None = None,
) -> tuple[FinalBatch, RolloutGroup, FeedbackSamples | None]:
    group = rollout_group(params, record, cfg, step, metric_cfg)
    entries = [
        Entry(list(s.tokens), s.per_token_logprob, rw, Origin.ONPOLICY, i)
        for i, (s, rw) in enumerate(zip(group.samples, group.rewards))
    ]
    fb = None
    if cfg.mode is Mode.GT_GRPO:
        gt_tokens = encode_gt(record)
        old = policy.logprob(params, group.features, gt_tokens)
        gt_reward, _ = batch_rewards(record.scene, [parse(gt_tokens)], record.gt_trajectory, metric_cfg)
        entries += [Entry(list(gt_tokens), old, gt_reward[0], Origin.GT, -1) for _ in range(cfg.k)]
    elif cfg.mode in (Mode.ELF, Mode.RULE_GRPO):
        fb = feedback_rollout(params, record, group, cfg, step, cfg.mode is Mode.RULE_GRPO, metric_cfg)
        rng = sample_rng(cfg.seed, record.scenario_id, step, cfg.n, stream=2)
        entries += select_refinements(group, fb, cfg, rng)
    batch = FinalBatch(record.scenario_id, group.features, entries)
    batch.advantages = compute_advantages(batch.rewards)
    return batch, group, fb


# --- objective -------------------------------------------------------------


def shaping(p, gamma: float):
    return p / (p + gamma)


@dataclass
class ObjectiveTerms:
    objective: float
    surrogate: float
    shaped: float
    kl: float
    clip_fraction: float
    clipped_tokens: dict[str, int]
    per_entry: list[dict]


def objective_and_grad(
    params: PolicyParams,
    batches: list[FinalBatch],
    cfg: TrainConfig,
    weights: dict | None = None,
    need_grad: bool = True,
) -> tuple[ObjectiveTerms, dict[str, np.ndarray] | None]:
    """J averaged over scenario batches, and its exact gradient.

    Old-policy log-probs come from the entries (recorded at rollout time), so
    ``old_params`` is implicit. ``weights`` overrides ``params.weights`` (used by
    finite-difference tests).
    """
    feats, token_lists, meta = [], [], []
    for b, fb in enumerate(batches):
        for e, ent in enumerate(fb.entries):
            if not ent.tokens:
                continue
            feats.append(fb.features)
            token_lists.append(ent.tokens)
            meta.append((b, e))
    G = len(batches)
    empty = ObjectiveTerms(0.0, 0.0, 0.0, 0.0, 0.0, {o.value: 0 for o in Origin}, [])
    if not token_lists:
        return empty, (policy.zeros_like(params) if need_grad else None)

    batch = Batch.build(np.stack(feats), token_lists)
    lp, cache = policy.forward(params, batch, weights)
    lp_ref, _ = policy.forward(params.reference_params(), batch)
    mask = batch.mask
    g = np.zeros_like(lp)
    sur_total = shaped_total = kl_total = 0.0
    clip_tokens = {o.value: 0 for o in Origin}
    onpolicy_tokens = 0
    per_entry = []
    for row, (b, e) in enumerate(meta):
        fb = batches[b]
        ent = fb.entries[e]
        A = float(fb.advantages[e])
        L = len(ent.tokens)
        x = lp[row, :L]
        n_entries = len(fb.entries)
        if ent.origin is Origin.FEEDBACK:
            p = np.exp(x)
            f = shaping(p, cfg.gamma)
            val = float(np.mean(f)) * A / cfg.k
            if cfg.freeze_shaping_denominator:
                df = p / (p + cfg.gamma)
            else:
                df = p * cfg.gamma / (p + cfg.gamma) ** 2
            g[row, :L] += df * A / (cfg.k * L)
            shaped_total += val
            clipped = 0
        else:
            old = ent.old_logprob
            c = np.exp(x - old)
            cc = np.clip(c, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon)
            unclipped = c * A <= cc * A
            terms = np.where(unclipped, c * A, cc * A)
            val = float(np.mean(terms)) / cfg.n
            # min() picks the clipped constant where it is strictly smaller
            active = unclipped | (cc == c)
            g[row, :L] += np.where(active, c * A, 0.0) / (cfg.n * L)
            sur_total += val
            clipped = int(np.sum(~active))
            onpolicy_tokens += L
        clip_tokens[ent.origin.value] += clipped
        r = lp_ref[row, :L]
        kl = float(np.mean(policy.k3(x, r)))
        kl_total += kl / n_entries
        g[row, :L] += -cfg.beta * (1.0 - np.exp(r - x)) / (n_entries * L)
        if not (np.isfinite(val) and np.isfinite(kl)):
            raise NumericalFailure(f"non-finite objective term in {fb.scenario_id} entry {e} ({ent.origin.value})")
        per_entry.append({"batch": b, "entry": e, "origin": ent.origin.value, "value": val, "kl": kl, "clipped_tokens": clipped})

    J = (sur_total + shaped_total - cfg.beta * kl_total) / G
    terms = ObjectiveTerms(
        objective=J,
        surrogate=sur_total / G,
        shaped=shaped_total / G,
        kl=kl_total / G,
        clip_fraction=(sum(clip_tokens[o.value] for o in CLIPPED_ORIGINS) / onpolicy_tokens) if onpolicy_tokens else 0.0,
        clipped_tokens=clip_tokens,
        per_entry=per_entry,
    )
    if not need_grad:
        return terms, None
    grads = policy.backward(params, batch, cache, np.where(mask, g, 0.0) / G, weights)
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericalFailure(f"non-finite gradient for {k}")
    return terms, grads


# --- training --------------------------------------------------------------

METRIC_COLUMNS = (
    "step",
    "epoch",
    "mean_pdms",
    "mean_total_reward",
    "pdms_fail_ratio",
    "nc_fail_ratio",
    "dac_fail_ratio",
    "feedback_injected",
    "objective",
    "kl",
    "clip_fraction",
)


def group_failures(group: RolloutGroup, s: float) -> tuple[bool, bool, bool]:
    """Total failure flags (pdms, nc, dac): every rollout fails the criterion."""
    return (
        bool(np.all(group.r_traj <= s)),
        bool(np.all(group.scores.nc == 0)),
        bool(np.all(group.scores.dac == 0)),
    )


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def batch_log_record(step: int, epoch: int, batch: FinalBatch, group: RolloutGroup, fb: FeedbackSamples | None, s: float, terms: ObjectiveTerms | None) -> dict:
    fails = group_failures(group, s)
    rec = {
        "step": step,
        "epoch": epoch,
        "scenario_id": batch.scenario_id,
        "onpolicy": [
            {"tokens": list(map(int, smp.tokens)), **_reward_dict(rw), "nc": int(group.scores.nc[i]), "dac": int(group.scores.dac[i])}
            for i, (smp, rw) in enumerate(zip(group.samples, group.rewards))
        ],
        "final_batch": [
            {"origin": e.origin.value, "source": e.source, "tokens": list(map(int, e.tokens)), **_reward_dict(e.reward), "advantage": float(a)}
            for e, a in zip(batch.entries, batch.advantages)
        ],
        "total_failure": {"pdms": fails[0], "nc": fails[1], "dac": fails[2]},
    }
    if fb is not None:
        rec["feedback"] = [
            {
                "tokens": list(map(int, smp.tokens)),
                **_reward_dict(rw),
                "report": rep.to_dict() if rep is not None else None,
            }
            for smp, rw, rep in zip(fb.samples, fb.rewards, fb.reports)
        ]
    if terms is not None:
        rec["objective"] = {"J": terms.objective, "surrogate": terms.surrogate, "shaped": terms.shaped, "kl": terms.kl, "clip_fraction": terms.clip_fraction}
    return rec


def _reward_dict(rw: RewardBreakdown) -> dict:
    return {"r_traj": rw.r_traj, "r_fmt": rw.r_fmt, "r_goal": rw.r_goal, "total": rw.total}


@dataclass
class StepResult:
    step: int
    epoch: int
    batches: list[FinalBatch]
    groups: list[RolloutGroup]
    feedback: list[FeedbackSamples | None]
    terms: ObjectiveTerms
    metrics: dict


def train_step(params: PolicyParams, records: list[ScenarioRecord], cfg: TrainConfig, step: int, epoch: int = 0, metric_cfg: MetricConfig | None = None) -> StepResult:
    """Rollout under the current (old) params, then ``iterations`` ascent passes in place."""
    batches, groups, fbs = [], [], []
    for rec in records:
        b, g, f = build_final_batch(params, rec, cfg, step, metric_cfg)
        batches.append(b)
        groups.append(g)
        fbs.append(f)
    first = None
    for _ in range(cfg.iterations):
        terms, grads = objective_and_grad(params, batches, cfg)
        first = first or terms
        policy.sgd_update(params, grads, cfg.learning_rate, cfg.clip_norm, ascend=True)
    fails = np.array([group_failures(g, cfg.s) for g in groups], dtype=float)
    metrics = {
        "step": step,
        "epoch": epoch,
        "mean_pdms": float(np.mean([g.r_traj.mean() for g in groups])),
        "mean_total_reward": float(np.mean([np.mean([r.total for r in g.rewards]) for g in groups])),
        "pdms_fail_ratio": float(fails[:, 0].mean()),
        "nc_fail_ratio": float(fails[:, 1].mean()),
        "dac_fail_ratio": float(fails[:, 2].mean()),
        "feedback_injected": int(sum(b.count(Origin.FEEDBACK) for b in batches)),
        "objective": first.objective,
        "kl": first.kl,
        "clip_fraction": first.clip_fraction,
    }
    return StepResult(step, epoch, batches, groups, fbs, first, metrics)


def _truncate_logs(out: Path, start_step: int) -> None:
    """Drop log rows at or past ``start_step`` (left by a run that died mid-epoch)."""
    csv_path, jsonl_path = out / "metrics.csv", out / "rollouts.jsonl"
    lines = csv_path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < start_step]
    csv_path.write_text("".join(keep))
    if jsonl_path.exists():
        rows = jsonl_path.read_text().splitlines(keepends=True)
        jsonl_path.write_text("".join(r for r in rows if json.loads(r)["step"] < start_step))


def epoch_order(n_records: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xE70C, epoch]).permutation(n_records)


def train(
    params: PolicyParams,
    corpus: list[ScenarioRecord],
    cfg: TrainConfig,
    epochs: int,
    out_dir: str | Path | None = None,
    start_step: int = 0,
    start_epoch: int = 0,
    callback=None,
    metric_cfg: MetricConfig | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Run ``epochs`` passes over ``corpus``. Returns trained params and per-step metrics.

    With ``out_dir`` set, appends to ``metrics.csv`` and ``rollouts.jsonl`` and
    writes ``last.ckpt`` after every epoch (and before re-raising a numerical
    failure).
    """
    if not corpus:
        raise ValueError("empty training corpus")
    params = params.copy()
    if params.reference is None:
        raise ValueError("params need a frozen reference snapshot (run SFT first)")
    out = Path(out_dir) if out_dir is not None else None
    csv_fh = jsonl_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        fresh = not csv_path.exists() or start_step == 0
        if not fresh:
            _truncate_logs(out, start_step)
        csv_fh = open(csv_path, "w" if fresh else "a", newline="")
        jsonl_fh = open(out / "rollouts.jsonl", "w" if fresh else "a")
        writer = csv.writer(csv_fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRIC_COLUMNS)
    history = []
    step = start_step
    spe = cfg.scenarios_per_step
    try:
        for epoch in range(start_epoch, start_epoch + epochs):
            order = epoch_order(len(corpus), cfg.seed, epoch)
            for start in range(0, len(order), spe):
                recs = [corpus[i] for i in order[start : start + spe]]
                res = train_step(params, recs, cfg, step, epoch, metric_cfg)
                history.append(res.metrics)
                if out is not None:
                    writer.writerow([_fmt(res.metrics[c]) for c in METRIC_COLUMNS])
                    for b, g, f in zip(res.batches, res.groups, res.feedback):
                        jsonl_fh.write(json.dumps(batch_log_record(step, epoch, b, g, f, cfg.s, res.terms), sort_keys=True) + "\n")
                if callback is not None:
                    callback(res)
                step += 1
            if out is not None:
                csv_fh.flush()
                jsonl_fh.flush()
                policy.save_checkpoint(params, out / "last.ckpt", extra={"step": step, "epoch": epoch + 1, "train": cfg.to_dict()})
    except NumericalFailure:
        if out is not None:
            policy.save_checkpoint(params, out / "abort.ckpt", extra={"step": step, "train": cfg.to_dict()})
        raise
    finally:
        if csv_fh is not None:
            csv_fh.close()
            jsonl_fh.close()
    return params, history

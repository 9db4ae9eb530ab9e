"""Rule-based teacher: classify responses, diagnose failures, encode feedback.

The teacher has privileged access to the scene and the ground truth. For a
wrong response it writes a five-section report; for a correct one it emits a
single positive flag. Either is encoded into the 32-dim feedback block that
is appended to the base features.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import response
from .features import BASE_DIM, FEEDBACK_DIM, FULL_DIM
from .metrics import MetricConfig, SubScores, pdms, score_batch
from .response import GRID_COLS, GRID_ROWS, NO_OBSTACLE, OBS_BASE, ParsedResponse
from .rewards import RewardBreakdown
from .scene import DT, HORIZON_STEPS, LATERAL, LONGITUDINAL, MetaAction, Scene, Trajectory, meta_from_dict, meta_to_dict

EP_DEFICIT = 0.9
MAX_BUCKET = 3

SECTION_NAMES = (
    "Meta Action Analysis",
    "Think Process Analysis",
    "Safety Failure Analysis",
    "Efficiency Failure Analysis",
    "Actionable Correction",
)

# feedback block layout (offsets inside the 32-dim block)
FB_LONG = 0
FB_LAT = 4
FB_ROW = 9
FB_COLS = 14
FB_SAFETY = 17
FB_EFFICIENCY = 20
FB_LAT_BUCKET = 22
FB_LONG_BUCKET = 23
FB_POSITIVE = 24
FB_NEGATIVE = 25
FB_RESPONSE = 26
# lateral pooling of the 5 obstacle columns onto (left, centre, right)
_COL_POOL = {0: (0, 1.0), 1: (0, 0.5), 2: (1, 1.0), 3: (2, 0.5), 4: (2, 1.0)}


class Verdict(str, enum.Enum):
    CORRECT = "correct"
    WRONG = "wrong"


class SafetyKind(str, enum.Enum):
    NONE = "none"
    COLLISION = "collision"
    CORRIDOR = "corridor_violation"
    TTC = "ttc_violation"


class EfficiencyKind(str, enum.Enum):
    NONE = "none"
    PROGRESS = "progress_deficit"
    DISCOMFORT = "discomfort"


_SAFETY = (SafetyKind.COLLISION, SafetyKind.CORRIDOR, SafetyKind.TTC)
_EFFICIENCY = (EfficiencyKind.PROGRESS, EfficiencyKind.DISCOMFORT)


@dataclass(frozen=True)
class SafetyFailure:
    kind: SafetyKind = SafetyKind.NONE
    step: int | None = None
    obstacle: int | None = None


@dataclass(frozen=True)
class EfficiencyFailure:
    kind: EfficiencyKind = EfficiencyKind.NONE
    ep: float | None = None


@dataclass(frozen=True)
class DiagnosticReport:
    predicted_meta: MetaAction | None
    corrected_meta: MetaAction
    predicted_cell: int | None
    true_cell: int
    safety: SafetyFailure
    efficiency: EfficiencyFailure
    lateral_bucket: int
    longitudinal_bucket: int

    @property
    def meta_mismatch(self) -> bool:
        return self.predicted_meta != self.corrected_meta

    @property
    def cell_mismatch(self) -> bool:
        return self.predicted_cell != self.true_cell

    def to_dict(self) -> dict:
        s, e = self.safety, self.efficiency
        return {
            SECTION_NAMES[0]: {
                "predicted": meta_to_dict(self.predicted_meta) if self.predicted_meta else None,
                "corrected": meta_to_dict(self.corrected_meta),
            },
            SECTION_NAMES[1]: {
                "predicted_cell": response.token_name(self.predicted_cell) if self.predicted_cell is not None else None,
                "true_cell": response.token_name(self.true_cell),
                "mismatch": self.cell_mismatch,
            },
            SECTION_NAMES[2]: {"type": s.kind.value, "step": s.step, "obstacle": s.obstacle},
            SECTION_NAMES[3]: {"type": e.kind.value, "ep": e.ep},
            SECTION_NAMES[4]: {"lateral_m": self.lateral_bucket, "longitudinal_mps": self.longitudinal_bucket},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticReport":
        names = {response.token_name(t): t for t in range(OBS_BASE, NO_OBSTACLE + 1)}
        m, t, s, e, c = (d[k] for k in SECTION_NAMES)
        return cls(
            meta_from_dict(m["predicted"]) if m["predicted"] else None,
            meta_from_dict(m["corrected"]),
            names[t["predicted_cell"]] if t["predicted_cell"] is not None else None,
            names[t["true_cell"]],
            SafetyFailure(SafetyKind(s["type"]), s["step"], s["obstacle"]),
            EfficiencyFailure(EfficiencyKind(e["type"]), e["ep"]),
            int(c["lateral_m"]),
            int(c["longitudinal_mps"]),
        )


def classify(reward: RewardBreakdown | float, s: float = 0.8) -> Verdict:
    if not 0.0 < s < 1.0:
        raise ValueError("threshold s must lie in (0, 1)")
    r = reward.r_traj if isinstance(reward, RewardBreakdown) else float(reward)
    return Verdict.CORRECT if r > s else Verdict.WRONG


def _bucket(x: float) -> int:
    return int(np.clip(np.round(x), -MAX_BUCKET, MAX_BUCKET))


def mean_speed(traj: Trajectory, origin=(0.0, 0.0)) -> float:
    pts = np.vstack([np.asarray(origin, dtype=float)[None], traj.array])
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)) / (HORIZON_STEPS * DT))


def final_speed(traj: Trajectory) -> float:
    return float(np.linalg.norm(traj.array[-1] - traj.array[-2]) / DT)


def corrections(scene: Scene, traj: Trajectory, gt: Trajectory) -> tuple[int, int]:
    """(lateral, longitudinal) buckets: endpoint corridor-offset gap in metres and
    mean-speed gap in m/s, rounded and clipped to +-3."""
    _, lat, _ = scene.corridor.polyline.project(np.stack([gt.array[-1], traj.array[-1]]))
    origin = scene.ego.position
    return _bucket(lat[0] - lat[1]), _bucket(mean_speed(gt, origin) - mean_speed(traj, origin))


def diagnose(
    scene: Scene,
    resp: ParsedResponse,
    gt: Trajectory,
    gt_meta: MetaAction,
    scores: SubScores,
    s: float = 0.8,
    cfg: MetricConfig | None = None,
) -> DiagnosticReport:
    r_traj = pdms(scores) if resp.well_formed_trajectory else 0.0
    if classify(r_traj, s) is Verdict.CORRECT:
        raise ValueError(f"diagnose called on a correct response (r_traj={r_traj:.3f} > s={s})")
    detail = score_batch(scene, [resp.trajectory], cfg)

    if scores.nc == 0:
        safety = SafetyFailure(SafetyKind.COLLISION, int(detail.collision_step[0]), int(detail.collision_obstacle[0]))
    elif scores.dac == 0:
        safety = SafetyFailure(SafetyKind.CORRIDOR, int(detail.dac_step[0]))
    elif scores.ttc == 0:
        safety = SafetyFailure(SafetyKind.TTC, int(detail.ttc_step[0]))
    else:
        safety = SafetyFailure()

    if scores.ep < EP_DEFICIT:
        efficiency = EfficiencyFailure(EfficiencyKind.PROGRESS, float(scores.ep))
    elif scores.comfort == 0:
        efficiency = EfficiencyFailure(EfficiencyKind.DISCOMFORT)
    elif safety.kind is SafetyKind.NONE:
        # only reachable for malformed answers, which earn no progress credit
        efficiency = EfficiencyFailure(EfficiencyKind.PROGRESS, 0.0)
    else:
        efficiency = EfficiencyFailure()

    lat_b, long_b = corrections(scene, resp.trajectory, gt)
    return DiagnosticReport(
        predicted_meta=resp.meta,
        corrected_meta=gt_meta,
        predicted_cell=resp.obstacle_cell,
        true_cell=response.key_obstacle_cell(scene, gt),
        safety=safety,
        efficiency=efficiency,
        lateral_bucket=lat_b,
        longitudinal_bucket=long_b,
    )


# --- encoding --------------------------------------------------------------


def _fold_response(block: np.ndarray, resp: ParsedResponse) -> None:
    tr = resp.trajectory
    end = tr.array[-1]
    block[FB_RESPONSE + 0] = end[0] / 40.0
    block[FB_RESPONSE + 1] = end[1] / 10.0
    block[FB_RESPONSE + 2] = mean_speed(tr) / 10.0
    block[FB_RESPONSE + 3] = final_speed(tr) / 10.0
    if resp.meta is not None:
        block[FB_RESPONSE + 4] = LONGITUDINAL.index(resp.meta.longitudinal) / 3.0
        block[FB_RESPONSE + 5] = LATERAL.index(resp.meta.lateral) / 4.0
    else:
        block[FB_RESPONSE + 4 : FB_RESPONSE + 6] = -1.0


def encode(report: DiagnosticReport | None) -> np.ndarray:
    """Feedback block without the folded response: a report (wrong) or the
    positive flag (``None``)."""
    block = np.zeros(FEEDBACK_DIM)
    if report is None:
        block[FB_POSITIVE] = 1.0
        return block
    block[FB_LONG + LONGITUDINAL.index(report.corrected_meta.longitudinal)] = 1.0
    block[FB_LAT + LATERAL.index(report.corrected_meta.lateral)] = 1.0
    if report.true_cell != NO_OBSTACLE:
        row, col = divmod(report.true_cell - OBS_BASE, GRID_COLS)
        block[FB_ROW + row] = 1.0
        slot, weight = _COL_POOL[col]
        block[FB_COLS + slot] = weight
    if report.safety.kind is not SafetyKind.NONE:
        block[FB_SAFETY + _SAFETY.index(report.safety.kind)] = 1.0
    if report.efficiency.kind is not EfficiencyKind.NONE:
        block[FB_EFFICIENCY + _EFFICIENCY.index(report.efficiency.kind)] = 1.0
    block[FB_LAT_BUCKET] = report.lateral_bucket / MAX_BUCKET
    block[FB_LONG_BUCKET] = report.longitudinal_bucket / MAX_BUCKET
    block[FB_NEGATIVE] = 1.0
    return block


@dataclass(frozen=True)
class DecodedFeedback:
    positive: bool
    negative: bool
    corrected_meta: MetaAction | None
    true_cell: int | None
    safety: SafetyKind | None
    efficiency: EfficiencyKind | None
    lateral_bucket: int | None
    longitudinal_bucket: int | None


def decode(block: np.ndarray) -> DecodedFeedback:
    block = np.asarray(block, dtype=float)
    if block.shape[-1] == FULL_DIM:
        block = block[BASE_DIM:]
    pos, neg = bool(block[FB_POSITIVE] > 0.5), bool(block[FB_NEGATIVE] > 0.5)
    if not neg:
        return DecodedFeedback(pos, False, None, None, None, None, None, None)
    meta = MetaAction(
        LONGITUDINAL[int(np.argmax(block[FB_LONG : FB_LONG + 4]))],
        LATERAL[int(np.argmax(block[FB_LAT : FB_LAT + 5]))],
    )
    rows = block[FB_ROW : FB_ROW + GRID_ROWS]
    cell = NO_OBSTACLE
    if rows.max() > 0.5:
        left, centre, right = block[FB_COLS : FB_COLS + 3]
        if centre > 0.5:
            col = 2
        elif left > 0:
            col = 0 if left > 0.75 else 1
        else:
            col = 4 if right > 0.75 else 3
        cell = response.cell_token(int(np.argmax(rows)), col)
    saf = block[FB_SAFETY : FB_SAFETY + 3]
    eff = block[FB_EFFICIENCY : FB_EFFICIENCY + 2]
    return DecodedFeedback(
        pos,
        neg,
        meta,
        cell,
        _SAFETY[int(np.argmax(saf))] if saf.max() > 0.5 else SafetyKind.NONE,
        _EFFICIENCY[int(np.argmax(eff))] if eff.max() > 0.5 else EfficiencyKind.NONE,
        int(round(block[FB_LAT_BUCKET] * MAX_BUCKET)),
        int(round(block[FB_LONG_BUCKET] * MAX_BUCKET)),
    )


def build_feedback_query(base_feat: np.ndarray, resp: ParsedResponse, report: DiagnosticReport | None) -> np.ndarray:
    """q_fb: base features, then the report (wrong) or positive flag (correct)
    with the response itself folded into the reserved dims."""
    base_feat = np.asarray(base_feat, dtype=float)[:BASE_DIM]
    block = encode(report)
    _fold_response(block, resp)
    return np.concatenate([base_feat, block])


def rule_feedback_query(base_feat: np.ndarray, resp: ParsedResponse, correct: bool) -> np.ndarray:
    """Flag-only feedback: positive or negative, no diagnostic fields."""
    block = np.zeros(FEEDBACK_DIM)
    block[FB_POSITIVE if correct else FB_NEGATIVE] = 1.0
    _fold_response(block, resp)
    return np.concatenate([np.asarray(base_feat, dtype=float)[:BASE_DIM], block])

"""Run configuration, manifests, evaluation and the comparison reports."""

from __future__ import annotations

import csv
import io
import json
import os
import time
import uuid
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import policy
from .curation import CurationConfig
from .features import scene_features
from .grpo import TrainConfig
from .metrics import MetricConfig, epdms, extended_sub_scores, pdms, planning_accuracy, score_batch
from .response import parse
from .scenario import corpus_hash, uniform_mix
from .scene import MetaAction, ScenarioRecord, Trajectory
from .sft import SFTConfig

FORMAT_VERSION = "drivefb-run/1"
WORKERS_ENV = "DRIVEFB_WORKERS"


def worker_count() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


# --- config ----------------------------------------------------------------


@dataclass
class ScenarioConfig:
    count: int = 200
    seed: int = 3
    family_mix: dict = field(default_factory=uniform_mix)


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    policy: SFTConfig = field(default_factory=SFTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in ("scenario", "metrics", "policy", "curation")}
        d["train"] = self.train.to_dict()
        return d


_SECTIONS = {
    "scenario": ScenarioConfig,
    "metrics": MetricConfig,
    "policy": SFTConfig,
    "train": TrainConfig,
    "curation": CurationConfig,
}


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        section = d.get(name, {})
        allowed = {f.name for f in fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
        parts[name] = cls(**section)
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return config_from_dict(json.loads(Path(path).read_text()))


# --- manifest --------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    command: str
    config: dict
    corpus_hash: str
    checkpoint_lineage: tuple[str, ...]
    seed: int
    mode: str
    started: float
    finished: float
    format_version: str = FORMAT_VERSION

    def write(self, target: str | Path) -> Path:
        """Write to ``target`` (a directory gets ``manifest.json``); refuses to overwrite."""
        path = Path(target)
        if path.is_dir():
            path = path / "manifest.json"
        with open(path, "x") as fh:  # never overwrite an existing run
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
        return path


def new_run_id(command: str, seed: int) -> str:
    return f"{command}-{seed}-{uuid.uuid4().hex[:8]}"


def make_manifest(run_id, command, cfg: RunConfig, corpus, lineage, seed, mode, started) -> RunManifest:
    return RunManifest(
        run_id=run_id,
        command=command,
        config=cfg.to_dict(),
        corpus_hash=corpus_hash(corpus) if corpus else "",
        checkpoint_lineage=tuple(str(p) for p in lineage),
        seed=seed,
        mode=mode,
        started=started,
        finished=time.time(),
    )


# --- evaluation ------------------------------------------------------------

SCORE_COLUMNS = ("nc", "dac", "ttc", "comfort", "ep", "pdms", "ddc", "tlc", "lk", "hc", "ec", "epdms")


@dataclass
class EvalReport:
    label: str
    corpus_hash: str
    scenario_ids: list[str]
    table: dict[str, list[float]]  # column -> per-scenario values
    planning: tuple[float, float, float]  # speed, path, overall accuracy
    failure: tuple[float, float, float]  # pdms < s, nc = 0, dac = 0 fractions

    @property
    def means(self) -> dict[str, float]:
        return {c: float(np.mean(self.table[c])) for c in SCORE_COLUMNS}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "corpus_hash": self.corpus_hash,
            "scenario_ids": self.scenario_ids,
            "table": self.table,
            "means": self.means,
            "planning_accuracy": {"speed": self.planning[0], "path": self.planning[1], "overall": self.planning[2]},
            "failure_ratios": {"pdms": self.failure[0], "nc": self.failure[1], "dac": self.failure[2]},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        pa, fr = d["planning_accuracy"], d["failure_ratios"]
        return cls(
            d["label"],
            d["corpus_hash"],
            list(d["scenario_ids"]),
            {c: list(map(float, d["table"][c])) for c in SCORE_COLUMNS},
            (pa["speed"], pa["path"], pa["overall"]),
            (fr["pdms"], fr["nc"], fr["dac"]),
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _meta_match(pred: MetaAction | None, gt: MetaAction) -> MetaAction:
    # a missing meta-action counts as wrong on both axes
    if pred is not None:
        return pred
    lon = next(v for v in type(gt.longitudinal) if v != gt.longitudinal)
    lat = next(v for v in type(gt.lateral) if v != gt.lateral)
    return MetaAction(lon, lat)


def evaluate_trajectories(
    corpus: list[ScenarioRecord],
    trajectories: list[Trajectory],
    metas: list[MetaAction | None] | None = None,
    well_formed: list[bool] | None = None,
    label: str = "",
    s: float = 0.8,
    cfg: MetricConfig | None = None,
) -> EvalReport:
    if not corpus:
        raise ValueError("cannot evaluate an empty corpus")
    table = {c: [] for c in SCORE_COLUMNS}
    for i, (rec, traj) in enumerate(zip(corpus, trajectories)):
        ok = True if well_formed is None else well_formed[i]
        sub = score_batch(rec.scene, [traj], cfg).sub_scores(0)
        ext = extended_sub_scores(rec.scene, traj, None, cfg)
        row = {
            "nc": sub.nc, "dac": sub.dac, "ttc": sub.ttc, "comfort": sub.comfort, "ep": sub.ep,
            "pdms": pdms(sub) if ok else 0.0,
            "ddc": ext.ddc, "tlc": ext.tlc, "lk": ext.lk, "hc": ext.hc, "ec": ext.ec,
            "epdms": epdms(ext) if ok else 0.0,
        }
        for c in SCORE_COLUMNS:
            table[c].append(float(row[c]))
    gt_meta = [r.gt_meta for r in corpus]
    pred_meta = [_meta_match(m, g) for m, g in zip(metas, gt_meta)] if metas is not None else gt_meta
    pd = np.asarray(table["pdms"])
    failure = (float(np.mean(pd <= s)), float(np.mean(np.asarray(table["nc"]) == 0)), float(np.mean(np.asarray(table["dac"]) == 0)))
    return EvalReport(label, corpus_hash(corpus), [r.scenario_id for r in corpus], table, planning_accuracy(pred_meta, gt_meta), failure)


def evaluate(params: policy.PolicyParams, corpus: list[ScenarioRecord], label: str = "", s: float = 0.8, cfg: MetricConfig | None = None) -> EvalReport:
    """Greedy decode every scenario and score it."""
    if not corpus:
        raise ValueError("cannot evaluate an empty corpus")
    feats = np.stack([scene_features(r.scene) for r in corpus])
    parsed = [parse(o.tokens) for o in policy.greedy(params, feats)]
    return evaluate_trajectories(
        corpus,
        [p.trajectory for p in parsed],
        [p.meta for p in parsed],
        [p.well_formed_trajectory for p in parsed],
        label,
        s,
        cfg,
    )


def evaluate_checkpoint(path: str | Path, corpus, label: str = "", s: float = 0.8, cfg: MetricConfig | None = None) -> EvalReport:
    params, _ = policy.load_checkpoint(path)
    return evaluate(params, corpus, label, s, cfg)


# --- training diagnostics --------------------------------------------------


@dataclass(frozen=True)
class FailureRatios:
    epoch: int
    scenarios: int
    pdms: float
    nc: float
    dac: float
    empty: bool = False


def read_rollout_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def failure_ratios(records: list[dict]) -> list[FailureRatios]:
    """Per-epoch fractions of scenarios whose whole on-policy group failed.

    A scenario visited more than once in an epoch counts once per visit.
    An empty log yields a single all-zero entry flagged ``empty``.
    """
    by_epoch: dict[int, list[dict]] = {}
    for r in records:
        by_epoch.setdefault(int(r["epoch"]), []).append(r["total_failure"])
    if not by_epoch:
        return [FailureRatios(0, 0, 0.0, 0.0, 0.0, empty=True)]
    out = []
    for ep in sorted(by_epoch):
        f = by_epoch[ep]
        out.append(
            FailureRatios(
                ep,
                len(f),
                sum(x["pdms"] for x in f) / len(f),
                sum(x["nc"] for x in f) / len(f),
                sum(x["dac"] for x in f) / len(f),
            )
        )
    return out


# --- ablation table --------------------------------------------------------

ABLATION_COLUMNS = ("nc", "dac", "ttc", "comfort", "ep", "pdms", "epdms")


def ablation_report(reports: dict[str, EvalReport]) -> tuple[list[dict], str, str]:
    """One row per mode. Returns (rows, CSV text, aligned text table)."""
    if not reports:
        raise ValueError("no reports to compare")
    hashes = {r.corpus_hash for r in reports.values()}
    if len(hashes) != 1:
        raise ValueError(f"reports come from different corpora: {sorted(hashes)}")
    rows = []
    for mode, rep in reports.items():
        m = rep.means
        row = {"mode": mode, **{c: m[c] for c in ABLATION_COLUMNS}}
        row.update(zip(("speed_acc", "path_acc", "accuracy"), rep.planning))
        row["pdms_total_failure"] = rep.failure[0]
        rows.append(row)
    cols = list(rows[0])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    cells = [cols] + [[r["mode"]] + [f"{r[c]:.4f}" for c in cols[1:]] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.rjust(wd) if i else v.ljust(wd) for i, (v, wd) in enumerate(zip(row, widths))) for row in cells]
    return rows, buf.getvalue(), "\n".join(lines) + "\n"

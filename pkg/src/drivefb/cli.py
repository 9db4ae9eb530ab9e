"""Command line: gen-scenarios, sft, curate, train, eval, diagnose, score, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import curation, grpo, harness, policy, response, scenario, sft, teacher
from .metrics import epdms, extended_sub_scores, pdms, score_batch
from .response import ParsedResponse, parse
from .rewards import total_reward
from .scene import FAMILIES, HORIZON_STEPS, Trajectory

log = logging.getLogger("drivefb")

MODE_NAMES = {"grpo": "grpo", "gt-grpo": "gt_grpo", "rule-grpo": "rule_grpo", "elf": "elf"}


class ContractError(Exception):
    pass


def _parse_mix(text: str | None) -> dict[str, float]:
    if text is None or text == "uniform":
        return scenario.uniform_mix()
    if text in FAMILIES:
        return {text: 1.0}
    mix = {}
    for part in text.split(","):
        name, _, w = part.partition("=")
        mix[name.strip()] = float(w)
    return mix


def _load_subset(corpus, subset_path):
    if subset_path is None:
        return corpus
    keep = set(json.loads(Path(subset_path).read_text())["kept"])
    sub = [r for r in corpus if r.scenario_id in keep]
    if not sub:
        raise ContractError("subset selects no scenarios from the corpus")
    return sub


def _find(corpus, scenario_id):
    for r in corpus:
        if r.scenario_id == scenario_id:
            return r
    raise ContractError(f"scenario {scenario_id!r} not in corpus")


def _load_response(path) -> ParsedResponse:
    """A trajectory file holds either {"tokens": [...]} or {"waypoints": [[x, y] x 8]}."""
    d = json.loads(Path(path).read_text())
    if "tokens" in d:
        return parse(d["tokens"])
    wp = np.asarray(d["waypoints"], dtype=float)
    if wp.shape != (HORIZON_STEPS, 2):
        raise ContractError(f"waypoints must have shape ({HORIZON_STEPS}, 2)")
    return ParsedResponse(None, None, Trajectory.from_array(wp), True, True, HORIZON_STEPS)


# --- subcommands -----------------------------------------------------------


def cmd_gen_scenarios(args, cfg):
    sc = cfg.scenario
    count = args.count or sc.count
    seed = sc.seed if args.seed is None else args.seed
    mix = _parse_mix(args.mix) if args.mix else sc.family_mix
    started = time.time()
    recs = scenario.generate_corpus(count, mix, seed, cfg.metrics, workers=harness.worker_count())
    out = scenario.save_corpus(recs, args.out, seed, mix)
    response.write_vocabulary(out / "vocabulary.json")
    run_id = harness.new_run_id("gen-scenarios", seed)
    harness.make_manifest(run_id, "gen-scenarios", cfg, recs, [], seed, "", started).write(out / "run.json")
    print(f"wrote {len(recs)} scenarios to {out} (hash {scenario.corpus_hash(recs)})")


def cmd_sft(args, cfg):
    corpus = scenario.load_corpus(args.corpus)
    sc = cfg.policy
    sc = replace(
        sc,
        epochs=args.epochs if args.epochs is not None else sc.epochs,
        learning_rate=args.lr if args.lr is not None else sc.learning_rate,
        seed=args.seed if args.seed is not None else sc.seed,
    )
    started = time.time()
    pairs = sft.build_dataset(corpus, sc.feedback_per_record, sc.seed, cfg.train.s)
    params, hist = sft.run_sft(policy.init_params(sc.seed), pairs, sc)
    run_id = harness.new_run_id("sft", sc.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params.meta.update({"run_id": run_id, "stage": "sft", "final_loss": hist[-1]})
    policy.save_checkpoint(params, out)
    cfg = replace(cfg, policy=sc)
    m = harness.make_manifest(run_id, "sft", cfg, corpus, [str(out)], sc.seed, "sft", started)
    m.write(out.with_name(out.name + ".manifest.json"))
    print(f"sft: {len(pairs)} pairs, {sc.epochs} epochs, final loss {hist[-1]:.4f} -> {out}")


def cmd_curate(args, cfg):
    corpus = scenario.load_corpus(args.corpus)
    params, _ = policy.load_checkpoint(args.checkpoint)
    cc = replace(cfg.curation, N=args.N) if args.N else cfg.curation
    started = time.time()
    stats = curation.estimate_stats(params, corpus, cc, args.seed)
    kept = curation.filter(stats, cc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_id = harness.new_run_id("curate", args.seed)
    curation.write_stats_csv(stats, out / "stats.csv")
    (out / "kept.json").write_text(json.dumps({"run_id": run_id, "kept": kept}, indent=1))
    cfg = replace(cfg, curation=cc)
    harness.make_manifest(run_id, "curate", cfg, corpus, [args.checkpoint], args.seed, "", started).write(out / "manifest.json")
    print(f"kept {len(kept)}/{len(stats)} scenarios ({len(kept) / len(stats):.1%})")


def cmd_train(args, cfg):
    corpus = _load_subset(scenario.load_corpus(args.corpus), args.subset)
    tc = cfg.train
    overrides = {}
    if args.mode:
        overrides["mode"] = MODE_NAMES[args.mode]
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    tc = replace(tc, **overrides)
    out = Path(args.out_dir)
    start_step = start_epoch = 0
    ckpt_in = args.checkpoint_in
    if args.resume:
        last = out / "last.ckpt"
        if not last.exists():
            raise ContractError(f"nothing to resume in {out}")
        ckpt_in = str(last)
    params, header = policy.load_checkpoint(ckpt_in)
    if args.resume:
        start_step, start_epoch = header["extra"]["step"], header["extra"]["epoch"]
    epochs = args.epochs - start_epoch
    if epochs <= 0:
        print("nothing left to train")
        return
    started = time.time()
    run_id = header["meta"].get("run_id") if args.resume else harness.new_run_id("train", tc.seed)
    params.meta.update({"run_id": run_id, "stage": tc.mode.value})
    params, hist = grpo.train(params, corpus, tc, epochs, out, start_step, start_epoch, metric_cfg=cfg.metrics)
    policy.save_checkpoint(params, out / "final.ckpt", extra={"step": start_step + len(hist), "epoch": args.epochs})
    if not args.resume:
        cfg = replace(cfg, train=tc)
        harness.make_manifest(run_id, "train", cfg, corpus, [ckpt_in, str(out / "final.ckpt")], tc.seed, tc.mode.value, started).write(out)
    last = hist[-1] if hist else {}
    print(f"train[{tc.mode.value}]: {len(hist)} steps, last mean_pdms {last.get('mean_pdms', float('nan')):.4f} -> {out}")


def cmd_eval(args, cfg):
    corpus = _load_subset(scenario.load_corpus(args.corpus), args.subset)
    if args.expert:
        rep = harness.evaluate_trajectories(corpus, [r.gt_trajectory for r in corpus], label=args.label or "expert", s=cfg.train.s, cfg=cfg.metrics)
    else:
        if not args.checkpoint:
            raise ContractError("eval needs --checkpoint or --expert")
        rep = harness.evaluate_checkpoint(args.checkpoint, corpus, args.label or Path(args.checkpoint).stem, cfg.train.s, cfg.metrics)
    if args.out:
        rep.write(args.out)
    means = rep.means
    print(" ".join(f"{c}={means[c]:.4f}" for c in harness.ABLATION_COLUMNS))
    print("planning accuracy speed={:.4f} path={:.4f} overall={:.4f}".format(*rep.planning))


def cmd_diagnose(args, cfg):
    rec = _find(scenario.load_corpus(args.corpus), args.scenario_id)
    resp = _load_response(args.trajectory)
    sc = score_batch(rec.scene, [resp.trajectory], cfg.metrics).sub_scores(0)
    r_traj = pdms(sc) if resp.well_formed_trajectory else 0.0
    if teacher.classify(r_traj, cfg.train.s) is teacher.Verdict.CORRECT:
        print(json.dumps({"verdict": "correct", "r_traj": r_traj, "feedback": "positive"}, indent=1))
        return
    rep = teacher.diagnose(rec.scene, resp, rec.gt_trajectory, rec.gt_meta, sc, cfg.train.s, cfg.metrics)
    print(json.dumps({"verdict": "wrong", "r_traj": r_traj, "report": rep.to_dict()}, indent=1))


def cmd_score(args, cfg):
    rec = _find(scenario.load_corpus(args.corpus), args.scenario_id)
    resp = _load_response(args.trajectory)
    sc = score_batch(rec.scene, [resp.trajectory], cfg.metrics).sub_scores(0)
    ext = extended_sub_scores(rec.scene, resp.trajectory, None, cfg.metrics)
    rw = total_reward(rec.scene, resp, rec.gt_trajectory, cfg.metrics)
    out = {
        "sub_scores": {"nc": sc.nc, "dac": sc.dac, "ttc": sc.ttc, "comfort": sc.comfort, "ep": sc.ep},
        "pdms": pdms(sc),
        "epdms": epdms(ext),
        "reward": {"r_traj": rw.r_traj, "r_fmt": rw.r_fmt, "r_goal": rw.r_goal, "total": rw.total},
    }
    print(json.dumps(out, indent=1))


def cmd_report(args, cfg):
    reports = {}
    for item in args.reports:
        mode, _, path = item.partition("=")
        if not path:
            raise ContractError(f"expected MODE=PATH, got {item!r}")
        reports[mode] = harness.EvalReport.from_dict(json.loads(Path(path).read_text()))
    _, csv_text, table = harness.ablation_report(reports)
    if args.out:
        Path(args.out).with_suffix(".csv").write_text(csv_text)
        Path(args.out).with_suffix(".txt").write_text(table)
    print(table, end="")
    for path in args.rollouts or []:
        for fr in harness.failure_ratios(harness.read_rollout_log(path)):
            flag = " (empty log)" if fr.empty else ""
            print(f"{path} epoch {fr.epoch}: pdms_fail={fr.pdms:.4f} nc_fail={fr.nc:.4f} dac_fail={fr.dac:.4f} over {fr.scenarios}{flag}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drivefb", description=__doc__)
    ap.add_argument("--config", help="JSON config with scenario/metrics/policy/train/curation sections")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenarios", help="generate a seeded scenario corpus")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mix", help="'uniform', a family name, or family=weight,...")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenarios)

    p = sub.add_parser("sft", help="supervised fine-tuning from scratch")
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("curate", help="keep hard / ambiguous scenarios")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--N", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="RL fine-tuning")
    p.add_argument("--mode", choices=sorted(MODE_NAMES))
    p.add_argument("--corpus", required=True)
    p.add_argument("--subset", help="kept.json from curate")
    p.add_argument("--checkpoint-in")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", action="store_true", help="continue from OUT_DIR/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation")
    p.add_argument("--checkpoint")
    p.add_argument("--expert", action="store_true", help="score the ground-truth trajectories instead")
    p.add_argument("--corpus", required=True)
    p.add_argument("--subset")
    p.add_argument("--label")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("diagnose", cmd_diagnose, "teacher report for a response"), ("score", cmd_score, "sub-scores and rewards")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--corpus", required=True)
        p.add_argument("--scenario-id", required=True)
        p.add_argument("--trajectory", required=True, help='JSON file with "tokens" or "waypoints"')
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="ablation table from eval reports")
    p.add_argument("reports", nargs="+", help="MODE=eval.json")
    p.add_argument("--rollouts", nargs="*", help="rollouts.jsonl files for failure ratios")
    p.add_argument("--out", help="output prefix for .csv and .txt")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config)
        args.func(args, cfg)
    except (ContractError, ValueError, KeyError, FileNotFoundError, FileExistsError, scenario.CorpusGenerationError, policy.NumericalFailure) as exc:
        print(f"drivefb {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

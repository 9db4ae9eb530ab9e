"""End-to-end acceptance: one PASS/FAIL line per criterion.

Shared fixtures build the seeded corpora and the SFT checkpoint once per
session. Corpus A (200 scenarios, seed 3) is the SFT training corpus and the
curation corpus. Corpus B (200 scenarios, seed 11) is held out; its curated
hard subset is where grpo and elf are compared.
"""

import itertools
import math
import time

import numpy as np
import pytest

from drivefb import curation, grpo, harness, policy, scenario, sft
from drivefb import response as R
from drivefb.curation import CurationConfig
from drivefb.features import BASE_DIM, FULL_DIM, scene_features
from drivefb.grpo import Entry, FinalBatch, Origin, TrainConfig
from drivefb.metrics import ExtendedSubScores, SubScores, epdms, pdms, planning_accuracy
from drivefb.rewards import RewardBreakdown, format_reward, goal_tier
from drivefb.scene import LATERAL, LONGITUDINAL, MetaAction

SEEDS = (0, 1, 2)
RL_EPOCHS = 30


# --- shared fixtures -------------------------------------------------------


@pytest.fixture(scope="session")
def corpus_a():
    return scenario.generate_corpus(200, scenario.uniform_mix(), seed=3)


@pytest.fixture(scope="session")
def sft_run(corpus_a):
    cfg = sft.SFTConfig()
    t0 = time.perf_counter()
    pairs = sft.build_dataset(corpus_a, cfg.feedback_per_record, seed=cfg.seed)
    params, _ = sft.run_sft(policy.init_params(cfg.seed), pairs, cfg)
    return params, time.perf_counter() - t0


@pytest.fixture(scope="session")
def sft_params_a(sft_run):
    return sft_run[0]


@pytest.fixture(scope="session")
def curated_b(sft_params_a):
    corpus = scenario.generate_corpus(200, scenario.uniform_mix(), seed=11)
    keep = set(curation.filter(curation.estimate_stats(sft_params_a, corpus, seed=0)))
    return [r for r in corpus if r.scenario_id in keep]


@pytest.fixture(scope="session")
def ab_runs(sft_params_a, curated_b, tmp_path_factory):
    """grpo and elf from the common SFT checkpoint, three seeds each."""
    out = {"sft": harness.evaluate(sft_params_a, curated_b, "sft").means["pdms"]}
    for mode in ("grpo", "elf"):
        scores, fails, secs = [], [], []
        for seed in SEEDS:
            d = tmp_path_factory.mktemp(f"{mode}{seed}")
            t0 = time.perf_counter()
            params, _ = grpo.train(sft_params_a, curated_b, TrainConfig(mode=mode, seed=seed), RL_EPOCHS, out_dir=d)
            secs.append(time.perf_counter() - t0)
            scores.append(harness.evaluate(params, curated_b, mode).means["pdms"])
            ratios = harness.failure_ratios(harness.read_rollout_log(d / "rollouts.jsonl"))
            fails.append(ratios[-1].pdms)
        out[mode] = (float(np.mean(scores)), float(np.mean(fails)), max(secs), scores, fails)
    return out


# --- criteria --------------------------------------------------------------


def test_c01_formula_exactness(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        b = rng.integers(0, 2, 6)
        c = rng.random(6)
        s = SubScores(int(b[0]), int(b[1]), int(b[2]), int(b[3]), float(c[0]))
        oracle = b[0] * b[1] * (5 * c[0] + 5 * b[2] + 2 * b[3]) / 12
        worst = max(worst, abs(pdms(s) - oracle))
        e = ExtendedSubScores(int(b[0]), int(b[1]), int(b[4]), int(b[5]), *map(float, c[:5]))
        oracle = b[0] * b[1] * b[4] * b[5] * (5 * c[0] + 2 * c[2] + 2 * c[3] + 5 * c[1] + 2 * c[4]) / 16
        worst = max(worst, abs(epdms(e) - oracle))

    levels = (0.0, 0.5, 1.0)
    props = True
    for nc, dac, ttc, com in itertools.product((0, 1), repeat=4):
        vals = [pdms(SubScores(nc, dac, ttc, com, ep)) for ep in levels]
        props &= all(0 <= v <= 1 for v in vals) and vals == sorted(vals)
        props &= (nc * dac == 1) or vals == [0.0] * 3
        if ttc == 0:
            props &= all(pdms(SubScores(nc, dac, 1, com, ep)) >= v for ep, v in zip(levels, vals))
        if com == 0:
            props &= all(pdms(SubScores(nc, dac, ttc, 1, ep)) >= v for ep, v in zip(levels, vals))
    for gates in itertools.product((0, 1), repeat=4):
        for cont in itertools.product(levels, repeat=5):
            v = epdms(ExtendedSubScores(*gates, *cont))
            props &= 0 <= v <= 1 and ((min(gates) == 1) or v == 0.0)
            for i in range(5):
                if cont[i] < 1.0:
                    up = list(cont)
                    up[i] = 1.0
                    props &= epdms(ExtendedSubScores(*gates, *up)) >= v
    secs = time.perf_counter() - t0
    criterion(1, worst <= 1e-12 and props and secs < 1.0, f"max |err| {worst:.1e}, grid properties {props}, {secs:.2f}s")


GOAL_TABLE = [
    (0.0, 1.0), (1.0, 1.0), (1.999, 1.0), (2.0, 0.8), (3.0, 0.8), (4.0, 0.6), (5.0, 0.6),
    (6.0, 0.4), (8.0, 0.4), (10.0, 0.2), (12.0, 0.2), (15.0, 0.2), (15.001, 0.0), (30.0, 0.0),
]


def test_c02_goal_table(criterion):
    bad = [(d, goal_tier(d), want) for d, want in GOAL_TABLE if goal_tier(d) != want]
    criterion(2, not bad, f"{len(GOAL_TABLE) - len(bad)}/{len(GOAL_TABLE)} grid points match" + (f", mismatches {bad}" if bad else ""))


def _fd_rel(a, num):
    return abs(a - num) / max(abs(a), abs(num))


def test_c03_gradients(criterion):
    t0 = time.perf_counter()
    worst_lp = 0.0
    for inst in range(5):
        params = policy.init_params(100 + inst)
        rng = np.random.default_rng(inst)
        feat = rng.normal(0, 1, FULL_DIM if inst % 2 else BASE_DIM)
        toks = list(rng.integers(0, R.VOCAB_SIZE, int(rng.integers(4, 20))))
        g = policy.grad_logprob(params, feat, toks)
        checked = 0
        while checked < 20:
            k = policy.PARAM_NAMES[rng.integers(len(policy.PARAM_NAMES))]
            idx = tuple(rng.integers(0, s) for s in params.weights[k].shape)
            w, h = params.weights[k], 1e-4
            old = w[idx]
            w[idx] = old + h
            up = policy.logprob(params, feat, toks).sum()
            w[idx] = old - h
            dn = policy.logprob(params, feat, toks).sum()
            w[idx] = old
            num = (up - dn) / (2 * h)
            if max(abs(g[k][idx]), abs(num)) < 1e-6:
                continue
            worst_lp = max(worst_lp, _fd_rel(g[k][idx], num))
            checked += 1

    worst_obj = 0.0
    for inst in range(3):
        old_params = policy.init_params(200 + inst)
        old_params.freeze_reference()
        rng = np.random.default_rng(50 + inst)
        batches = []
        for b in range(2):
            feat = rng.normal(0, 1, BASE_DIM)
            origins = [Origin.ONPOLICY] * 4 + [Origin.DUPLICATE, Origin.GT, Origin.FEEDBACK, Origin.FEEDBACK]
            entries = []
            for i, origin in enumerate(origins):
                toks = list(rng.integers(0, R.VOCAB_SIZE, int(rng.integers(3, 16))))
                lp_old = None if origin is Origin.FEEDBACK else policy.logprob(old_params, feat, toks)
                entries.append(Entry(toks, lp_old, RewardBreakdown(0, 0, 0), origin, i))
            batches.append(FinalBatch(f"s{b}", feat, entries, rng.normal(0, 1, len(entries))))
        params = old_params.copy()
        for w in params.weights.values():
            w += rng.normal(0, 0.05, w.shape)
        cfg = TrainConfig(k=2, beta=0.05)
        _, g = grpo.objective_and_grad(params, batches, cfg)
        checked = 0
        while checked < 15:
            k = policy.PARAM_NAMES[rng.integers(len(policy.PARAM_NAMES))]
            idx = tuple(rng.integers(0, s) for s in params.weights[k].shape)
            if abs(g[k][idx]) < 1e-7:
                continue
            w, h = params.weights[k], 1e-5
            old = w[idx]
            w[idx] = old + h
            up, _ = grpo.objective_and_grad(params, batches, cfg, need_grad=False)
            w[idx] = old - h
            dn, _ = grpo.objective_and_grad(params, batches, cfg, need_grad=False)
            w[idx] = old
            if up.clipped_tokens != dn.clipped_tokens:
                continue
            worst_obj = max(worst_obj, _fd_rel(g[k][idx], (up.objective - dn.objective) / (2 * h)))
            checked += 1
    secs = time.perf_counter() - t0
    ok = worst_lp < 1e-4 and worst_obj < 1e-3 and secs < 30
    criterion(3, ok, f"logprob rel err {worst_lp:.1e}, objective rel err {worst_obj:.1e}, {secs:.1f}s")


@pytest.fixture(scope="session")
def elf_200(sft_params_a, curated_b):
    """A seeded elf run of at least 200 steps, checking every batch."""
    cfg = TrainConfig(mode="elf", seed=7)
    steps_per_epoch = math.ceil(len(curated_b) / cfg.scenarios_per_step)
    log = {"batches": 0, "steps": 0, "adv_worst": 0.0, "guarded": 0, "violations": [], "feedback": 0, "duplicate": 0}

    def check(res):
        log["steps"] += 1
        if res.terms.clipped_tokens["feedback"] != 0:
            log["violations"].append((res.step, "feedback entry clipped"))
        for b, g in zip(res.batches, res.groups):
            log["batches"] += 1
            if len(b.entries) != cfg.n + cfg.k:
                log["violations"].append((res.step, "batch size"))
            r_max = g.r_traj.max()
            best = grpo.argmax_index(g.r_traj)
            for e in b.entries[cfg.n :]:
                if e.origin is Origin.FEEDBACK:
                    log["feedback"] += 1
                    if not e.reward.r_traj > r_max:
                        log["violations"].append((res.step, "feedback does not dominate"))
                elif e.origin is Origin.DUPLICATE:
                    log["duplicate"] += 1
                    if e.tokens != g.samples[best].tokens:
                        log["violations"].append((res.step, "duplicate is not the argmax"))
                else:
                    log["violations"].append((res.step, f"unexpected origin {e.origin}"))
            a = b.advantages
            if np.std(b.rewards) >= grpo.STD_GUARD:
                log["adv_worst"] = max(log["adv_worst"], abs(a.mean()), abs(a.std() - 1.0))
            else:
                log["guarded"] += 1

    grpo.train(sft_params_a, curated_b, cfg, math.ceil(200 / steps_per_epoch), callback=check)
    return log


def test_c04_advantage_normalisation(criterion, elf_200):
    a = grpo.compute_advantages([0.2, 0.2, 0.2, 0.8])[-1]
    ok = elf_200["adv_worst"] <= 1e-9 and abs(a - 1.7320) <= 1e-4
    criterion(4, ok, f"{elf_200['batches']} batches ({elf_200['guarded']} guarded), worst deviation {elf_200['adv_worst']:.1e}, worked example {a:.4f}")


def test_c05_structural_invariants(criterion, elf_200):
    group_r = [0.5, 0.3, 0.5, 0.1, 0.0, 0.2, 0.4, 0.1]
    fb_r = [0.9, 0.2, 0.6, 0.5, 0.95, 0.1, 0.0, 0.3]  # candidates 0, 2, 4
    group = grpo.RolloutGroup(
        "u", np.zeros(BASE_DIM), [policy.SampleOutput([i], np.zeros(1), "base") for i in range(8)], [None] * 8,
        [RewardBreakdown(r, 1.0, 0.0) for r in group_r], [None] * 8, None,
    )
    fb = grpo.FeedbackSamples(None, [policy.SampleOutput([i], np.zeros(1), "fb") for i in range(8)], [None] * 8, [RewardBreakdown(r, 1.0, 0.0) for r in fb_r], [None] * 8)
    counts = {0: 0, 2: 0, 4: 0}
    trials = 3000
    for t in range(trials):
        (e,) = grpo.select_refinements(group, fb, TrainConfig(), np.random.default_rng([5, t]))
        counts[e.source] += 1
    sigma = math.sqrt(trials / 3 * 2 / 3)
    uniform = all(abs(c - trials / 3) <= 3 * sigma for c in counts.values())
    v = elf_200["violations"]
    ok = elf_200["steps"] >= 200 and not v and uniform and elf_200["feedback"] > 0 and elf_200["duplicate"] > 0
    detail = (
        f"{elf_200['steps']} steps, {elf_200['feedback']} injected / {elf_200['duplicate']} duplicated, "
        f"violations {v[:3] if v else 0}, selection counts {list(counts.values())}"
    )
    criterion(5, ok, detail)


@pytest.mark.slow
def test_c06_sft_competence(criterion, corpus_a, sft_run):
    params, secs = sft_run
    feats = np.stack([scene_features(r.scene) for r in corpus_a])
    parsed = [R.parse(o.tokens) for o in policy.greedy(params, feats)]
    well = float(np.mean([format_reward(p) == 1.0 for p in parsed]))
    mean_pdms = harness.evaluate(params, corpus_a, "sft").means["pdms"]
    ok = well >= 0.95 and mean_pdms >= 0.55 and secs < 180
    criterion(6, ok, f"well-formed {well:.3f}, mean PDMS {mean_pdms:.3f}, SFT {secs:.0f}s")


@pytest.mark.slow
def test_c07_elf_beats_grpo(criterion, ab_runs, curated_b):
    s, (g, *_, g_secs, g_all, _), (e, *_, e_secs, e_all, _) = ab_runs["sft"], ab_runs["grpo"], ab_runs["elf"]
    ok = len(curated_b) >= 40 and e >= g + 0.03 and g >= s and e >= s and max(g_secs, e_secs) < 600
    detail = (
        f"{len(curated_b)} curated scenarios, PDMS sft {s:.4f} grpo {g:.4f} {np.round(g_all, 4).tolist()} "
        f"elf {e:.4f} {np.round(e_all, 4).tolist()}, slowest run {max(g_secs, e_secs):.0f}s"
    )
    criterion(7, ok, detail)


@pytest.mark.slow
def test_c08_failure_ratio(criterion, ab_runs):
    g_fail, e_fail = ab_runs["grpo"][1], ab_runs["elf"][1]
    ok = e_fail <= 0.7 * g_fail
    criterion(8, ok, f"final-epoch total-failure ratio grpo {g_fail:.4f} elf {e_fail:.4f} (limit {0.7 * g_fail:.4f})")


@pytest.mark.slow
def test_c09_curation(criterion, corpus_a, sft_params_a):
    cfg = CurationConfig()
    stats = curation.estimate_stats(sft_params_a, corpus_a, cfg, seed=0)
    kept = set(curation.filter(stats, cfg))
    frac = len(kept) / len(stats)
    all_fail = {s.scenario_id for s in stats if s.all_fail_pdms}
    dropped = [s for s in stats if s.scenario_id not in kept]
    dropped_ok = all(s.mean_reward >= cfg.discard_mean_min and s.std_reward <= cfg.discard_std_max for s in dropped)
    ok = 0.25 <= frac <= 0.35 and all_fail <= kept and dropped_ok
    detail = (
        f"kept {len(kept)}/{len(stats)} ({frac:.0%}) at std <= {cfg.discard_std_max}, "
        f"{len(all_fail)} all-fail scenarios kept, discards satisfy thresholds {dropped_ok}"
    )
    criterion(9, ok, detail)


def test_c10_planning_accuracy(criterion):
    rng = np.random.default_rng(10)
    gt, pred = [], []
    for _ in range(500):
        g = MetaAction(LONGITUDINAL[rng.integers(4)], LATERAL[rng.integers(5)])
        lon = g.longitudinal if rng.random() < 0.7 else LONGITUDINAL[(LONGITUDINAL.index(g.longitudinal) + rng.integers(1, 4)) % 4]
        lat = g.lateral if rng.random() < 0.6 else LATERAL[(LATERAL.index(g.lateral) + rng.integers(1, 5)) % 5]
        gt.append(g)
        pred.append(MetaAction(lon, lat))
    speed = path = overall = 0
    for p, g in zip(pred, gt):
        speed += p.longitudinal == g.longitudinal
        path += p.lateral == g.lateral
        overall += p == g
    got = planning_accuracy(pred, gt)
    exact = got == (speed / 500, path / 500, overall / 500)
    bound = True
    for n in (1, 7, 50):
        for t in range(40):
            idx = np.random.default_rng([n, t]).integers(0, 500, n)
            s_, p_, o_ = planning_accuracy([pred[i] for i in idx], [gt[i] for i in idx])
            bound &= o_ <= min(s_, p_)
    criterion(10, exact and bound, f"speed {got[0]:.3f} path {got[1]:.3f} overall {got[2]:.3f}, oracle match {exact}, overall <= min {bound}")


@pytest.mark.slow
def test_c11_reproducibility(criterion, sft_params_a, curated_b, tmp_path):
    assert harness.worker_count() == 1
    subset = curated_b[:24]
    for name in ("a", "b"):
        grpo.train(sft_params_a, subset, TrainConfig(mode="elf", seed=4), 2, out_dir=tmp_path / name)
    same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    same_log = (tmp_path / "a" / "rollouts.jsonl").read_bytes() == (tmp_path / "b" / "rollouts.jsonl").read_bytes()
    injected = sum(int(r.split(",")[grpo.METRIC_COLUMNS.index("feedback_injected")]) for r in (tmp_path / "a" / "metrics.csv").read_text().splitlines()[1:])
    criterion(11, same_csv and same_log and injected > 0, f"metrics.csv identical {same_csv}, rollouts.jsonl identical {same_log}, {injected} feedback injections")

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-7 and 9 share full default-configuration runs of the CLI
(dataset -> pretrain -> train -> eval), which take a few minutes each.
"""
import configparser
import hashlib
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from pipeforge import cli, data, evaluate, nn, policy, ppo

pytestmark = pytest.mark.slow

DISTORTED_ONLY = "none/well/none"


def record(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def full_run(out_dir):
    """Run every stage with the default configuration; returns exit codes and seconds per stage."""
    cfg = out_dir / "config.json"
    cfg.write_text(json.dumps({"output_dir": "run"}))
    codes, seconds = {}, {}
    for cmd in ("dataset", "pretrain", "train"):
        t0 = time.perf_counter()
        codes[cmd] = cli.main([cmd, "--config", str(cfg)])
        seconds[cmd] = time.perf_counter() - t0
    run = out_dir / "run"
    policy_files = {p.name: sha(p) for p in run.glob("policy_*.ckpt")}
    t0 = time.perf_counter()
    codes["eval"] = cli.main(["eval", "--config", str(cfg)])
    seconds["eval"] = time.perf_counter() - t0
    return {"dir": run, "codes": codes, "seconds": seconds, "policy_files_before_eval": policy_files}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    return full_run(tmp_path_factory.mktemp("acceptance_a"))


@pytest.fixture(scope="session")
def second_run(tmp_path_factory):
    return full_run(tmp_path_factory.mktemp("acceptance_b"))


def distorted_accuracy(report_path, method, bed):
    hits = total = 0
    for row in evaluate.read_report(report_path):
        m, b, spec, acc, _, n = row
        if m == method and b == bed and spec != DISTORTED_ONLY:
            hits += round(acc * n)
            total += n
    return hits / total, total


# -- 1 -------------------------------------------------------------------------------------

def dense_instance(seed):
    rng = np.random.default_rng(seed)
    hidden = ("tanh", "relu")[seed % 2]
    output = ("linear", "softmax")[(seed // 2) % 2]
    sizes = tuple(int(v) for v in rng.integers(2, 7, size=int(rng.integers(2, 5))))
    net = nn.init_net(sizes, rng, hidden, output)
    for b in net.biases:
        b[:] = rng.normal(0, 0.5, size=b.shape)
    x = rng.uniform(-1, 1, size=(3, sizes[0]))
    if hidden == "relu":
        # keep pre-activations away from the kink so finite differences are meaningful
        x = x + np.sign(x) * 0.2
    c = rng.normal(size=(3, sizes[-1]))

    def loss():
        return float(np.sum(c * nn.forward(net, x)))

    analytic = nn.backward(net, x, c).arrays()
    numeric = nn.numerical_gradient(loss, net.parameters(), 1e-6)
    return max(nn.relative_error(a, n, floor=1e-6) for a, n in zip(analytic, numeric))


def policy_instance(seed):
    rng = np.random.default_rng(1000 + seed)
    params = policy.init_policy(ppo.STAGE_TASKS[seed % 3], rng)
    for net in params.nets().values():
        for b in net.biases:
            b[:] = rng.normal(0, 0.3, size=b.shape)
    n = int(rng.integers(2, 6))
    summaries = rng.uniform(0, 1, size=(n, policy.SUMMARY_DIM))
    mask = np.ones(n, bool)
    if n > 2:
        mask[rng.integers(n)] = False
    action = int(rng.choice(np.flatnonzero(mask)))
    _, _, grads = policy.policy_terms(params, summaries, mask, action)
    worst = 0.0
    for name, net in params.nets().items():
        numeric = nn.numerical_gradient(
            lambda: policy.log_prob_from_summaries(params, summaries, mask, action), net.parameters())
        for a, num in zip(grads[name].arrays(), numeric):
            worst = max(worst, nn.relative_error(a, num, floor=1e-6))
    return worst


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    errors = [dense_instance(s) for s in range(14)] + [policy_instance(s) for s in range(6)]
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    ok = len(errors) >= 20 and worst < 1e-4 and elapsed < 60
    assert record(1, ok, f"{len(errors)} instances, max relative error {worst:.2e}, {elapsed:.1f}s")


# -- 2 -------------------------------------------------------------------------------------

def test_criterion_2_distribution_invariants():
    t0 = time.perf_counter()
    params = policy.init_policy("denoising", np.random.default_rng(2))
    rng = np.random.default_rng(22)
    worst_sum = worst_perm = 0.0
    masked_ok = True
    for n in range(2, 17):
        summaries = rng.uniform(0, 1, size=(n, policy.SUMMARY_DIM))
        mask = rng.random(n) < 0.6
        mask[rng.integers(n)] = True
        ok = np.zeros(n, bool)
        emb = nn.forward(params.embed_net, summaries)
        p = policy.masked_distribution(policy.score_candidates(
            params, policy.CandidateEvaluation([None] * n, summaries, emb, ok)), mask)
        worst_sum = max(worst_sum, abs(p.sum() - 1))
        masked_ok &= bool((p[~mask] == 0).all())
        perm = rng.permutation(n)
        emb_p = nn.forward(params.embed_net, summaries[perm])
        pp = policy.masked_distribution(policy.score_candidates(
            params, policy.CandidateEvaluation([None] * n, summaries[perm], emb_p, ok)), mask[perm])
        worst_perm = max(worst_perm, float(np.max(np.abs(pp - p[perm]))))
    # 10000 draws from a masked distribution
    n = 10
    summaries = rng.uniform(0, 1, size=(n, policy.SUMMARY_DIM))
    mask = np.arange(n) % 3 != 0
    emb = nn.forward(params.embed_net, summaries)
    p = policy.masked_distribution(policy.score_candidates(
        params, policy.CandidateEvaluation([None] * n, summaries, emb, np.zeros(n, bool))), mask)
    draw_rng = np.random.default_rng(5)
    draws = np.array([nn.categorical_sample(p, draw_rng) for _ in range(10000)])
    never_masked = not np.isin(draws, np.flatnonzero(~mask)).any()
    # identical candidates -> uniform
    same = np.repeat(summaries[:1], 7, axis=0)
    emb = nn.forward(params.embed_net, same)
    u = policy.masked_distribution(policy.score_candidates(
        params, policy.CandidateEvaluation([None] * 7, same, emb, np.zeros(7, bool))), np.ones(7, bool))
    uniform_err = float(np.max(np.abs(u - 1 / 7)))
    elapsed = time.perf_counter() - t0
    ok = (worst_sum <= 1e-9 and masked_ok and never_masked and worst_perm <= 1e-12
          and uniform_err <= 1e-12 and elapsed < 60)
    assert record(2, ok, f"sum err {worst_sum:.1e}, perm err {worst_perm:.1e}, masked draws "
                         f"{'none' if never_masked else 'SOME'}, uniform err {uniform_err:.1e}, {elapsed:.1f}s")


# -- 3 -------------------------------------------------------------------------------------

def test_criterion_3_ppo_algebra(small_world):
    env = ppo.Environment(small_world["train"], small_world["registry"].subset(("training_pool",)))
    cfg = ppo.PpoConfig(episodes_per_update=32)
    policies = ppo.init_policies(0)
    trajs = ppo.collect_rollouts(policies, small_world["sai"], env, cfg)
    baseline = ppo.BaselineTracker(0.5, 0.99, True)
    exact = True
    for task in ppo.STAGE_TASKS:
        items = [(tr, a) for t in trajs for tr, a in zip(t.transitions, ppo.compute_advantage(t, baseline))
                 if tr.stage_task == task]
        advs = [a for _, a in items]
        _, _, surrogate = ppo.ppo_loss(policies[task], [t for t, _ in items], advs, cfg)
        exact &= surrogate == float(np.mean(advs))
    c1 = ppo.clipped_surrogate(1.5, 1.0, 0.2)
    c2 = ppo.clipped_surrogate(0.5, -1.0, 0.2)
    ok = exact and math.isclose(c1, 1.2, abs_tol=1e-12) and math.isclose(c2, -0.8, abs_tol=1e-12)
    assert record(3, ok, f"surrogate==mean(A) exactly: {exact}; clip examples {c1:.12g}, {c2:.12g}")


# -- 4 -------------------------------------------------------------------------------------

def test_criterion_4_sai_quality_gate(default_run):
    summary = json.loads((default_run["dir"] / cli.SUMMARY_FILE).read_text())
    exp = summary["sai"]["exposure"]["test_accuracy"]
    noise = summary["sai"]["noise"]["test_accuracy"]
    secs = default_run["seconds"]["pretrain"]
    ok = exp >= 0.90 and noise >= 0.85 and default_run["codes"]["pretrain"] == 0 and secs < 180
    assert record(4, ok, f"exposure SAI {exp:.4f} (>= 0.90), noise SAI {noise:.4f} (>= 0.85), {secs:.0f}s")


# -- 5 -------------------------------------------------------------------------------------

def test_criterion_5_learning_progress(default_run):
    metrics = ppo.read_metrics(default_run["dir"] / cli.METRICS_FILE)
    rewards = [m["mean_reward"] for m in metrics]
    first, last = float(np.mean(rewards[:5])), float(np.mean(rewards[-5:]))
    secs = default_run["seconds"]["train"]
    ok = default_run["codes"]["train"] == 0 and last - first >= 0.15 and secs < 600
    assert record(5, ok, f"first-5 mean reward {first:.4f}, last-5 {last:.4f}, "
                         f"gain {last - first:+.4f} (needs >= +0.15), {len(rewards)} updates, {secs:.0f}s")


# -- 6 -------------------------------------------------------------------------------------

def test_criterion_6_ordering_on_known_bed(default_run):
    report = default_run["dir"] / cli.REPORT_FILE
    auto, n = distorted_accuracy(report, "auto_transrl", "known")
    vanilla, _ = distorted_accuracy(report, "vanilla", "known")
    template, _ = distorted_accuracy(report, "template", "known")
    secs = default_run["seconds"]["eval"]
    ok = (default_run["codes"]["eval"] == 0 and n >= 2000 and auto >= vanilla + 0.10
          and auto >= template - 0.02 and secs < 300)
    assert record(6, ok, f"known bed, {n} distorted episodes: auto {auto:.4f}, vanilla {vanilla:.4f}, "
                         f"template {template:.4f} (strictly better than template: {auto > template})")


# -- 7 -------------------------------------------------------------------------------------

def test_criterion_7_unknown_bed_generalization(default_run):
    run = default_run["dir"]
    manifest = configparser.ConfigParser()
    manifest.read(run / cli.MANIFEST_FILE)
    same_params = all(manifest["train"][k] == manifest["eval"][k]
                      for k in manifest["train"] if k.startswith("policy_"))
    same_files = default_run["policy_files_before_eval"] == {p.name: sha(p) for p in run.glob("policy_*.ckpt")}
    auto, n = distorted_accuracy(run / cli.REPORT_FILE, "auto_transrl", "unknown")
    vanilla, _ = distorted_accuracy(run / cli.REPORT_FILE, "vanilla", "unknown")
    ok = same_params and same_files and len(default_run["policy_files_before_eval"]) == 3 and auto >= vanilla + 0.05
    assert record(7, ok, f"unknown bed, {n} distorted episodes: auto {auto:.4f}, vanilla {vanilla:.4f}; "
                         f"checksums unchanged: {same_params and same_files}")


# -- 8 -------------------------------------------------------------------------------------

def test_criterion_8_ingestion(tmp_path):
    rng = np.random.default_rng(8)
    planes = rng.integers(0, 256, size=(2, 3, 1024), dtype=np.uint8)
    labels = [4, 0]
    raw = b"".join(bytes([lab]) + planes[i].tobytes() for i, lab in enumerate(labels))
    (tmp_path / "batch.bin").write_bytes(raw)
    samples = data.load_cifar10_batch(tmp_path / "batch.bin")
    # every pixel: byte value / 255 at [row, col, channel] from channel-major planes
    exact = [s.label for s in samples] == labels and all(
        samples[i].image[r, c, ch] == planes[i, ch, r * 32 + c] / 255.0
        for i in range(2) for ch in range(3) for r in range(32) for c in range(32))
    (tmp_path / "short.bin").write_bytes(raw[:-1])
    bad_label = bytearray(raw)
    bad_label[0] = 11
    (tmp_path / "label.bin").write_bytes(bytes(bad_label))
    codes = {}
    for name in ("batch.bin", "short.bin", "label.bin", "missing.bin"):
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps({"output_dir": "out", "dataset": {"kind": "cifar10", "cifar_path": name}}))
        codes[name] = cli.main(["dataset", "--config", str(cfg)])
    cached, k = data.load_dataset(tmp_path / "out" / cli.DATASET_FILE)
    cache_exact = k == 10 and all(np.array_equal(a.image, b.image) for a, b in zip(samples, cached))
    ok = exact and cache_exact and codes == {"batch.bin": 0, "short.bin": 2, "label.bin": 2, "missing.bin": 2}
    assert record(8, ok, f"2-record pixels exact: {exact}, cache exact: {cache_exact}, exit codes {codes}")


# -- 9 -------------------------------------------------------------------------------------

def test_criterion_9_determinism(default_run, second_run):
    a, b = default_run["dir"], second_run["dir"]
    same = {name: (a / name).read_bytes() == (b / name).read_bytes()
            for name in (cli.METRICS_FILE, cli.REPORT_FILE)}
    ok = all(same.values()) and all(c == 0 for c in second_run["codes"].values())
    assert record(9, ok, f"byte-identical across two seeded runs: {same}")

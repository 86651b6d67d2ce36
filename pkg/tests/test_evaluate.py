import csv
import os

import numpy as np
import pytest

from pipeforge import data, evaluate, ops, ppo, pretrain, sai


@pytest.fixture(scope="module")
def policies():
    return ppo.init_policies(0)


@pytest.fixture(scope="module")
def report(small_world, policies):
    cfgs = [evaluate.TestBedConfig(b, 120, data.Curriculum.with_clean(0.2), seed=2) for b in evaluate.BEDS]
    return evaluate.evaluate(policies, small_world["sai"], small_world["registry"], small_world["test"], cfgs)


def test_bed_pools(small_world):
    reg = small_world["registry"]
    known = evaluate.bed_registry(reg, "known")
    unknown = evaluate.bed_registry(reg, "unknown")
    both = evaluate.bed_registry(reg, "partially_known")
    assert not any(op.provenance == "unseen_pool" for op in known)
    restoration = {op.id for op in unknown if op.task_kind in ("exposure_correction", "denoising")}
    assert restoration == {"gamma_0.45", "gamma_0.55", "gamma_2.00", "blur_1.5"}
    assert "identity" in unknown and len(both) == len(reg)
    with pytest.raises(evaluate.EvalConfigError):
        evaluate.bed_registry(ops.OperatorRegistry([reg["identity"]]), "known")
    with pytest.raises(evaluate.EvalConfigError):
        evaluate.TestBedConfig("half_known")


def test_unknown_bed_audit(report, small_world):
    assert evaluate.audit_pool(report.episodes, small_world["registry"], "unknown") == []
    used = {op for r in report.episodes if r.bed == "unknown" and r.method == "auto_transrl"
            for op in r.operator_ids}
    training_ids = {op.id for op in small_world["registry"].filter(provenance="training_pool")
                    if op.task_kind in ("exposure_correction", "denoising")}
    assert not used & training_ids


def test_none_episodes_classify_only(report):
    for r in report.episodes:
        if r.spec == "none/well/none":
            assert len(r.operator_ids) == 1 and r.operator_ids[0].startswith("classifier_")


def test_repeated_run_identical(small_world, policies, report):
    cfgs = [evaluate.TestBedConfig(b, 120, data.Curriculum.with_clean(0.2), seed=2) for b in evaluate.BEDS]
    again = evaluate.evaluate(policies, small_world["sai"], small_world["registry"], small_world["test"], cfgs)
    assert evaluate.report_text(again) == evaluate.report_text(report)


def test_methods_share_the_episode_stream(report):
    for bed in evaluate.BEDS:
        per = {m: [(r.index, r.spec, r.label) for r in report.episodes if r.bed == bed and r.method == m]
               for m in evaluate.METHODS}
        assert per["auto_transrl"] == per["template"] == per["vanilla"]


def test_template_equals_vanilla_on_clean(report):
    t = [r for r in report.episodes if r.method == "template" and not r.distorted]
    v = [r for r in report.episodes if r.method == "vanilla" and not r.distorted]
    assert t and [r.prediction for r in t] == [r.prediction for r in v]


def test_template_pipeline_mapping():
    spec = data.DistortionSpec("noise_then_exposure", "over", "high")
    assert evaluate.template_pipeline(spec) == ["gamma_2.20", "blur_1.0", "classifier_clean"]
    spec = data.DistortionSpec("exposure_then_noise", "under", "low")
    assert evaluate.template_pipeline(spec) == ["blur_1.0", "gamma_0.45", "classifier_clean"]
    assert evaluate.template_pipeline(data.DistortionSpec()) == ["classifier_clean"]


def test_template_never_consults_sai(small_world, monkeypatch):
    calls = []
    for name in ("predict_level", "predict_attribute", "build_mask"):
        orig = getattr(sai, name)
        monkeypatch.setattr(sai, name, lambda *a, _o=orig, **k: calls.append(1) or _o(*a, **k))
    cfg = evaluate.TestBedConfig("known", 60, seed=1)
    stream = evaluate.episode_stream(small_world["test"], cfg)
    a = evaluate.run_template(small_world["registry"], cfg, stream)
    b = evaluate.run_template(small_world["registry"], cfg, stream)
    assert calls == [] and [r.prediction for r in a] == [r.prediction for r in b]


def test_vanilla_on_clean_episodes_matches_classifier_accuracy(small_world):
    cfg = evaluate.TestBedConfig("known", 150, data.Curriculum(sequences={"none": 1.0}), seed=4)
    stream = evaluate.episode_stream(small_world["test"], cfg)
    recs = evaluate.run_vanilla(small_world["registry"], cfg, stream)
    assert all(len(r.operator_ids) == 1 for r in recs)
    samples = [data.LabeledImage(ep.clean, ep.label) for ep in stream]
    want = pretrain.classifier_accuracy(small_world["classifiers"]["clean"], samples)
    assert np.mean([r.reward for r in recs]) == pytest.approx(want, abs=1e-12)
    again = evaluate.run_vanilla(small_world["registry"], cfg, stream)
    assert [r.prediction for r in again] == [r.prediction for r in recs]


def test_report_row_count_and_bounds(report):
    specs = {r.spec for r in report.episodes}
    assert len(report.rows) == len(evaluate.METHODS) * len(evaluate.BEDS) * len(specs)
    for _, _, _, acc, hw, n in report.rows:
        assert 0 <= acc <= 1 and hw >= 0 and n > 0
    for bed in evaluate.BEDS:
        for m in evaluate.METHODS:
            assert sum(r[5] for r in report.rows if r[0] == m and r[1] == bed) == 120


def test_half_width_normal_approximation():
    assert evaluate.half_width(0.5, 100) == pytest.approx(1.959964 * 0.05, abs=1e-6)
    assert evaluate.half_width(1.0, 10) == 0.0


def test_write_report_round_trip(report, tmp_path):
    path = tmp_path / "report.tsv"
    written = evaluate.write_report(report, path)
    assert all(os.path.exists(p) for p in written)
    assert {os.path.basename(p) for p in written} >= {"report.tsv", "report_plot.tsv", "report_episodes.tsv",
                                                      "report_known.png", "report_unknown.png"}
    back = evaluate.read_report(path)
    assert back == [(m, b, s, round(a, 4), round(h, 4), n) for m, b, s, a, h, n in report.rows]
    for line in path.read_text().splitlines()[1:]:
        acc = line.split("\t")[3]
        assert len(acc.split(".")[1]) == 4
    with open(tmp_path / "report_plot.tsv") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    assert rows[0] == ["bed", "spec", *evaluate.METHODS]
    assert len(rows) - 1 == len({(r[1], r[2]) for r in report.rows})


def test_report_accuracy_recomputed_from_episode_log(report, tmp_path):
    path = tmp_path / "r.tsv"
    evaluate.write_report(report, path, figures=False)
    hits = {}
    with open(tmp_path / "r_episodes.tsv") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            key = (row["method"], row["bed"], row["spec"])
            hits.setdefault(key, []).append(row["prediction"] == row["label"])
    for m, b, s, acc, _, n in evaluate.read_report(path):
        assert n == len(hits[(m, b, s)])
        assert acc == round(sum(hits[(m, b, s)]) / n, 4)


def test_write_report_unwritable(report, tmp_path):
    with pytest.raises(OSError):
        evaluate.write_report(report, tmp_path / "missing_dir" / "r.tsv", figures=False)

"""Test beds, the Template / Vanilla baselines and report emission.

All methods of one evaluation see the same episode stream (same images, same
distortion specs, same noise draws), so accuracy differences are paired.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data, ops, ppo

BEDS = ("known", "partially_known", "unknown")
METHODS = ("auto_transrl", "template", "vanilla")
BED_PROVENANCES = {
    "known": ("training_pool",),
    "partially_known": ("training_pool", "unseen_pool"),
    "unknown": ("unseen_pool",),
}
# fixed hand-designed pipeline used by the Template baseline
TEMPLATE_EXPOSURE = {"under": "gamma_0.45", "over": "gamma_2.20"}
TEMPLATE_DENOISER = "blur_1.0"
TEMPLATE_CLASSIFIER = "classifier_clean"
VANILLA_CLASSIFIER = "classifier_clean"
Z95 = 1.959963984540054
REPORT_COLUMNS = ("method", "bed", "spec", "accuracy", "half_width", "n")


class EvalConfigError(ValueError):
    pass


@dataclass
class TestBedConfig:
    bed: str
    episode_count: int = 2000
    curriculum: data.Curriculum = field(default_factory=data.Curriculum)
    seed: int = 0

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.bed not in BEDS:
            raise EvalConfigError(f"unknown bed {self.bed!r}")
        if self.episode_count < 1:
            raise EvalConfigError("episode_count must be positive")


@dataclass
class EpisodeRecord:
    method: str
    bed: str
    index: int
    spec: str
    distorted: bool
    operator_ids: tuple[str, ...]
    prediction: int
    label: int

    @property
    def reward(self) -> float:
        return float(self.prediction == self.label)


@dataclass
class EvalReport:
    rows: list[tuple]                       # REPORT_COLUMNS
    episodes: list[EpisodeRecord] = field(default_factory=list)

    def accuracy(self, method: str, bed: str, distorted_only: bool = True) -> float:
        return overall_accuracy(self.episodes, method, bed, distorted_only)

    def table(self, method: str, bed: str) -> dict:
        return {r[2]: (r[3], r[4], r[5]) for r in self.rows if r[0] == method and r[1] == bed}


def bed_registry(registry: ops.OperatorRegistry, bed: str) -> ops.OperatorRegistry:
    """Restrict a full pool to one test bed.

    Restoration operators are filtered by provenance; identity and the
    classifiers are present in every bed.
    """
    if bed not in BED_PROVENANCES:
        raise EvalConfigError(f"unknown bed {bed!r}")
    prov = BED_PROVENANCES[bed]
    out = ops.OperatorRegistry(op for op in registry
                               if op.task_kind in ("identity", "classification") or op.provenance in prov)
    for task in ppo.STAGE_TASKS:
        if not any(op.task_kind == task for op in out):
            raise EvalConfigError(f"bed {bed}: no {task} operators after filtering")
    return out


def episode_stream(samples, config: TestBedConfig) -> list[data.EpisodeSpec]:
    """The bed's paired episodes; episode i depends only on (seed, i)."""
    if not samples:
        raise EvalConfigError("no evaluation samples")
    out = []
    for i in range(config.episode_count):
        rng = data.stream_rng(config.seed, 3, i)
        sample = samples[int(rng.integers(len(samples)))]
        out.append(data.make_episode(sample, data.sample_distortion(rng, config.curriculum), rng))
    return out


def half_width(p: float, n: int) -> float:
    return Z95 * math.sqrt(p * (1 - p) / n) if n else 0.0


def accuracy_table(records) -> dict:
    """spec label -> (accuracy, 95% half-width, n)."""
    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(r.spec, []).append(r.reward)
    out = {}
    for spec in sorted(groups):
        vals = groups[spec]
        p = float(np.mean(vals))
        out[spec] = (p, half_width(p, len(vals)), len(vals))
    return out


def overall_accuracy(records, method: str, bed: str, distorted_only: bool = True) -> float:
    vals = [r.reward for r in records
            if r.method == method and r.bed == bed and (r.distorted or not distorted_only)]
    if not vals:
        raise EvalConfigError(f"no episodes for {method}/{bed}")
    return float(np.mean(vals))


def run_autotransrl(policies, sai_models, registry, config: TestBedConfig, episodes=None) -> list[EpisodeRecord]:
    reg = bed_registry(registry, config.bed)
    episodes = episodes if episodes is not None else []
    out = []
    for i, ep in enumerate(episodes):
        traj = ppo.run_episode(policies, sai_models, reg, ep, data.stream_rng(config.seed, 4, i), mode="greedy")
        out.append(EpisodeRecord("auto_transrl", config.bed, i, ep.spec.label, ep.spec.is_distorted,
                                 tuple(traj.operator_ids), traj.prediction, ep.label))
    return out


def template_pipeline(spec: data.DistortionSpec) -> list[str]:
    ids = []
    for task in data.STAGE_PLANS[spec.sequence_kind]:
        if task == "exposure_correction":
            ids.append(TEMPLATE_EXPOSURE[spec.exposure_level])
        elif task == "denoising":
            ids.append(TEMPLATE_DENOISER)
        else:
            ids.append(TEMPLATE_CLASSIFIER)
    return ids


def _run_fixed(method, registry, config, episodes, pipeline_for) -> list[EpisodeRecord]:
    out = []
    for i, ep in enumerate(episodes):
        ids = pipeline_for(ep.spec)
        x = ep.distorted
        for op_id in ids:
            x = registry[op_id](x)
        out.append(EpisodeRecord(method, config.bed, i, ep.spec.label, ep.spec.is_distorted,
                                 tuple(ids), int(np.argmax(x)), ep.label))
    return out


def run_template(registry, config: TestBedConfig, episodes) -> list[EpisodeRecord]:
    """Fixed distortion -> operator mapping read from the ground-truth spec.

    The template is a hand-built pipeline, not a pool search, so it draws its
    operators from the full registry whatever the bed.
    """
    return _run_fixed("template", registry, config, episodes, template_pipeline)


def run_vanilla(registry, config: TestBedConfig, episodes) -> list[EpisodeRecord]:
    return _run_fixed("vanilla", registry, config, episodes, lambda spec: [VANILLA_CLASSIFIER])


def evaluate(policies, sai_models, registry, samples, configs, methods=METHODS) -> EvalReport:
    rows, episodes = [], []
    for cfg in configs:
        stream = episode_stream(samples, cfg)
        for method in methods:
            if method == "auto_transrl":
                recs = run_autotransrl(policies, sai_models, registry, cfg, stream)
            elif method == "template":
                recs = run_template(registry, cfg, stream)
            elif method == "vanilla":
                recs = run_vanilla(registry, cfg, stream)
            else:
                raise EvalConfigError(f"unknown method {method!r}")
            episodes.extend(recs)
            for spec, (acc, hw, n) in accuracy_table(recs).items():
                rows.append((method, cfg.bed, spec, acc, hw, n))
    return EvalReport(rows, episodes)


def audit_pool(records, registry, bed: str, method: str = "auto_transrl") -> list[str]:
    """Operator ids chosen by ``method`` in ``bed`` that the bed's filter forbids."""
    allowed = set(bed_registry(registry, bed).ids())
    used = {op for r in records if r.bed == bed and r.method == method for op in r.operator_ids}
    return sorted(used - allowed)


# -- report files ------------------------------------------------------------------

def report_text(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for method, bed, spec, acc, hw, n in report.rows:
        w.writerow([method, bed, spec, f"{acc:.4f}", f"{hw:.4f}", n])
    return buf.getvalue()


def read_report(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        header = next(r)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        return [(m, b, s, float(a), float(h), int(n)) for m, b, s, a, h, n in r]


def plot_data_text(report: EvalReport) -> str:
    """Per-spec grouped accuracies: one row per (bed, spec), one column per method."""
    methods = [m for m in METHODS if any(r[0] == m for r in report.rows)]
    cells = {(r[1], r[2], r[0]): r[3] for r in report.rows}
    keys = sorted({(r[1], r[2]) for r in report.rows}, key=lambda k: (BEDS.index(k[0]), k[1]))
    lines = ["\t".join(("bed", "spec", *methods))]
    for bed, spec in keys:
        vals = [f"{cells[(bed, spec, m)]:.4f}" if (bed, spec, m) in cells else "nan" for m in methods]
        lines.append("\t".join((bed, spec, *vals)))
    return "\n".join(lines) + "\n"


def episodes_text(report: EvalReport) -> str:
    lines = ["method\tbed\tindex\tspec\toperators\tprediction\tlabel"]
    for r in report.episodes:
        lines.append(f"{r.method}\t{r.bed}\t{r.index}\t{r.spec}\t{','.join(r.operator_ids)}\t{r.prediction}\t{r.label}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path, figures: bool = True) -> list[str]:
    """Write the report table, plot data, episode log and (optionally) figures.

    ``path`` is the report table file; siblings share its stem.  Returns the
    written paths.
    """
    from .nn import atomic_write_text

    stem, _ = os.path.splitext(str(path))
    written = []
    for target, text in ((str(path), report_text(report)),
                         (stem + "_plot.tsv", plot_data_text(report)),
                         (stem + "_episodes.tsv", episodes_text(report))):
        atomic_write_text(target, text)
        written.append(target)
    if figures:
        from . import plotting
        written.extend(plotting.accuracy_figures(report.rows, stem))
    return written

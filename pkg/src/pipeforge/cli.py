"""Command line entry point: dataset | pretrain | train | eval.

Every subcommand reads one JSON run configuration (``--config``) and writes
all outputs below the configured ``output_dir``.  Exit codes: 0 success,
2 input/configuration error, 3 quality-gate failure.
"""
from __future__ import annotations

import argparse
import configparser
import copy
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

from . import data, evaluate, nn, ops, plotting, policy, ppo, pretrain, sai

log = logging.getLogger("pipeforge")

EXIT_OK, EXIT_INPUT, EXIT_GATE = 0, 2, 3
CHECKPOINT_EVERY = 10

DATASET_FILE = "dataset.bin"
SUMMARY_FILE = "pretrain_summary.json"
METRICS_FILE = "metrics.tsv"
REPORT_FILE = "report.tsv"
MANIFEST_FILE = "manifest.ini"
POOL_FILE = "pool.ini"


class UsageError(Exception):
    """Bad configuration or missing input; maps to exit code 2."""


# -- configuration -------------------------------------------------------------------

DEFAULTS = {
    "output_dir": "run",
    "master_seed": 0,
    "workers": 1,
    "pool_manifest": None,
    "dataset": {"kind": "synthetic", "count": 3000, "size": 16, "class_count": 4,
                "cifar_path": None, "contrast": [0.08, 0.16], "brightness_band": 0.1},
    "curriculum": data.Curriculum().to_dict(),
    "pretrain": dataclasses.asdict(pretrain.PretrainConfig()),
    "ppo": {k: v for k, v in dataclasses.asdict(ppo.PpoConfig()).items() if k != "master_seed"},
    "eval": {"beds": list(evaluate.BEDS), "episode_count": 2000,
             "curriculum": data.Curriculum().to_dict(), "figures": True},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and key != "curriculum" and not where.endswith("curriculum."):
            if not isinstance(val, dict):
                raise UsageError(f"config key {where}{key} must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    output_dir: str
    master_seed: int
    workers: int
    pool_manifest: str | None
    dataset: dict
    curriculum: data.Curriculum
    pretrain: pretrain.PretrainConfig
    ppo: ppo.PpoConfig
    eval_beds: list
    eval_episodes: int
    eval_curriculum: data.Curriculum
    eval_figures: bool
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def out(self) -> str:
        return self.output_dir

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def build_config(doc: dict, seed: int | None = None, base_dir: str = ".") -> RunConfig:
    """Validate a configuration document; any problem raises UsageError."""
    if not isinstance(doc, dict):
        raise UsageError("configuration must be a JSON object")
    raw = _merge(DEFAULTS, doc, "")
    if seed is not None:
        raw["master_seed"] = seed
    try:
        ds = raw["dataset"]
        if ds["kind"] not in ("synthetic", "cifar10"):
            raise UsageError(f"dataset.kind must be synthetic or cifar10, not {ds['kind']!r}")
        if ds["kind"] == "synthetic":
            if not (8 <= int(ds["size"]) <= 64 and 2 <= int(ds["class_count"]) <= 6 and int(ds["count"]) >= 10):
                raise UsageError("dataset: need 8 <= size <= 64, 2 <= class_count <= 6, count >= 10")
            lo, hi = ds["contrast"]
            if not 0 < lo <= hi <= 0.35:
                raise UsageError("dataset.contrast must satisfy 0 < lo <= hi <= 0.35")
        elif not ds["cifar_path"]:
            raise UsageError("dataset.cifar_path is required for kind cifar10")
        else:
            ds["cifar_path"] = os.path.join(base_dir, ds["cifar_path"])
        if int(raw["workers"]) < 1:
            raise UsageError("workers must be >= 1")
        if int(raw["master_seed"]) < 0:
            raise UsageError("master_seed must be >= 0")
        pre_cfg = pretrain.PretrainConfig(**raw["pretrain"])
        for name in ("classifier_epochs", "augment_copies", "sai_samples", "sai_epochs", "batch_size"):
            if getattr(pre_cfg, name) < 1:
                raise UsageError(f"pretrain.{name} must be >= 1")
        if pre_cfg.classifier_lr <= 0 or pre_cfg.sai_lr <= 0:
            raise UsageError("pretrain learning rates must be > 0")
        ppo_cfg = ppo.PpoConfig(**raw["ppo"], master_seed=int(raw["master_seed"]))
        ev = raw["eval"]
        beds = list(ev["beds"])
        if not beds or set(beds) - set(evaluate.BEDS):
            raise UsageError(f"eval.beds must be a nonempty subset of {list(evaluate.BEDS)}")
        if int(ev["episode_count"]) < 1:
            raise UsageError("eval.episode_count must be >= 1")
        cfg = RunConfig(
            output_dir=os.path.join(base_dir, raw["output_dir"]),
            master_seed=int(raw["master_seed"]),
            workers=int(raw["workers"]),
            pool_manifest=(os.path.join(base_dir, raw["pool_manifest"]) if raw["pool_manifest"] else None),
            dataset=ds,
            curriculum=data.Curriculum(**raw["curriculum"]),
            pretrain=pre_cfg,
            ppo=ppo_cfg,
            eval_beds=beds,
            eval_episodes=int(ev["episode_count"]),
            eval_curriculum=data.Curriculum(**ev["curriculum"]),
            eval_figures=bool(ev["figures"]),
            raw=raw,
        )
    except UsageError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return build_config({}, seed)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return build_config(doc, seed, os.path.dirname(os.path.abspath(path)))


# -- manifest ------------------------------------------------------------------------

def update_manifest(cfg: RunConfig, section: str, values: dict) -> None:
    """Record one command's config digest, seed, checksums and timings."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    path = cfg.path(MANIFEST_FILE)
    if os.path.exists(path):
        cp.read(path)
    cp[section] = {"config_sha256": cfg.digest(), "master_seed": str(cfg.master_seed),
                   "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                   **{k: str(v) for k, v in values.items()}}
    if not cp.has_section("config"):
        cp.add_section("config")
    cp["config"]["json"] = json.dumps(cfg.raw, sort_keys=True)
    buf = io.StringIO()
    cp.write(buf)
    nn.atomic_write_text(path, buf.getvalue())


def file_sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- artifact loading ----------------------------------------------------------------

def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"missing {what}: {path} (run the earlier subcommand first)")
    return path


def load_splits(cfg: RunConfig):
    try:
        samples, class_count = data.load_dataset(_require(cfg.path(DATASET_FILE), "dataset cache"))
    except data.DataFormatError as exc:
        raise UsageError(str(exc)) from exc
    return data.split(samples), class_count


def classifier_path(cfg, model):
    return cfg.path(f"classifier_{model}.ckpt")


def sai_path(cfg, attr):
    return cfg.path(f"sai_{attr}.ckpt")


def policy_path(cfg, task):
    return cfg.path(f"policy_{task}.ckpt")


def load_classifiers(cfg) -> dict:
    out = {}
    for model in ops.CLASSIFIER_MODELS:
        nets, _ = nn.load_checkpoint(_require(classifier_path(cfg, model), "classifier checkpoint"))
        out[model] = nets["net"]
    return out


def load_sai(cfg) -> dict:
    out = {}
    for attr in sai.ATTRIBUTES:
        nets, meta = nn.load_checkpoint(_require(sai_path(cfg, attr), "SAI checkpoint"))
        out[attr] = sai.SaiModel(nets["net"], meta["attribute"], int(meta["class_count"]))
    return out


def save_policies(cfg, policies: dict, update: int) -> None:
    for task, params in policies.items():
        nn.save_checkpoint(policy_path(cfg, task), params.nets(), {"stage_task": task, "update": update})


def load_policies(cfg) -> dict:
    out = {}
    for task in ppo.STAGE_TASKS:
        nets, meta = nn.load_checkpoint(_require(policy_path(cfg, task), "policy checkpoint"))
        out[task] = policy.PolicyParams(nets["embed"], nets["key"], nets["query"], meta["stage_task"])
    return out


def load_registry(cfg, classifiers) -> ops.OperatorRegistry:
    if cfg.pool_manifest is None:
        return ops.standard_registry(classifiers)
    try:
        return ops.load_manifest(_require(cfg.pool_manifest, "pool manifest"), classifiers)
    except (ops.OperatorError, KeyError, ValueError) as exc:
        raise UsageError(f"bad pool manifest {cfg.pool_manifest}: {exc}") from exc


# -- subcommands ---------------------------------------------------------------------

def cmd_dataset(cfg: RunConfig) -> int:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        samples = data.gen_synthetic(int(ds["count"]), int(ds["size"]), int(ds["class_count"]),
                                     data.stream_rng(cfg.master_seed, 1),
                                     contrast=tuple(ds["contrast"]), brightness_band=ds["brightness_band"])
        class_count = int(ds["class_count"])
    else:
        try:
            samples = data.load_cifar10_batch(ds["cifar_path"])
        except (OSError, data.DataFormatError) as exc:
            raise UsageError(f"cannot ingest CIFAR-10 batch {ds['cifar_path']}: {exc}") from exc
        if not samples:
            raise UsageError("CIFAR-10 batch holds no records")
        class_count = 10
    path = cfg.path(DATASET_FILE)
    data.save_dataset(path, samples, class_count)
    update_manifest(cfg, "dataset", {"samples": len(samples), "class_count": class_count,
                                     "sha256": file_sha256(path)})
    print(f"dataset\t{path}\t{len(samples)} samples\t{class_count} classes")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    (train, val, test), class_count = load_splits(cfg)
    t0 = time.perf_counter()
    res = pretrain.pretrain(train, val, test, class_count, cfg.master_seed, cfg.pretrain)
    for model, net in res.classifiers.items():
        nn.save_checkpoint(classifier_path(cfg, model), {"net": net}, {"model": model})
    for attr, model in res.sai_models.items():
        nn.save_checkpoint(sai_path(cfg, attr), {"net": model.feature_net},
                           {"attribute": attr, "class_count": model.class_count})
    nn.atomic_write_text(cfg.path(SUMMARY_FILE), json.dumps(res.summary, indent=2, sort_keys=True) + "\n")
    checksums = {f"classifier_{m}": nn.param_checksum(n) for m, n in res.classifiers.items()}
    checksums.update({f"sai_{a}": nn.param_checksum(m.feature_net) for a, m in res.sai_models.items()})
    update_manifest(cfg, "pretrain", {**checksums, "seconds": round(time.perf_counter() - t0, 3)})
    for model, rec in res.summary["classifiers"].items():
        print(f"classifier\t{model}\tclean_test_accuracy\t{rec['clean_test_accuracy']:.4f}")
    for attr, rec in res.summary["sai"].items():
        print(f"sai\t{attr}\ttest_accuracy\t{rec['test_accuracy']:.4f}\ttarget\t{rec['target']:.2f}")
    failures = pretrain.sai_gate_failures(res.summary)
    for msg in failures:
        print(f"quality gate failed: {msg}", file=sys.stderr)
    return EXIT_GATE if failures else EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    (train, _, _), _ = load_splits(cfg)
    classifiers = load_classifiers(cfg)
    sai_models = load_sai(cfg)
    registry = load_registry(cfg, classifiers).subset(("training_pool",))
    nn.atomic_write_text(cfg.path(POOL_FILE), ops.manifest_text(ops.registry_rows(registry)))
    env = ppo.Environment(train, registry, cfg.curriculum)
    frozen_before = nn.param_checksum(*classifiers.values())

    def on_update(u, policies):
        if (u + 1) % CHECKPOINT_EVERY == 0:
            save_policies(cfg, policies, u + 1)

    policies, metrics, timings = ppo.train_loop(env, sai_models, cfg.ppo, on_update=on_update)
    save_policies(cfg, policies, len(metrics))
    if nn.param_checksum(*classifiers.values()) != frozen_before:
        raise RuntimeError("classifier operators changed during policy training")
    nn.atomic_write_text(cfg.path(METRICS_FILE), ppo.metrics_text(metrics))
    if metrics:
        plotting.learning_curve(metrics, cfg.path("learning_curve.png"))
    update_manifest(cfg, "train", {
        **{f"policy_{t}": p.checksum() for t, p in policies.items()},
        "updates": len(metrics),
        "seconds_total": round(sum(timings), 3),
        "seconds_per_update": " ".join(f"{t:.3f}" for t in timings),
    })
    for m in metrics:
        print(f"update\t{m['update']}\tmean_reward\t{m['mean_reward']:.4f}\tbaseline\t{m['baseline']:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    (_, _, test), _ = load_splits(cfg)
    classifiers = load_classifiers(cfg)
    sai_models = load_sai(cfg)
    policies = load_policies(cfg)
    registry = load_registry(cfg, classifiers)
    bed_cfgs = [evaluate.TestBedConfig(b, cfg.eval_episodes, cfg.eval_curriculum, cfg.master_seed)
                for b in cfg.eval_beds]
    try:
        for b in cfg.eval_beds:
            evaluate.bed_registry(registry, b)
    except evaluate.EvalConfigError as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.perf_counter()
    report = evaluate.evaluate(policies, sai_models, registry, test, bed_cfgs)
    written = evaluate.write_report(report, cfg.path(REPORT_FILE), figures=cfg.eval_figures)
    values = {f"policy_{t}": p.checksum() for t, p in policies.items()}
    values.update({f"classifier_{m}": nn.param_checksum(n) for m, n in classifiers.items()})
    values.update({f"sai_{a}": nn.param_checksum(m.feature_net) for a, m in sai_models.items()})
    values.update({f"pool_{b}": " ".join(evaluate.bed_registry(registry, b).ids()) for b in cfg.eval_beds})
    values["seconds"] = round(time.perf_counter() - t0, 3)
    values["files"] = " ".join(os.path.basename(p) for p in written)
    update_manifest(cfg, "eval", values)
    sys.stdout.write(evaluate.report_text(report))
    for bed in cfg.eval_beds:
        accs = "\t".join(f"{m}={report.accuracy(m, bed):.4f}" for m in evaluate.METHODS)
        print(f"# distorted-spec accuracy\t{bed}\t{accs}")
    return EXIT_OK


COMMANDS = {"dataset": cmd_dataset, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipeforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__ or name)
        p.add_argument("--config", help="JSON run configuration (defaults apply to omitted keys)")
        p.add_argument("--seed", type=int, help="override master_seed")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        os.makedirs(cfg.output_dir, exist_ok=True)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

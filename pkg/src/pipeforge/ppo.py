"""PPO training of the per-stage selection policies.

Reward is terminal: 1 when the chosen classifier's argmax matches the label.
The baseline is a running mean of batch accuracy, not a learned critic, and
the terminal return (optionally discounted) is broadcast to every stage.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data, nn, ops, policy, sai

log = logging.getLogger(__name__)

STAGE_TASKS = ("exposure_correction", "denoising", "classification")


class ConfigError(ValueError):
    pass


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    epochs_per_update: int = 4
    episodes_per_update: int = 256
    minibatches: int = 1
    gamma: float = 1.0
    entropy_coefficient: float = 0.01
    learning_rate: float = 3e-4
    update_count: int = 100
    master_seed: int = 0

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ConfigError("clip_epsilon must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.epochs_per_update < 1 or self.episodes_per_update < 1 or self.minibatches < 1:
            raise ConfigError("epochs, episodes and minibatches must be positive")
        if self.update_count < 0:
            raise ConfigError("update_count must be >= 0")
        if self.learning_rate <= 0 or self.entropy_coefficient < 0:
            raise ConfigError("learning_rate must be > 0 and entropy_coefficient >= 0")


@dataclass
class Transition:
    stage_index: int
    stage_task: str
    image: np.ndarray
    candidate_ids: tuple[str, ...]
    mask: np.ndarray
    action_index: int
    old_log_prob: float
    summaries: np.ndarray
    failed: np.ndarray
    reward: float = 0.0


@dataclass
class Trajectory:
    transitions: list[Transition]
    reward: float
    spec: data.DistortionSpec
    label: int
    prediction: int = -1

    @property
    def operator_ids(self) -> list[str]:
        return [t.candidate_ids[t.action_index] for t in self.transitions]


@dataclass
class BaselineTracker:
    running_mean: float = 0.0
    momentum: float = 0.99
    initialized: bool = False


@dataclass
class Environment:
    """Episode source: a clean dataset, an operator pool and a distortion curriculum."""
    samples: list
    registry: ops.OperatorRegistry
    curriculum: data.Curriculum = field(default_factory=data.Curriculum)

    def episode(self, rng: np.random.Generator) -> data.EpisodeSpec:
        sample = self.samples[int(rng.integers(len(self.samples)))]
        spec = data.sample_distortion(rng, self.curriculum)
        return data.make_episode(sample, spec, rng)


def stage_candidates(registry: ops.OperatorRegistry, task: str) -> list:
    cands = registry.candidates(task)
    if not cands:
        raise ConfigError(f"no candidates for stage {task}")
    return cands


def stage_mask(task: str, candidates, image, sai_models) -> np.ndarray:
    if task == "exposure_correction":
        return sai.build_mask(task, candidates, exposure_pred=sai.predict_level(sai_models["exposure"], image))
    if task == "denoising":
        return sai.build_mask(task, candidates, noise_pred=sai.predict_level(sai_models["noise"], image))
    return sai.build_mask(task, candidates)


def run_episode(policies, sai_models, registry, episode: data.EpisodeSpec, rng, mode="sample") -> Trajectory:
    """Walk the episode's stage plan, choosing one operator per stage."""
    img = episode.distorted
    transitions = []
    probs = None
    for k, task in enumerate(episode.stage_plan):
        if task not in policies:
            raise ConfigError(f"no policy for stage {task}")
        cands = stage_candidates(registry, task)
        mask = stage_mask(task, cands, img, sai_models)
        dist = policy.select_action(policies[task], img, cands, mask, rng, mode)
        ev = dist.evaluation
        transitions.append(Transition(k, task, img, tuple(op.id for op in cands), dist.mask,
                                      dist.index, dist.log_prob, ev.summaries, ev.failed))
        out = ev.outputs[dist.index]
        if task == "classification":
            probs = out
        else:
            img = out
    pred = int(np.argmax(probs))
    reward = float(pred == episode.label)
    transitions[-1].reward = reward
    return Trajectory(transitions, reward, episode.spec, episode.label, pred)


def collect_rollouts(policies, sai_models, env: Environment, config: PpoConfig, update_index: int = 0):
    trajs = []
    for i in range(config.episodes_per_update):
        rng = data.stream_rng(config.master_seed, 1, update_index, i)
        trajs.append(run_episode(policies, sai_models, env.registry, env.episode(rng), rng))
    return trajs


def compute_advantage(traj: Trajectory, baseline: BaselineTracker, gamma: float = 1.0) -> np.ndarray:
    n = len(traj.transitions)
    return np.array([gamma ** (n - 1 - l) * traj.reward - baseline.running_mean for l in range(n)])


def update_baseline(baseline: BaselineTracker, batch_accuracy: float) -> BaselineTracker:
    if not 0.0 <= batch_accuracy <= 1.0:
        raise ValueError(f"batch accuracy {batch_accuracy} outside [0, 1]")
    if not baseline.initialized:
        return BaselineTracker(batch_accuracy, baseline.momentum, True)
    m = baseline.momentum
    return BaselineTracker(m * baseline.running_mean + (1 - m) * batch_accuracy, m, True)


def clipped_surrogate(ratio, advantage, clip_epsilon: float):
    """Per-transition PPO objective min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio, advantage = np.asarray(ratio, float), np.asarray(advantage, float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon) * advantage)


def ppo_loss(params: policy.PolicyParams, transitions, advantages, config: PpoConfig):
    """Clipped-surrogate loss with entropy bonus and its gradient.

    Returns (loss, grads, surrogate) where ``surrogate`` is the mean clipped
    objective without the entropy term.
    """
    grads = {k: nn.GradientBundle.zeros_like(v) for k, v in params.nets().items()}
    kept = []
    for t, adv in zip(transitions, advantages):
        if t.stage_task != params.stage_task:
            raise ValueError(f"transition for {t.stage_task} passed to {params.stage_task} policy")
        new_lp = policy.log_prob_from_summaries(params, t.summaries, t.mask, t.action_index, t.failed)
        ratio = math.exp(new_lp - t.old_log_prob) if new_lp - t.old_log_prob < 700 else math.inf
        if not math.isfinite(ratio):
            log.warning("dropping transition with non-finite ratio (stage %s)", t.stage_task)
            continue
        kept.append((t, adv, ratio))
    if not kept:
        return 0.0, grads, 0.0
    n = len(kept)
    eps, c = config.clip_epsilon, config.entropy_coefficient
    surr_total = ent_total = 0.0
    for t, adv, ratio in kept:
        unclipped = ratio * adv
        clipped = min(max(ratio, 1 - eps), 1 + eps) * adv
        surr_total += min(unclipped, clipped)
        # d/dtheta min(.) is r*A*dlogp when the unclipped branch is the minimum
        w_logp = -adv * ratio / n if unclipped <= clipped else 0.0
        _, ent, g = policy.policy_terms(params, t.summaries, t.mask, t.action_index,
                                        w_logp=w_logp, w_entropy=-c / n, failed=t.failed)
        ent_total += ent
        for k in grads:
            grads[k] = grads[k] + g[k]
    surrogate = surr_total / n
    loss = -surrogate - c * ent_total / n
    return loss, grads, surrogate


@dataclass
class PolicyOptimizer:
    params: policy.PolicyParams
    states: dict

    @classmethod
    def create(cls, params: policy.PolicyParams, lr: float) -> "PolicyOptimizer":
        return cls(params, {k: nn.AdamState.for_net(v, lr) for k, v in params.nets().items()})

    def step(self, grads: dict) -> None:
        nets = self.params.nets()
        new = {}
        for k, net in nets.items():
            new[k], self.states[k] = nn.adam_step(net, grads[k], self.states[k])
        self.params = policy.PolicyParams(new["embed"], new["key"], new["query"], self.params.stage_task)


def init_policies(seed: int, tasks=STAGE_TASKS) -> dict:
    return {task: policy.init_policy(task, data.stream_rng(seed, 0, k)) for k, task in enumerate(tasks)}


def train_loop(env: Environment, sai_models, config: PpoConfig, policies=None, on_update=None):
    """Alternate rollout collection and per-policy clipped-surrogate updates.

    Returns the trained policies, the metrics records and the per-update wall
    clock times.  ``on_update(index, policies)`` is called after every update.
    """
    policies = dict(policies or init_policies(config.master_seed))
    opts = {task: PolicyOptimizer.create(p, config.learning_rate) for task, p in policies.items()}
    baseline = BaselineTracker()
    metrics, timings = [], []
    for u in range(config.update_count):
        t0 = time.perf_counter()
        trajs = collect_rollouts({k: o.params for k, o in opts.items()}, sai_models, env, config, u)
        by_task: dict[str, list] = {task: [] for task in opts}
        for traj in trajs:
            adv = compute_advantage(traj, baseline, config.gamma)
            for t, a in zip(traj.transitions, adv):
                by_task[t.stage_task].append((t, a))
        losses = {}
        shuffle_rng = data.stream_rng(config.master_seed, 2, u)
        for task, opt in opts.items():
            items = by_task[task]
            if not items:
                losses[task] = 0.0
                continue
            for _ in range(config.epochs_per_update):
                order = shuffle_rng.permutation(len(items))
                for chunk in np.array_split(order, min(config.minibatches, len(items))):
                    batch = [items[i] for i in chunk]
                    loss, grads, _ = ppo_loss(opt.params, [b[0] for b in batch], [b[1] for b in batch], config)
                    opt.step(grads)
            losses[task] = ppo_loss(opt.params, [b[0] for b in items], [b[1] for b in items], config)[0]
        mean_reward = float(np.mean([t.reward for t in trajs]))
        baseline = update_baseline(baseline, mean_reward)
        metrics.append({"update": u, "mean_reward": mean_reward, "baseline": baseline.running_mean,
                        **{f"loss_{task}": losses.get(task, 0.0) for task in STAGE_TASKS}})
        timings.append(time.perf_counter() - t0)
        log.info("update %d reward %.4f baseline %.4f", u, mean_reward, baseline.running_mean)
        if on_update is not None:
            on_update(u, {k: o.params for k, o in opts.items()})
    return {k: o.params for k, o in opts.items()}, metrics, timings


METRIC_COLUMNS = ("update", "mean_reward", "baseline", "loss_exposure_correction",
                  "loss_denoising", "loss_classification")


def metrics_text(metrics) -> str:
    lines = ["\t".join(METRIC_COLUMNS)]
    for m in metrics:
        lines.append("\t".join([str(m["update"])] + [repr(float(m[c])) for c in METRIC_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        out = []
        for line in fh:
            vals = line.rstrip("\n").split("\t")
            rec = dict(zip(header, vals))
            out.append({k: int(v) if k == "update" else float(v) for k, v in rec.items()})
    return out

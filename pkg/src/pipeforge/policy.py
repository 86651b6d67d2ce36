"""Attention-style stage policy.

Each candidate operator is run on the current image, its output summarized to
a fixed-length vector and embedded by one shared network.  A query built from
the mean embedding is dot-multiplied with per-candidate keys; the masked,
scaled scores are softmax-normalized into the selection distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, ops
from .sai import grayscale

SUMMARY_DIM = 68
DOWNSAMPLE = 8
EMBED_DIM = 32
KEY_DIM = 16
EMBED_HIDDEN = 64


class PolicyError(ValueError):
    pass


@dataclass
class PolicyParams:
    embed_net: nn.DenseNet
    key_net: nn.DenseNet
    query_net: nn.DenseNet
    stage_task: str

    def __post_init__(self):
        if self.embed_net.n_in != SUMMARY_DIM:
            raise PolicyError("embed_net must take the summary vector")
        e = self.embed_net.n_out
        for net in (self.key_net, self.query_net):
            if net.n_in != e or net.n_out != self.key_net.n_out:
                raise PolicyError("key/query nets must map embed_dim -> key_dim")

    @property
    def embed_dim(self) -> int:
        return self.embed_net.n_out

    @property
    def key_dim(self) -> int:
        return self.key_net.n_out

    def nets(self) -> dict[str, nn.DenseNet]:
        return {"embed": self.embed_net, "key": self.key_net, "query": self.query_net}

    def checksum(self) -> str:
        return nn.param_checksum(self.embed_net, self.key_net, self.query_net)


def init_policy(stage_task: str, rng: np.random.Generator) -> PolicyParams:
    return PolicyParams(
        nn.init_net((SUMMARY_DIM, EMBED_HIDDEN, EMBED_DIM), rng),
        nn.init_net((EMBED_DIM, KEY_DIM), rng),
        nn.init_net((EMBED_DIM, KEY_DIM), rng),
        stage_task,
    )


def area_downsample(gray: np.ndarray, out: int = DOWNSAMPLE) -> np.ndarray:
    rows = np.array_split(np.arange(gray.shape[0]), out)
    cols = np.array_split(np.arange(gray.shape[1]), out)
    return np.array([[gray[np.ix_(r, c)].mean() for c in cols] for r in rows])


def summarize(output) -> np.ndarray:
    """Fixed 68-length summary of an operator output.

    Images: 8x8 area-downsampled grayscale plus mean, std, min, max.
    Class-probability vectors: zero-padded.
    """
    out = np.asarray(output, dtype=float)
    if out.ndim == 1:
        if out.size > SUMMARY_DIM:
            raise PolicyError("probability vector longer than the summary")
        vec = np.zeros(SUMMARY_DIM)
        vec[:out.size] = out
        return vec
    g = grayscale(out)
    h, w = g.shape
    if h % DOWNSAMPLE == 0 and w % DOWNSAMPLE == 0:
        small = g.reshape(DOWNSAMPLE, h // DOWNSAMPLE, DOWNSAMPLE, w // DOWNSAMPLE).mean(axis=(1, 3))
    else:
        small = area_downsample(g)
    return np.concatenate([small.reshape(-1), [g.mean(), g.std(), g.min(), g.max()]])


@dataclass
class CandidateEvaluation:
    outputs: list
    summaries: np.ndarray   # (n, SUMMARY_DIM); rows of failed candidates are zero
    embeddings: np.ndarray  # (n, embed_dim)
    failed: np.ndarray      # bool (n,)


@dataclass
class ActionDistribution:
    probs: np.ndarray
    index: int
    log_prob: float
    mask: np.ndarray
    evaluation: CandidateEvaluation | None = field(default=None, repr=False)


def run_candidates(img, candidates) -> tuple[list, np.ndarray, np.ndarray]:
    outputs, summaries, failed = [], np.zeros((len(candidates), SUMMARY_DIM)), np.zeros(len(candidates), bool)
    for i, op in enumerate(candidates):
        try:
            out = op(img)
            vec = summarize(out)
            if not np.isfinite(vec).all():
                raise PolicyError(f"{op.id} produced non-finite output")
        except Exception:
            outputs.append(None)
            failed[i] = True
            continue
        outputs.append(out)
        summaries[i] = vec
    return outputs, summaries, failed


def embed_candidates(params: PolicyParams, img, candidates, rng=None) -> CandidateEvaluation:
    if not candidates:
        raise PolicyError("no candidates")
    for op in candidates:
        if op.task_kind not in (params.stage_task, "identity"):
            raise PolicyError(f"{op.id} ({op.task_kind}) does not belong to a {params.stage_task} stage")
    outputs, summaries, failed = run_candidates(img, candidates)
    emb = nn.forward(params.embed_net, summaries)
    return CandidateEvaluation(outputs, summaries, emb, failed)


def _scores_from(params: PolicyParams, emb: np.ndarray, ok: np.ndarray):
    if not ok.any():
        raise PolicyError("every candidate failed")
    mean = emb[ok].mean(axis=0)
    q = nn.forward(params.query_net, mean)
    keys = nn.forward(params.key_net, emb)
    return keys @ q / math.sqrt(params.key_dim), keys, q, mean


def score_candidates(params: PolicyParams, evaluation: CandidateEvaluation) -> np.ndarray:
    scores, *_ = _scores_from(params, evaluation.embeddings, ~evaluation.failed)
    return scores


def masked_distribution(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return nn.softmax(np.where(mask, scores, -np.inf))


def masked_log_probs(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-softmax over unmasked entries; masked entries hold 0 (not -inf)."""
    shifted = np.where(mask, scores - scores[mask].max(), 0.0)
    return np.where(mask, shifted - math.log(np.exp(shifted[mask]).sum()), 0.0)


def select_action(params: PolicyParams, img, candidates, mask, rng, mode: str = "sample") -> ActionDistribution:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(candidates),):
        raise PolicyError("mask length must equal candidate count")
    evaluation = embed_candidates(params, img, candidates)
    eff = mask & ~evaluation.failed
    if not eff.any():
        raise nn.EmptyCandidateError("all candidates are masked")
    scores = score_candidates(params, evaluation)
    probs = masked_distribution(scores, eff)
    if mode == "greedy":
        idx = int(np.argmax(probs))
    elif mode == "sample":
        idx = nn.categorical_sample(probs, rng)
    else:
        raise PolicyError(f"unknown mode {mode!r}")
    log_prob = float(masked_log_probs(scores, eff)[idx])
    return ActionDistribution(probs, idx, log_prob, eff, evaluation)


def policy_terms(params: PolicyParams, summaries: np.ndarray, mask: np.ndarray, action: int,
                 w_logp: float = 1.0, w_entropy: float = 0.0, failed=None):
    """Log-probability and entropy of one decision plus the gradient of
    ``w_logp * log_prob + w_entropy * entropy`` w.r.t. all three networks.

    Works from cached candidate summaries so PPO epochs need not rerun operators.
    """
    mask = np.asarray(mask, dtype=bool)
    ok = np.ones(len(mask), bool) if failed is None else ~np.asarray(failed, bool)
    if not mask[action]:
        raise PolicyError(f"action {action} is masked")
    e_cache: list = []
    emb = nn.forward(params.embed_net, summaries, e_cache)
    scores, keys, q, mean = _scores_from(params, emb, ok)
    probs = masked_distribution(scores, mask)
    m = mask
    logp_all = masked_log_probs(scores, m)
    log_prob = float(logp_all[action])
    entropy = float(-np.sum(probs[m] * logp_all[m]))

    ds = np.zeros(len(scores))
    ds[action] += w_logp
    ds[m] -= w_logp * probs[m]
    if w_entropy:
        ds[m] += w_entropy * (-probs[m] * (logp_all[m] + entropy))
    scale = 1.0 / math.sqrt(params.key_dim)
    g_keys = np.outer(ds, q) * scale
    g_q = (ds @ keys) * scale
    kgrad = nn.backward(params.key_net, emb, g_keys)
    qgrad = nn.backward(params.query_net, mean, g_q)
    d_emb = kgrad.input_grad.copy()
    d_emb[ok] += qgrad.input_grad / ok.sum()
    egrad = nn.backward(params.embed_net, summaries, d_emb, e_cache)
    grads = {"embed": nn.GradientBundle(egrad.weights, egrad.biases),
             "key": nn.GradientBundle(kgrad.weights, kgrad.biases),
             "query": nn.GradientBundle(qgrad.weights, qgrad.biases)}
    return log_prob, entropy, grads


def log_prob_and_grad(params: PolicyParams, img, candidates, mask, action_index: int):
    _, summaries, failed = run_candidates(img, candidates)
    mask = np.asarray(mask, bool) & ~failed
    log_prob, _, grads = policy_terms(params, summaries, mask, action_index, failed=failed)
    return log_prob, grads


def log_prob_from_summaries(params: PolicyParams, summaries, mask, action: int, failed=None) -> float:
    mask = np.asarray(mask, bool)
    ok = np.ones(len(mask), bool) if failed is None else ~np.asarray(failed, bool)
    emb = nn.forward(params.embed_net, summaries)
    scores, *_ = _scores_from(params, emb, ok)
    return float(masked_log_probs(scores, mask)[action])

"""State attribute identifiers (exposure / noise level) and eligibility masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .data import EXPOSURE_LEVELS, NOISE_LEVELS

ATTRIBUTES = {"exposure": EXPOSURE_LEVELS, "noise": NOISE_LEVELS}
EXPOSURE_TAG = dict(zip(EXPOSURE_LEVELS, ops.EXPOSURE_TAGS))
NOISE_TAG = dict(zip(NOISE_LEVELS, ops.NOISE_TAGS))
FEATURE_COUNT = 12
HIST_BINS = 6


class SaiError(ValueError):
    pass


def grayscale(img) -> np.ndarray:
    img = ops.as_image(img)
    return img.mean(axis=2) if img.shape[2] == 3 else img[:, :, 0]


def laplacian(gray: np.ndarray) -> np.ndarray:
    p = np.pad(gray, 1, mode="reflect")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4 * gray


def extract_features(img) -> np.ndarray:
    """12 statistics: mean, std, min, max, Laplacian variance, horizontal
    high-frequency energy and a normalized 6-bin histogram."""
    g = grayscale(img)
    hist, _ = np.histogram(g, bins=HIST_BINS, range=(0.0, 1.0))
    hf = np.mean(np.diff(g, axis=1) ** 2) if g.shape[1] > 1 else 0.0
    return np.concatenate([
        [g.mean(), g.std(), g.min(), g.max(), laplacian(g).var(), hf],
        hist / g.size,
    ])


@dataclass
class SaiModel:
    feature_net: nn.DenseNet
    attribute: str
    class_count: int

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            raise SaiError(f"unknown attribute {self.attribute!r}")
        if self.feature_net.n_out != self.class_count:
            raise SaiError("network output does not match class_count")

    @property
    def levels(self) -> tuple[str, ...]:
        return ATTRIBUTES[self.attribute]


def untrained_sai(attribute: str) -> SaiModel:
    k = len(ATTRIBUTES[attribute])
    return SaiModel(nn.zero_net((FEATURE_COUNT, 32, 32, k), output_activation="softmax"), attribute, k)


def train_sai(images, labels, attribute: str, rng: np.random.Generator,
              hidden=(32, 32), val_fraction: float = 0.2, **fit_kw) -> tuple[SaiModel, float]:
    """Fit an attribute identifier on (image, class index) pairs.

    Features are standardized with training statistics and the standardization
    is folded into the first layer, so the returned model consumes raw features.
    Returns the best-validation model and its validation accuracy.
    """
    k = len(ATTRIBUTES[attribute])
    labels = np.asarray(labels, dtype=int)
    missing = set(range(k)) - set(labels.tolist())
    if missing:
        raise SaiError(f"{attribute} training data lacks classes {sorted(missing)}")
    feats = np.stack([extract_features(im) for im in images])
    n_val = max(1, int(len(feats) * val_fraction))
    order = rng.permutation(len(feats))
    val, tr = order[:n_val], order[n_val:]
    mu = feats[tr].mean(axis=0)
    sd = feats[tr].std(axis=0) + 1e-6
    net = nn.init_net((FEATURE_COUNT, *hidden, k), rng, output_activation="softmax")
    net, acc, _ = nn.fit_supervised(net, (feats[tr] - mu) / sd, labels[tr],
                                    (feats[val] - mu) / sd, labels[val], rng, **fit_kw)
    w0 = net.weights[0] / sd
    b0 = net.biases[0] - w0 @ mu
    net.weights[0], net.biases[0] = w0, b0
    return SaiModel(net, attribute, k), acc


def predict_attribute(model: SaiModel, img) -> tuple[int, np.ndarray]:
    probs = nn.forward(model.feature_net, extract_features(img))
    return int(np.argmax(probs)), probs


def predict_level(model: SaiModel, img) -> str:
    return model.levels[predict_attribute(model, img)[0]]


def sai_accuracy(model: SaiModel, images, labels) -> float:
    feats = np.stack([extract_features(im) for im in images])
    pred = np.argmax(nn.forward(model.feature_net, feats), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def _level(pred, levels) -> str | None:
    if pred is None:
        return None
    if isinstance(pred, (int, np.integer)):
        return levels[int(pred)]
    return pred


def build_mask(stage_task: str, candidates, exposure_pred=None, noise_pred=None) -> np.ndarray:
    """Boolean eligibility vector over ``candidates``.

    Predictions may be class indices or level names.  Identity is always
    eligible; an empty intersection falls back to all-true.
    """
    if not candidates:
        raise SaiError("empty candidate list")
    if stage_task == "exposure_correction":
        level = _level(exposure_pred, EXPOSURE_LEVELS)
        tag = EXPOSURE_TAG[level] if level is not None else None
    elif stage_task == "denoising":
        level = _level(noise_pred, NOISE_LEVELS)
        tag = NOISE_TAG[level] if level is not None else None
    else:
        tag = None
    if tag is None:
        return np.ones(len(candidates), dtype=bool)
    mask = np.array([op.task_kind == "identity" or tag in op.eligibility_tags for op in candidates])
    if not mask.any():
        mask[:] = True
    return mask

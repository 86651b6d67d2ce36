"""Pre-training of the frozen classifier operators and the attribute identifiers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data, nn, ops, sai

CLASSIFIER_HIDDEN = 64
SAI_EXPOSURE_TARGET = 0.90
SAI_NOISE_TARGET = 0.85
EXPOSURE_AUG_LOG_GAMMA = float(np.log(4 / 3))


@dataclass
class PretrainConfig:
    classifier_epochs: int = 60
    classifier_lr: float = 1e-3
    augment_copies: int = 3
    sai_samples: int = 6000
    sai_epochs: int = 150
    sai_lr: float = 3e-3
    batch_size: int = 64


@dataclass
class PretrainResult:
    classifiers: dict[str, nn.DenseNet]
    sai_models: dict[str, sai.SaiModel]
    summary: dict = field(default_factory=dict)


def _augment(img, model: str, rng) -> np.ndarray:
    if model == "noise_aug":
        sigma = data.NOISE_SIGMA[rng.choice(data.NOISE_LEVELS)]
        return ops.add_gaussian_noise(img, sigma, rng)
    if model == "exposure_aug":
        # residual exposure error left after correction, not the full distortion
        return ops.apply_gamma(img, float(np.exp(rng.uniform(-EXPOSURE_AUG_LOG_GAMMA, EXPOSURE_AUG_LOG_GAMMA))))
    return img


def train_classifier(model: str, train, val, class_count: int, rng, cfg: PretrainConfig):
    # same number of passes for every model; clean copies are identical
    copies = cfg.augment_copies
    x = np.stack([_augment(s.image, model, rng).reshape(-1) for _ in range(copies) for s in train])
    y = np.array([s.label for _ in range(copies) for s in train])
    xv = np.stack([s.image.reshape(-1) for s in val])
    yv = np.array([s.label for s in val])
    net = nn.init_net((x.shape[1], CLASSIFIER_HIDDEN, class_count), rng, output_activation="softmax")
    net, _, _ = nn.fit_supervised(net, x, y, xv, yv, rng, epochs=cfg.classifier_epochs,
                                  batch_size=cfg.batch_size, learning_rate=cfg.classifier_lr)
    return net


def classifier_accuracy(net: nn.DenseNet, samples, transform=None) -> float:
    imgs = np.stack([(transform(s.image) if transform else s.image) for s in samples])
    pred = np.argmax(ops.classify_batch(net, imgs), axis=1)
    return float(np.mean(pred == np.array([s.label for s in samples])))


def sai_dataset(samples, count: int, rng):
    """Distorted images with exposure/noise class labels covering every level."""
    images, exp_labels, noise_labels = [], [], []
    for i in range(count):
        s = samples[i % len(samples)]
        exposure = data.EXPOSURE_LEVELS[rng.integers(3)]
        noise = data.NOISE_LEVELS[rng.integers(4)]
        has_e, has_n = exposure != "well", noise != "none"
        if has_e and has_n:
            kind = data.DISTORTED_KINDS[rng.integers(2)]
        elif has_e:
            kind = "exposure_only"
        elif has_n:
            kind = "noise_only"
        else:
            kind = "none"
        spec = data.DistortionSpec(kind, exposure, noise)
        images.append(data.distort(s.image, spec, rng))
        exp_labels.append(data.EXPOSURE_LEVELS.index(exposure))
        noise_labels.append(data.NOISE_LEVELS.index(noise))
    return images, np.array(exp_labels), np.array(noise_labels)


def pretrain(train, val, test, class_count: int, seed: int, cfg: PretrainConfig | None = None) -> PretrainResult:
    cfg = cfg or PretrainConfig()
    classifiers, summary = {}, {"classifiers": {}, "sai": {}}
    for k, model in enumerate(ops.CLASSIFIER_MODELS):
        rng = data.stream_rng(seed, 100, k)
        net = train_classifier(model, train, val, class_count, rng, cfg)
        classifiers[model] = net
        summary["classifiers"][model] = {"clean_test_accuracy": classifier_accuracy(net, test)}

    sai_models = {}
    imgs, ye, yn = sai_dataset(train, cfg.sai_samples, data.stream_rng(seed, 200))
    timgs, tye, tyn = sai_dataset(test, max(1000, cfg.sai_samples // 4), data.stream_rng(seed, 201))
    for k, (attr, y, ty, target) in enumerate((("exposure", ye, tye, SAI_EXPOSURE_TARGET),
                                               ("noise", yn, tyn, SAI_NOISE_TARGET))):
        model, val_acc = sai.train_sai(imgs, y, attr, data.stream_rng(seed, 300, k),
                                       epochs=cfg.sai_epochs, learning_rate=cfg.sai_lr,
                                       batch_size=cfg.batch_size, patience=20)
        sai_models[attr] = model
        summary["sai"][attr] = {"validation_accuracy": val_acc,
                                "test_accuracy": sai.sai_accuracy(model, timgs, ty),
                                "target": target}
    return PretrainResult(classifiers, sai_models, summary)


def sai_gate_failures(summary: dict) -> list[str]:
    out = []
    for attr, rec in summary["sai"].items():
        if rec["test_accuracy"] < rec["target"]:
            out.append(f"{attr} SAI held-out accuracy {rec['test_accuracy']:.4f} < {rec['target']:.2f}")
    return out

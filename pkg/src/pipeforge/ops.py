"""Restoration/distortion operators, classifier operators and the operator registry.

Images are float arrays of shape ``(height, width, channels)`` with values in
[0, 1].  Borders are handled with mirror padding that does not repeat the edge
pixel (numpy's ``"reflect"`` mode).
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import nn

TASK_KINDS = ("exposure_correction", "denoising", "classification", "identity")
EXPOSURE_TAGS = ("under_exposed", "well_exposed", "over_exposed")
NOISE_TAGS = ("no_noise", "low_noise", "mid_noise", "high_noise")
ALL_TAGS = EXPOSURE_TAGS + NOISE_TAGS
PROVENANCES = ("training_pool", "unseen_pool")


class OperatorError(ValueError):
    pass


def as_image(pixels) -> np.ndarray:
    img = np.asarray(pixels, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise OperatorError(f"image must be HxWx1 or HxWx3, got {img.shape}")
    return img


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise OperatorError(f"bad image shape {img.shape}")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise OperatorError("pixels must lie in [0, 1]")


def apply_gamma(img, g: float) -> np.ndarray:
    if not 0.1 <= g <= 10:
        raise OperatorError(f"gamma {g} outside [0.1, 10]")
    return np.clip(np.power(as_image(img), g), 0.0, 1.0)


def add_gaussian_noise(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= sigma <= 0.5:
        raise OperatorError(f"sigma {sigma} outside [0, 0.5]")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _pad(img, r):
    return np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")


def gaussian_blur(img, kernel_sigma: float, clamp: bool = True) -> np.ndarray:
    if not 0 < kernel_sigma <= 3:
        raise OperatorError(f"kernel_sigma {kernel_sigma} outside (0, 3]")
    img = as_image(img)
    k = gaussian_kernel(kernel_sigma)
    r = len(k) // 2
    h, w = img.shape[:2]
    if r >= min(h, w):
        raise OperatorError("blur radius too large for image")
    p = _pad(img, r)
    # separable: rows then columns
    tmp = sum(k[i] * p[:, i:i + w, :] for i in range(len(k)))
    out = sum(k[i] * tmp[i:i + h, :, :] for i in range(len(k)))
    return np.clip(out, 0.0, 1.0) if clamp else out


def _windows(img, window):
    r = window // 2
    p = _pad(img, r)
    # (h, w, c, window, window)
    return np.lib.stride_tricks.sliding_window_view(p, (window, window), axis=(0, 1))


def median_filter(img, window: int = 3) -> np.ndarray:
    if window not in (3, 5):
        raise OperatorError("median window must be 3 or 5")
    img = as_image(img)
    win = _windows(img, window)
    return np.median(win.reshape(*win.shape[:3], -1), axis=-1)


def mean_filter(img, window: int = 3) -> np.ndarray:
    img = as_image(img)
    return _windows(img, window).mean(axis=(-2, -1))


def histogram_stretch(img) -> np.ndarray:
    img = as_image(img)
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    out = img.copy()
    ok = (span >= 1e-6)[0, 0]
    for c in np.flatnonzero(ok):
        out[:, :, c] = (img[:, :, c] - lo[0, 0, c]) / span[0, 0, c]
    return np.clip(out, 0.0, 1.0)


def identity(img) -> np.ndarray:
    return as_image(img).copy()


@dataclass(frozen=True)
class OperatorDescriptor:
    id: str
    task_kind: str
    kernel: Callable = field(compare=False, repr=False)
    eligibility_tags: frozenset = frozenset()
    provenance: str = "training_pool"
    kernel_name: str = ""
    params: tuple = ()  # sorted (key, value) pairs, kept for the manifest

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise OperatorError(f"unknown task kind {self.task_kind!r}")
        if self.provenance not in PROVENANCES:
            raise OperatorError(f"unknown provenance {self.provenance!r}")
        bad = set(self.eligibility_tags) - set(ALL_TAGS)
        if bad:
            raise OperatorError(f"unknown tags {sorted(bad)}")

    def __call__(self, img):
        return self.kernel(img)

    @property
    def is_classifier(self) -> bool:
        return self.task_kind == "classification"


def classify(op: OperatorDescriptor, img) -> np.ndarray:
    if not op.is_classifier:
        raise OperatorError(f"{op.id} is not a classifier")
    return op(img)


def classifier_kernel(net: nn.DenseNet) -> Callable:
    def run(img):
        x = as_image(img).reshape(-1)
        if x.size != net.n_in:
            raise OperatorError(f"classifier expects {net.n_in} pixels, got {x.size}")
        return nn.forward(net, x)
    run.net = net
    return run


def classify_batch(net: nn.DenseNet, images: np.ndarray) -> np.ndarray:
    return nn.forward(net, images.reshape(len(images), -1))


class OperatorRegistry:
    """Insertion-ordered collection of operators."""

    def __init__(self, ops: Iterable[OperatorDescriptor] = ()):
        self._ops: dict[str, OperatorDescriptor] = {}
        for op in ops:
            self.register(op)

    def register(self, op: OperatorDescriptor) -> "OperatorRegistry":
        if op.id in self._ops:
            raise OperatorError(f"duplicate operator id {op.id!r}")
        self._ops[op.id] = op
        return self

    def __getitem__(self, op_id: str) -> OperatorDescriptor:
        return self._ops[op_id]

    def __contains__(self, op_id) -> bool:
        return op_id in self._ops

    def __iter__(self):
        return iter(self._ops.values())

    def __len__(self):
        return len(self._ops)

    def ids(self) -> list[str]:
        return list(self._ops)

    def filter(self, task_kind=None, tag=None, provenance=None) -> list[OperatorDescriptor]:
        out = []
        for op in self:
            if task_kind is not None and op.task_kind != task_kind:
                continue
            if tag is not None and tag not in op.eligibility_tags:
                continue
            if provenance is not None and op.provenance != provenance:
                continue
            out.append(op)
        return out

    def candidates(self, task_kind: str, provenances=PROVENANCES) -> list[OperatorDescriptor]:
        """Operators usable at a stage: matching task kind, plus identity for restoration stages."""
        out = []
        for op in self:
            if op.provenance not in provenances and op.task_kind != "identity":
                continue
            if op.task_kind == task_kind:
                out.append(op)
            elif op.task_kind == "identity" and task_kind in ("exposure_correction", "denoising"):
                out.append(op)
        return out

    def subset(self, provenances) -> "OperatorRegistry":
        return OperatorRegistry(op for op in self
                                if op.provenance in provenances or op.task_kind == "identity")


def register_operator(reg: OperatorRegistry, desc: OperatorDescriptor) -> OperatorRegistry:
    return reg.register(desc)


def query_eligible(reg: OperatorRegistry, task_kind: str, tag: str) -> list[OperatorDescriptor]:
    return [op for op in reg.candidates(task_kind) if tag in op.eligibility_tags]


# -- building operators from (kernel name, params) --------------------------------

_IMAGE_KERNELS = {
    "gamma": lambda p: (lambda img: apply_gamma(img, p["g"])),
    "gaussian_blur": lambda p: (lambda img: gaussian_blur(img, p["sigma"])),
    "median": lambda p: (lambda img: median_filter(img, int(p["window"]))),
    "mean": lambda p: (lambda img: mean_filter(img, int(p["window"]))),
    "histogram_stretch": lambda p: histogram_stretch,
    "identity": lambda p: identity,
}


def make_operator(op_id, task_kind, kernel_name, params=None, tags=(), provenance="training_pool",
                  classifiers: dict[str, nn.DenseNet] | None = None) -> OperatorDescriptor:
    params = dict(params or {})
    if kernel_name == "classifier":
        name = params["model"]
        if classifiers is None or name not in classifiers:
            raise OperatorError(f"{op_id}: classifier model {name!r} not available")
        kernel = classifier_kernel(classifiers[name])
    elif kernel_name in _IMAGE_KERNELS:
        kernel = _IMAGE_KERNELS[kernel_name](params)
    else:
        raise OperatorError(f"{op_id}: unknown kernel {kernel_name!r}")
    return OperatorDescriptor(op_id, task_kind, kernel, frozenset(tags), provenance,
                              kernel_name, tuple(sorted(params.items())))


CLASSIFIER_MODELS = ("clean", "noise_aug", "exposure_aug")


def standard_pool_spec() -> list[tuple]:
    """(id, task_kind, kernel, params, tags, provenance) rows of the standard pool."""
    rows = []
    for g in (0.4, 0.45, 0.5, 0.55):
        prov = "unseen_pool" if g in (0.45, 0.55) else "training_pool"
        rows.append((f"gamma_{g:.2f}", "exposure_correction", "gamma", {"g": g},
                     ("under_exposed",), prov))
    for g in (1.8, 2.0, 2.2, 2.5):
        prov = "unseen_pool" if g == 2.0 else "training_pool"
        rows.append((f"gamma_{g:.2f}", "exposure_correction", "gamma", {"g": g},
                     ("over_exposed",), prov))
    rows.append(("histogram_stretch", "exposure_correction", "histogram_stretch", {},
                 ("well_exposed",), "training_pool"))
    blur_tags = {0.5: ("low_noise", "mid_noise", "high_noise"), 1.0: ("mid_noise", "high_noise"),
                 1.5: ("mid_noise", "high_noise")}
    for s, tags in blur_tags.items():
        prov = "unseen_pool" if s == 1.5 else "training_pool"
        rows.append((f"blur_{s:.1f}", "denoising", "gaussian_blur", {"sigma": s}, tags, prov))
    rows.append(("median_3", "denoising", "median", {"window": 3},
                 ("low_noise", "mid_noise", "high_noise"), "training_pool"))
    rows.append(("median_5", "denoising", "median", {"window": 5},
                 ("high_noise",), "training_pool"))
    rows.append(("mean_3", "denoising", "mean", {"window": 3},
                 ("mid_noise", "high_noise"), "training_pool"))
    rows.append(("identity", "identity", "identity", {}, ALL_TAGS, "training_pool"))
    for name in CLASSIFIER_MODELS:
        rows.append((f"classifier_{name}", "classification", "classifier", {"model": name},
                     (), "training_pool"))
    return rows


def standard_registry(classifiers: dict[str, nn.DenseNet] | None = None) -> OperatorRegistry:
    reg = OperatorRegistry()
    for op_id, kind, kernel, params, tags, prov in standard_pool_spec():
        if kernel == "classifier" and (classifiers is None or params["model"] not in classifiers):
            continue
        reg.register(make_operator(op_id, kind, kernel, params, tags, prov, classifiers))
    return reg


# -- manifest ---------------------------------------------------------------------

def _fmt_param(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse_param(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def manifest_text(rows) -> str:
    """Render pool rows as INI-style key/value records, one section per operator id."""
    lines = []
    for op_id, kind, kernel, params, tags, prov in rows:
        lines.append(f"[{op_id}]")
        lines.append(f"task_kind = {kind}")
        lines.append(f"kernel = {kernel}")
        lines.append("params = " + ", ".join(f"{k}={_fmt_param(v)}" for k, v in sorted(params.items())))
        lines.append("tags = " + ", ".join(tags))
        lines.append(f"provenance = {prov}")
        lines.append("")
    return "\n".join(lines)


def registry_rows(reg: OperatorRegistry) -> list[tuple]:
    return [(op.id, op.task_kind, op.kernel_name, dict(op.params), tuple(sorted(op.eligibility_tags)),
             op.provenance) for op in reg]


def parse_manifest(text: str) -> list[tuple]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    rows = []
    for op_id in cp.sections():
        sec = cp[op_id]
        unknown = set(sec) - {"task_kind", "kernel", "params", "tags", "provenance"}
        if unknown:
            raise OperatorError(f"[{op_id}]: unknown keys {sorted(unknown)}")
        params = {}
        for item in filter(None, (s.strip() for s in sec.get("params", "").split(","))):
            k, _, v = item.partition("=")
            params[k.strip()] = _parse_param(v.strip())
        tags = tuple(t.strip() for t in sec.get("tags", "").split(",") if t.strip())
        rows.append((op_id, sec["task_kind"], sec["kernel"], params, tags,
                     sec.get("provenance", "training_pool")))
    return rows


def load_manifest(path, classifiers=None) -> OperatorRegistry:
    with open(path) as fh:
        rows = parse_manifest(fh.read())
    reg = OperatorRegistry()
    for row in rows:
        reg.register(make_operator(*row, classifiers=classifiers))
    return reg

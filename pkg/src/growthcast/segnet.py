"""Unsupervised segmentation by differentiable feature clustering.

A small CNN (M blocks of conv3x3 -> ReLU -> BN) maps an image to p-dim pixel
features, a 1x1 linear classifier maps those to q responses, and responses are
standardized per channel.  Each pixel's label is its argmax channel.  The net
is trained against its own labels (softmax cross-entropy) plus an L1 penalty on
differences between neighbouring response vectors, so the label count shrinks
as clusters merge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import (NumericError, Parameter, RngStream, SGDMomentum, ShapeError, activation,
                     activation_backward, batch_norm, batch_norm_backward, conv2d,
                     conv2d_backward, conv_fans, xavier_init)

log = logging.getLogger(__name__)

BN_EPS = 1e-5


@dataclass
class SegConfig:
    n_components: int = 3  # M
    n_features: int = 100  # p
    n_labels: int = 100  # q
    continuity_weight: float = 5.0  # mu
    lr: float = 0.1
    momentum: float = 0.9
    max_iters: int = 500
    min_labels: int = 3

    def validate(self) -> None:
        for name in ("n_components", "n_features", "n_labels", "max_iters", "min_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.continuity_weight < 0:
            raise ValueError(f"continuity_weight must be >= 0, got {self.continuity_weight}")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid optimizer settings lr={self.lr} momentum={self.momentum}")


@dataclass
class ConvBlock:
    kernel: Parameter
    bias: Parameter
    gamma: Parameter
    beta: Parameter


@dataclass
class SegNetModel:
    blocks: list[ConvBlock]
    classifier: Parameter  # W_c, [q, p, 1, 1]
    classifier_bias: Parameter
    norm_gamma: Parameter  # response normalization affine, identity at init
    norm_beta: Parameter

    @classmethod
    def init(cls, in_channels: int, cfg: SegConfig, rng: RngStream, dtype=np.float32) -> "SegNetModel":
        blocks = []
        cin = in_channels
        for m in range(cfg.n_components):
            shape = (cfg.n_features, cin, 3, 3)
            k = xavier_init(shape, *conv_fans(shape), rng, dtype)
            blocks.append(ConvBlock(
                Parameter(f"conv{m}.kernel", k),
                Parameter(f"conv{m}.bias", np.zeros(cfg.n_features, dtype)),
                Parameter(f"bn{m}.gamma", np.ones(cfg.n_features, dtype)),
                Parameter(f"bn{m}.beta", np.zeros(cfg.n_features, dtype)),
            ))
            cin = cfg.n_features
        shape = (cfg.n_labels, cfg.n_features, 1, 1)
        wc = xavier_init(shape, *conv_fans(shape), rng, dtype)
        q = cfg.n_labels
        return cls(blocks, Parameter("classifier.kernel", wc),
                   Parameter("classifier.bias", np.zeros(q, dtype)),
                   Parameter("norm.gamma", np.ones(q, dtype)),
                   Parameter("norm.beta", np.zeros(q, dtype)))

    @property
    def n_labels(self) -> int:
        return self.classifier.shape[0]

    def parameters(self) -> list[Parameter]:
        out = []
        for b in self.blocks:
            out += [b.kernel, b.bias, b.gamma, b.beta]
        return out + [self.classifier, self.classifier_bias, self.norm_gamma, self.norm_beta]

    def astype(self, dtype) -> "SegNetModel":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def forward(self, block: np.ndarray):
        """Returns ``(responses [q, H, W], cache)``.

        The block is reflect-padded by the receptive radius of the conv stack
        and cropped back before the classifier, so block borders do not form
        clusters of their own.
        """
        if block.ndim != 3:
            raise ShapeError(f"block must be [C, H, W], got {block.shape}")
        if min(block.shape[1:]) < 3:
            raise ShapeError(f"block {block.shape} is smaller than the 3x3 kernel")
        x = block.astype(self.classifier.value.dtype, copy=False)
        m = len(self.blocks)
        mode = "reflect" if min(x.shape[1:]) > m else "edge"
        x = np.pad(x, ((0, 0), (m, m), (m, m)), mode=mode)
        cache = []
        for b in self.blocks:
            z = conv2d(x, b.kernel.value, b.bias.value)
            a = activation(z, "relu")
            y, bn = batch_norm(a, b.gamma.value, b.beta.value, BN_EPS)
            cache.append((x, z, a, bn))
            x = y
        feats = x[:, m:x.shape[1] - m, m:x.shape[2] - m]
        r = conv2d(feats, self.classifier.value, self.classifier_bias.value)
        rn, norm = batch_norm(r, self.norm_gamma.value, self.norm_beta.value, BN_EPS)
        return rn, (cache, feats, norm)

    def backward(self, grad_responses: np.ndarray, cache) -> None:
        """Accumulate parameter gradients from d(loss)/d(responses)."""
        blocks_cache, feats, norm = cache
        m = len(self.blocks)
        g, gg, gb = batch_norm_backward(grad_responses, norm)
        self.norm_gamma.grad += gg
        self.norm_beta.grad += gb
        g, gk, gb = conv2d_backward(g, feats, self.classifier.value)
        self.classifier.grad += gk
        self.classifier_bias.grad += gb
        g = np.pad(g, ((0, 0), (m, m), (m, m)))
        for b, (x, z, a, bn) in zip(reversed(self.blocks), reversed(blocks_cache)):
            g, gg, gbeta = batch_norm_backward(g, bn)
            b.gamma.grad += gg
            b.beta.grad += gbeta
            g = activation_backward(g, z, a, "relu")
            g, gk, gb = conv2d_backward(g, x, b.kernel.value)
            b.kernel.grad += gk
            b.bias.grad += gb

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def response_map(model: SegNetModel, block) -> np.ndarray:
    """Standardized ``[q, H, W]`` responses for an image block."""
    px = block.pixels if hasattr(block, "pixels") else np.asarray(block)
    return model.forward(px)[0]


def assign_labels(responses: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest channel index."""
    return np.argmax(responses, axis=0).astype(np.int32)


def _log_softmax(r: np.ndarray) -> np.ndarray:
    shifted = r - r.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def seg_loss_terms(responses: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """``(similarity, continuity)`` parts of the clustering loss."""
    if responses.ndim != 3 or labels.shape != responses.shape[1:]:
        raise ShapeError(f"responses {responses.shape} vs labels {labels.shape}")
    r = responses.astype(np.float64, copy=False)
    logp = _log_softmax(r)
    sim = -np.take_along_axis(logp, labels[None].astype(np.intp), axis=0).mean()
    dv = np.abs(r[:, 1:, :] - r[:, :-1, :])
    dh = np.abs(r[:, :, 1:] - r[:, :, :-1])
    con = (dv.mean() if dv.size else 0.0) + (dh.mean() if dh.size else 0.0)
    return float(sim), float(con)


def seg_loss(responses: np.ndarray, labels: np.ndarray, mu: float) -> float:
    """Self-label cross-entropy plus ``mu`` times mean L1 of neighbour differences."""
    sim, con = seg_loss_terms(responses, labels)
    return sim + mu * con


def seg_loss_backward(responses: np.ndarray, labels: np.ndarray, mu: float) -> np.ndarray:
    """Gradient of :func:`seg_loss` w.r.t. the responses, labels held fixed."""
    q, h, w = responses.shape
    logp = _log_softmax(responses)
    g = np.exp(logp)
    np.put_along_axis(g, labels[None].astype(np.intp),
                      np.take_along_axis(g, labels[None].astype(np.intp), axis=0) - 1, axis=0)
    g /= h * w
    if mu:
        dv = np.sign(responses[:, 1:, :] - responses[:, :-1, :])
        if dv.size:
            dv *= mu / dv.size
            g[:, 1:, :] += dv
            g[:, :-1, :] -= dv
        dh = np.sign(responses[:, :, 1:] - responses[:, :, :-1])
        if dh.size:
            dh *= mu / dh.size
            g[:, :, 1:] += dh
            g[:, :, :-1] -= dh
    return g.astype(responses.dtype, copy=False)


@dataclass
class SegResult:
    model: SegNetModel
    labels: np.ndarray
    iterations: int
    history: list[tuple[float, int]] = field(default_factory=list)  # (loss, label count)


def train_segmentation(block, cfg: SegConfig, rng: RngStream) -> SegResult:
    """Fit the clustering net to one block and return its final labels.

    Stops once the number of distinct labels drops to ``cfg.min_labels`` or
    after ``cfg.max_iters`` updates.
    """
    cfg.validate()
    px = block.pixels if hasattr(block, "pixels") else np.asarray(block)
    px = px.astype(np.float32, copy=False)
    model = SegNetModel.init(px.shape[0], cfg, rng)
    opt = SGDMomentum(model.parameters(), cfg.lr, cfg.momentum)
    history = []
    it = 0
    while True:
        responses, cache = model.forward(px)
        if not np.all(np.isfinite(responses)):
            raise NumericError(f"segmentation responses are not finite at iteration {it}")
        labels = assign_labels(responses)
        n_labels = int(np.unique(labels).size)
        if n_labels <= cfg.min_labels or it >= cfg.max_iters:
            break
        loss = seg_loss(responses, labels, cfg.continuity_weight)
        if not np.isfinite(loss):
            raise NumericError(f"segmentation loss is not finite at iteration {it}")
        history.append((loss, n_labels))
        model.zero_grad()
        model.backward(seg_loss_backward(responses, labels, cfg.continuity_weight), cache)
        opt.step()
        it += 1
    log.debug("segmentation stopped after %d iterations with %d labels", it, n_labels)
    return SegResult(model, labels, it, history)


def extract_class_mask(labels: np.ndarray, target: int, n_labels: int | None = None) -> np.ndarray:
    q = n_labels if n_labels is not None else int(labels.max()) + 1
    if not 0 <= target < q:
        raise ValueError(f"label {target} out of range [0, {q})")
    return (labels == target).astype(np.uint8)


def label_histogram(labels: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(labels, return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def select_urban_label(labels: np.ndarray, reference: np.ndarray) -> int:
    """Label whose support has the highest IoU with ``reference`` (ties -> lowest id)."""
    ref = np.asarray(reference) != 0
    if ref.shape != labels.shape:
        raise ValueError(f"reference {ref.shape} does not match labels {labels.shape}")
    if not ref.any():
        raise ValueError("reference mask is empty")
    n = int(labels.max()) + 1
    flat = labels.ravel()
    inter = np.bincount(flat, weights=ref.ravel(), minlength=n)
    area = np.bincount(flat, minlength=n)
    iou = inter / (area + ref.sum() - inter)
    return int(np.argmax(iou))


def label_palette(n: int) -> np.ndarray:
    """Deterministic, well-spread RGB colors for label ids."""
    i = np.arange(n)
    hue = (i * 0.61803398875) % 1.0
    rgb = np.stack([np.abs(hue * 6 - 3) - 1, 2 - np.abs(hue * 6 - 2), 2 - np.abs(hue * 6 - 4)], axis=1)
    return (np.clip(rgb, 0, 1) * 200 + 40).astype(np.uint8)


def save_label_map(labels: np.ndarray, path) -> None:
    """Write an 8-bit indexed PNG plus a ``<stem>.palette.txt`` sidecar."""
    path = Path(path)
    if labels.max(initial=0) > 255 or labels.min(initial=0) < 0:
        raise ValueError("label ids must fit in 8 bits")
    n = int(labels.max(initial=0)) + 1
    pal = label_palette(n)
    h, w = labels.shape
    img = Image.frombytes("P", (w, h), np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
    img.putpalette(pal.ravel().tolist())
    img.save(path)
    with open(path.with_suffix(".palette.txt"), "w") as fh:
        fh.write("# label r g b\n")
        for i, (r, g, b) in enumerate(pal):
            fh.write(f"{i} {r} {g} {b}\n")


def load_label_map(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P":
        raise ValueError(f"{path}: expected an indexed PNG, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.int32)

"""Pixel-wise loss reweighting learned online from a small clean split.

Each training pixel carries a pair of weights: one on the cross-entropy
against its (possibly corrupted) observed label, one on the cross-entropy
against the model's own argmax pseudo-label. The weights are refined every
iteration by a one-step look-ahead: a temporary parameter update with the
current weights, the validation loss gradient at the updated parameters,
and a per-pixel inner product that says whether up-weighting that pixel
would have lowered the validation loss.

The inner product <grad L_val(theta_hat), grad_theta f_pixel(theta)> for
every pixel at once is a directional derivative of the per-pixel loss maps
in the direction of the validation gradient, so a single forward-tangent
sweep computes all of them. A literal per-pixel reverse pass is kept as a
cross-check (`meta_grads_explicit`); both must agree with the
epsilon-perturbation finite difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tape
from .network import NetConfig, build_forward, pseudo_labels


@dataclass
class Batch:
    images: np.ndarray              # (N, H, W) or (N, H, W, C)
    labels: np.ndarray              # (N, H, W) integer class map
    pseudo: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if self.images.shape[:3] != self.labels.shape[:3]:
            raise ValueError(f"images {self.images.shape} vs labels {self.labels.shape}")


@dataclass
class MetaBatch:
    """A training mini-batch with noisy labels paired with a validation
    mini-batch whose labels come from the clean split only."""
    train: Batch
    val: Batch


@dataclass
class WeightMaps:
    """Raw per-pixel weight pairs plus their rectified and normalized
    variants. Raw values persist across epochs; rectified/normalized are
    recomputed after every update."""
    alpha: np.ndarray        # raw, (n, H, W)
    beta: np.ndarray
    alpha_t: np.ndarray      # rectified max(., 0)
    beta_t: np.ndarray
    alpha_hat: np.ndarray    # rectified / Z per image
    beta_hat: np.ndarray
    z: np.ndarray            # (n,) per-image normalizer
    reset: np.ndarray        # (n,) bool, True if last update hit Z = 0

    @property
    def n_images(self) -> int:
        return self.alpha.shape[0]


@dataclass
class GammaMap:
    gamma: np.ndarray        # (n, H, W), rectified alpha + rectified beta


def init_weight_maps(n_images: int, h: int, w: int) -> WeightMaps:
    """Full trust in the observed labels: alpha 1, beta 0 everywhere."""
    if n_images <= 0 or h <= 0 or w <= 0:
        raise ValueError("dimensions must be positive")
    alpha = np.ones((n_images, h, w))
    beta = np.zeros((n_images, h, w))
    z = np.full(n_images, float(h * w))
    return WeightMaps(alpha=alpha, beta=beta,
                      alpha_t=alpha.copy(), beta_t=beta.copy(),
                      alpha_hat=alpha / z[:, None, None],
                      beta_hat=beta.copy(),
                      z=z, reset=np.zeros(n_images, dtype=bool))


def _reset_image(maps: WeightMaps, i: int) -> None:
    h, w = maps.alpha.shape[1:]
    maps.alpha[i] = 1.0
    maps.beta[i] = 0.0
    maps.alpha_t[i] = 1.0
    maps.beta_t[i] = 0.0
    maps.z[i] = float(h * w)
    maps.alpha_hat[i] = 1.0 / (h * w)
    maps.beta_hat[i] = 0.0
    maps.reset[i] = True


def pixel_loss(probs: np.ndarray, real: np.ndarray, pseudo: np.ndarray,
               alpha: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, float]:
    """Weighted bootstrap loss per pixel:
    alpha * CE(p, real) + beta * CE(p, pseudo). Returns the (H, W) map and
    its sum. Labels must be in range; zero probability at a selected label
    is a fault."""
    probs = np.asarray(probs)
    real = np.asarray(real)
    pseudo = np.asarray(pseudo)
    n_classes = probs.shape[-1]
    for name, lab in (("real", real), ("pseudo", pseudo)):
        if lab.shape != probs.shape[:-1]:
            raise ValueError(f"{name} labels shape {lab.shape} vs probs {probs.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
            raise ValueError(f"{name} label out of range [0, {n_classes})")
    p_real = np.take_along_axis(probs, real[..., None], axis=-1)[..., 0]
    p_pseudo = np.take_along_axis(probs, pseudo[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        ce_real = -np.log(p_real)
        ce_pseudo = -np.log(p_pseudo)
    loss_map = np.asarray(alpha) * ce_real + np.asarray(beta) * ce_pseudo
    if not np.all(np.isfinite(loss_map)):
        raise ArithmeticError("non-finite pixel loss (zero probability at a label)")
    return loss_map, float(loss_map.sum())


def _weighted_ce_scalar(cfg: NetConfig, theta_var, images, real, pseudo,
                        alpha, beta, segments):
    """Tape scalar sum_i sum_hw [alpha*CE(p, real) + beta*CE(p, pseudo)]."""
    logits, _, _ = build_forward(cfg, theta_var, images, segments)
    f_map = ad.softmax_cross_entropy(logits, real)
    g_map = ad.softmax_cross_entropy(logits, pseudo)
    tape = theta_var.tape
    weighted = ad.add(ad.mul(f_map, tape.const(alpha)),
                      ad.mul(g_map, tape.const(beta)))
    return ad.asum(weighted), f_map, g_map


def compute_pseudo(theta: ParamVector, cfg: NetConfig, images: np.ndarray,
                   dtype=ad.F64) -> np.ndarray:
    """Argmax labels of the current model on a batch; treated as constants."""
    with Tape(dtype) as tape:
        tv = tape.const(theta.values.astype(dtype, copy=False))
        _, _, probs = build_forward(cfg, tv, images, theta.segments)
        return pseudo_labels(probs.data)


def inner_step(theta: ParamVector, batch: Batch, alpha_hat: np.ndarray,
               beta_hat: np.ndarray, lam: float, cfg: NetConfig,
               dtype=ad.F64) -> ParamVector:
    """Temporary look-ahead update: theta - lam * grad of the weighted CE
    over the batch. theta itself is left untouched."""
    if lam <= 0:
        raise ValueError("learning rate must be positive")
    pseudo = batch.pseudo if batch.pseudo is not None else \
        compute_pseudo(theta, cfg, batch.images, dtype)

    def f(tv):
        s, _, _ = _weighted_ce_scalar(cfg, tv, batch.images, batch.labels,
                                      pseudo, alpha_hat, beta_hat, theta.segments)
        return s

    _, grad = ad.value_and_grad(f, theta, dtype)
    return ParamVector(theta.segments,
                       theta.values.astype(np.float64) - lam * grad.values.astype(np.float64))


def validation_loss_and_grad(theta_hat: ParamVector, val: Batch, cfg: NetConfig,
                             dtype=ad.F64) -> tuple[float, np.ndarray]:
    """Summed CE of the look-ahead model on the clean validation batch,
    with its parameter gradient."""
    def f(tv):
        logits, _, _ = build_forward(cfg, tv, val.images, theta_hat.segments)
        return ad.asum(ad.softmax_cross_entropy(logits, val.labels))

    value, grad = ad.value_and_grad(f, theta_hat, dtype)
    return value, grad.values


def meta_grads_from_tape(tape: Tape, theta_leaf, f_map, g_map,
                         val_grad: np.ndarray, lam: float
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Tangent sweep of an existing forward tape in the direction of the
    validation gradient; returns the weight derivative maps."""
    tans = ad.jvp(tape, {theta_leaf.idx: val_grad})
    tf = tans[f_map.idx]
    tg = tans[g_map.idx]
    shape = f_map.data.shape
    d_alpha = np.zeros(shape) if tf is None else -lam * tf.astype(np.float64)
    d_beta = np.zeros(shape) if tg is None else -lam * tg.astype(np.float64)
    return d_alpha, d_beta


def meta_grads(theta: ParamVector, theta_hat: ParamVector, batch: Batch,
               val_batch: Batch, lam: float, cfg: NetConfig,
               dtype=ad.F64) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-pixel derivatives of the validation loss with respect to the
    weights used in the temporary update:

        d L_val / d alpha_hw = -lam * <grad L_val(theta_hat), grad_theta f_hw>
        d L_val / d beta_hw  = -lam * <grad L_val(theta_hat), grad_theta g_hw>

    computed for all pixels with one forward-tangent sweep in the direction
    of the validation gradient. Also returns the validation loss value.
    """
    val_value, v = validation_loss_and_grad(theta_hat, val_batch, cfg, dtype)
    pseudo = batch.pseudo if batch.pseudo is not None else \
        compute_pseudo(theta, cfg, batch.images, dtype)

    with Tape(dtype) as tape:
        tv = tape.leaf(theta.values.astype(dtype, copy=True))
        logits, _, _ = build_forward(cfg, tv, batch.images, theta.segments)
        f_map = ad.softmax_cross_entropy(logits, batch.labels)
        g_map = ad.softmax_cross_entropy(logits, pseudo)
        d_alpha, d_beta = meta_grads_from_tape(tape, tv, f_map, g_map, v, lam)
    if d_alpha.shape != batch.labels.shape or d_beta.shape != batch.labels.shape:
        raise ValueError("meta gradient maps do not match the batch shape")
    return d_alpha, d_beta, val_value


def meta_grads_explicit(theta: ParamVector, theta_hat: ParamVector, batch: Batch,
                        val_batch: Batch, lam: float, cfg: NetConfig,
                        dtype=ad.F64) -> tuple[np.ndarray, np.ndarray]:
    """Reference route: one reverse pass per pixel and loss term. Identical
    in exact arithmetic to meta_grads; quadratic cost, tests only."""
    _, v = validation_loss_and_grad(theta_hat, val_batch, cfg, dtype)
    pseudo = batch.pseudo if batch.pseudo is not None else \
        compute_pseudo(theta, cfg, batch.images, dtype)
    n, h, w = batch.labels.shape
    d_alpha = np.zeros((n, h, w))
    d_beta = np.zeros((n, h, w))
    for i in range(n):
        for r in range(h):
            for c in range(w):
                for which, labels, out in (("f", batch.labels, d_alpha),
                                           ("g", pseudo, d_beta)):
                    def f(tv):
                        logits, _, _ = build_forward(cfg, tv, batch.images,
                                                     theta.segments)
                        ce = ad.softmax_cross_entropy(logits, labels)
                        hot = np.zeros((n, h, w))
                        hot[i, r, c] = 1.0
                        return ad.asum(ad.mul(ce, tv.tape.const(hot)))

                    _, grad = ad.value_and_grad(f, theta, dtype)
                    out[i, r, c] = -lam * float(v @ grad.values)
    return d_alpha, d_beta


def update_rectify_normalize(maps: WeightMaps, grads: tuple[np.ndarray, np.ndarray],
                             eta: float, ids: Optional[list[int]] = None) -> WeightMaps:
    """Gradient-descent step on the raw weights of the given images, then
    rectify to non-negative and normalize so the rectified mass sums to 1
    per image. An image whose rectified mass is exactly zero is reset to
    the initial weights and flagged."""
    if eta <= 0:
        raise ValueError("meta learning rate must be positive")
    d_alpha, d_beta = grads
    if ids is None:
        ids = list(range(maps.n_images))
    if d_alpha.shape[0] != len(ids) or d_beta.shape[0] != len(ids):
        raise ValueError(f"gradients cover {d_alpha.shape[0]} images, ids has {len(ids)}")
    for j, i in enumerate(ids):
        maps.alpha[i] -= eta * d_alpha[j]
        maps.beta[i] -= eta * d_beta[j]
        at = np.maximum(maps.alpha[i], 0.0)
        bt = np.maximum(maps.beta[i], 0.0)
        z = float(at.sum() + bt.sum())
        if z == 0.0:
            _reset_image(maps, i)
            continue
        maps.alpha_t[i] = at
        maps.beta_t[i] = bt
        maps.z[i] = z
        maps.alpha_hat[i] = at / z
        maps.beta_hat[i] = bt / z
        maps.reset[i] = False
    return maps


def gamma_map(maps: WeightMaps) -> GammaMap:
    """Per-pixel reliability: sum of the rectified weight pair."""
    return GammaMap(gamma=maps.alpha_t + maps.beta_t)


# ---------------------------------------------------------------------------
# Weight-map persistence: magic, n/h/w as u32, then the raw alpha and beta
# planes as float32 little-endian.

WEIGHTS_MAGIC = b"MDWM"


def save_weight_maps(path, maps: WeightMaps) -> None:
    n, h, w = maps.alpha.shape
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(np.asarray([n, h, w], dtype="<u4").tobytes())
        fh.write(maps.alpha.astype("<f4").tobytes())
        fh.write(maps.beta.astype("<f4").tobytes())


def load_weight_maps(path) -> WeightMaps:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"bad weight-map magic at byte 0: {blob[:4]!r}")
    n, h, w = (int(x) for x in np.frombuffer(blob[4:16], dtype="<u4"))
    plane = n * h * w * 4
    if len(blob) != 16 + 2 * plane:
        raise ValueError(f"weight-map file size {len(blob)}, expected {16 + 2 * plane}")
    alpha = np.frombuffer(blob[16:16 + plane], dtype="<f4").astype(np.float64)
    beta = np.frombuffer(blob[16 + plane:], dtype="<f4").astype(np.float64)
    maps = init_weight_maps(n, h, w)
    maps.alpha = alpha.reshape(n, h, w)
    maps.beta = beta.reshape(n, h, w)
    refresh_derived(maps)
    return maps


def refresh_derived(maps: WeightMaps) -> None:
    """Recompute rectified/normalized planes from the raw values."""
    at = np.maximum(maps.alpha, 0.0)
    bt = np.maximum(maps.beta, 0.0)
    z = at.sum(axis=(1, 2)) + bt.sum(axis=(1, 2))
    for i in range(maps.n_images):
        if z[i] == 0.0:
            _reset_image(maps, i)
        else:
            maps.alpha_t[i] = at[i]
            maps.beta_t[i] = bt[i]
            maps.z[i] = z[i]
            maps.alpha_hat[i] = at[i] / z[i]
            maps.beta_hat[i] = bt[i] / z[i]
            maps.reset[i] = False

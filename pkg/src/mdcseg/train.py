"""Training harness: warm-up plus meta phase, evaluation, the module
ablation, and the meta-set-size study.

Each meta-phase step runs the alternation:

    1. temporary update of the model with the current normalized weights
    2. validation gradient at the temporary parameters, turned into
       per-pixel weight derivatives
    3. descent step on the raw weights, rectify, normalize
    4. fresh forward pass; pixel losses under the new weights, plus the
       dynamic-center boundary term and the soft Dice term
    5. SGD step with momentum, weight decay, gradient-norm clipping, and
       the 20/(epoch+20) learning-rate schedule

Warm-up epochs (and any run with the meta toggle off) train plain
cross-entropy under the initial weights with no boundary term, which makes
the all-toggles-off configuration the exact plain-CE baseline.

Determinism: every random draw flows from SplitMix64 streams derived from
the config seed, so identical (config, seed) reproduce the training log
and checkpoint byte for byte. Wall-clock timings go to a separate sidecar
file for that reason.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import boundary as bnd
from .autodiff import ParamVector, Tape
from .data import Dataset, gen_synthetic, split
from .losses import dice_loss_on_tape
from .metrics import cost_efficiency, evaluate_pair
from .network import (NetConfig, as_batch, build_forward, init_params,
                      pseudo_labels, save_checkpoint)
from .noise import corrupt_mask, noise_config
from .reweight import (Batch, WeightMaps, gamma_map, init_weight_maps,
                       inner_step, meta_grads_from_tape,
                       update_rectify_normalize, validation_loss_and_grad)
from .rng import (Rng, STREAM_INIT, STREAM_NOISE, STREAM_TRAIN)


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; the log carries a diagnostic
    record describing the failing step."""


@dataclass
class TrainConfig:
    # data
    data_dir: str = ""
    n_images: int = 100
    height: int = 32
    width: int = 32
    noise_level: int = 40
    metaval_frac: float = 0.02
    test_frac: float = 0.2
    # network
    in_channels: int = 1
    classes: int = 2
    base_width: int = 8
    depth: int = 2
    feature_dim: int = 16
    # optimization
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 4
    meta_batch_size: int = 2
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 0.2
    meta_lr_scale: float = 0.01
    # objective
    lambda_bd: float = 0.30
    lambda_dice: float = 0.10
    tau: float = 0.7
    tau_dcd: float = 0.6
    dcd_max: float = 100.0
    dcd_eps: float = 1e-8
    edge_percentile: float = 0.10
    tau_min: int = 10
    # module toggles
    meta: bool = True
    dcd: bool = True
    dice: bool = True
    augment_flips: bool = True
    # misc
    seed: int = 0
    precision: str = "f64"
    ema: bool = False
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        for name in ("lr", "momentum", "grad_clip", "meta_lr_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    @property
    def dtype(self):
        return ad.F64 if self.precision == "f64" else ad.F32

    def net_config(self) -> NetConfig:
        return NetConfig(in_channels=self.in_channels, classes=self.classes,
                         base_width=self.base_width, depth=self.depth,
                         feature_dim=self.feature_dim)

    def lr_at(self, epoch: int) -> float:
        return self.lr * 20.0 / (epoch + 20.0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        payload = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class TrainResult:
    params: ParamVector
    cfg: TrainConfig
    log: list[dict]
    weight_maps: WeightMaps
    center_state: bnd.CenterState
    ema_params: ParamVector | None = None
    timings: list[dict] = field(default_factory=list)


def prepare_benchmark(cfg: TrainConfig) -> Dataset:
    """Generate the synthetic corpus, split it, and corrupt the training
    masks at the configured noise level. Per-mask noise streams derive from
    the item id so the corpus corrupts identically across runs."""
    ds = gen_synthetic(cfg.n_images, cfg.height, cfg.width, cfg.seed)
    split(ds, metaval_frac=cfg.metaval_frac, test_frac=cfg.test_frac, seed=cfg.seed)
    ncfg = noise_config(cfg.noise_level)
    noise_rng = Rng(cfg.seed).derive(STREAM_NOISE)
    base = noise_rng.next_u64()
    for i in ds.train_ids:
        ds.items[i].noisy_mask = corrupt_mask(ds.items[i].clean_mask, ncfg,
                                              Rng(base ^ i))
    return ds


def _maybe_flip(arr: np.ndarray, fh: bool, fv: bool) -> np.ndarray:
    if fv:
        arr = arr[::-1]
    if fh:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(arr)


def _fg_prob_tensor(probs, classes: int):
    """Foreground probability as a tensor: 1 - P(class 0), which is
    P(class 1) for the binary case."""
    if classes == 2:
        return ad.take_channel(probs, 1)
    return ad.shift(ad.neg(ad.take_channel(probs, 0)), 1.0)


def _clip_gradient(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm), max_norm
    return grad, norm


def train(cfg: TrainConfig, dataset: Dataset, out_dir: str | None = None) -> TrainResult:
    """Run the full loop on a prepared dataset (noisy train masks, clean
    metaval/test masks). Writes train_log.jsonl, timing.jsonl, and
    model.ckpt under out_dir when given."""
    netcfg = cfg.net_config()
    dtype = cfg.dtype
    if not dataset.train_ids or not dataset.metaval_ids:
        raise ValueError("dataset must provide train and metaval splits")
    for i in dataset.train_ids:
        if dataset.items[i].noisy_mask is None:
            raise ValueError(f"train item {i} lacks a noisy mask; corrupt first")

    h, w = dataset.height, dataset.width
    train_ids = list(dataset.train_ids)
    images = {i: dataset.items[i].image for i in train_ids}
    labels = {i: dataset.items[i].noisy_mask.astype(np.int64) for i in train_ids}
    edge_cache = {i: bnd.detect_edges(images[i], cfg.edge_percentile)
                  for i in train_ids}

    val_ids = list(dataset.metaval_ids)
    val_images = np.stack([dataset.items[i].image for i in val_ids])
    val_labels = np.stack([dataset.items[i].clean_mask.astype(np.int64)
                           for i in val_ids])

    root = Rng(cfg.seed)
    theta = init_params(netcfg, root.derive(STREAM_INIT).state)
    train_stream = root.derive(STREAM_TRAIN)
    maps = init_weight_maps(len(train_ids), h, w)
    pos_of = {img_id: pos for pos, img_id in enumerate(train_ids)}
    center_state = bnd.CenterState(netcfg.feature_dim)
    momentum_buf = np.zeros_like(theta.values)
    ema_values = theta.values.copy() if cfg.ema else None

    log: list[dict] = []
    timings: list[dict] = []
    step = 0
    val_ptr = 0

    def run_step(epoch: int, batch_ids: list[int], flips: list[tuple[bool, bool]]):
        nonlocal step, val_ptr, theta, momentum_buf, ema_values
        t_start = time.perf_counter()
        lr_t = cfg.lr_at(epoch)
        warmup = epoch < cfg.warmup_epochs
        meta_active = cfg.meta and not warmup

        bimgs = np.stack([_maybe_flip(images[i], fh, fv)
                          for i, (fh, fv) in zip(batch_ids, flips)])
        blabels = np.stack([_maybe_flip(labels[i], fh, fv)
                            for i, (fh, fv) in zip(batch_ids, flips)])
        positions = [pos_of[i] for i in batch_ids]

        val_loss = None
        resets = 0
        fallback_count = 0
        try:
            with Tape(dtype) as tape:
                tv = tape.leaf(theta.values.astype(dtype, copy=True))
                logits, features, probs = build_forward(netcfg, tv, bimgs,
                                                        theta.segments)
                f_map = ad.softmax_cross_entropy(logits, blabels)
                if not meta_active:
                    pixel_map = f_map  # init weights: alpha 1, beta 0
                else:
                    pseudo = pseudo_labels(probs.data)
                    g_map = ad.softmax_cross_entropy(logits, pseudo)

                    batch = Batch(images=bimgs, labels=blabels, pseudo=pseudo)
                    a_hat = np.stack([_maybe_flip(maps.alpha_hat[p], fh, fv)
                                      for p, (fh, fv) in zip(positions, flips)])
                    b_hat = np.stack([_maybe_flip(maps.beta_hat[p], fh, fv)
                                      for p, (fh, fv) in zip(positions, flips)])
                    theta_hat = inner_step(theta, batch, a_hat, b_hat, lam=lr_t,
                                           cfg=netcfg, dtype=dtype)
                    vsel = [(val_ptr + j) % len(val_ids)
                            for j in range(cfg.meta_batch_size)]
                    val_ptr = (val_ptr + cfg.meta_batch_size) % len(val_ids)
                    vbatch = Batch(images=val_images[vsel],
                                   labels=val_labels[vsel])
                    val_loss, vgrad = validation_loss_and_grad(
                        theta_hat, vbatch, netcfg, dtype)
                    d_alpha, d_beta = meta_grads_from_tape(
                        tape, tv, f_map, g_map, vgrad, lr_t)
                    # gradients were computed in flipped orientation; undo
                    d_alpha = np.stack([_maybe_flip(d_alpha[j], fh, fv)
                                        for j, (fh, fv) in enumerate(flips)])
                    d_beta = np.stack([_maybe_flip(d_beta[j], fh, fv)
                                       for j, (fh, fv) in enumerate(flips)])
                    update_rectify_normalize(maps, (d_alpha, d_beta),
                                             eta=cfg.meta_lr_scale * lr_t,
                                             ids=positions)
                    resets = int(maps.reset[positions].sum())

                    a_use = np.stack([_maybe_flip(maps.alpha_hat[p], fh, fv)
                                      for p, (fh, fv) in zip(positions, flips)])
                    b_use = np.stack([_maybe_flip(maps.beta_hat[p], fh, fv)
                                      for p, (fh, fv) in zip(positions, flips)])
                    pixel_map = ad.add(ad.mul(f_map, tape.const(a_use)),
                                       ad.mul(g_map, tape.const(b_use)))
                base_t = ad.asum(pixel_map)
                total_t = base_t

                boundary_val = 0.0
                if cfg.dcd and not warmup:
                    gmaps = gamma_map(maps)
                    bd_weight_img = np.zeros_like(bimgs)
                    for j, (img_id, (fh, fv)) in enumerate(zip(batch_ids, flips)):
                        p = pos_of[img_id]
                        probs_fg = 1.0 - probs.data[j, :, :, 0]
                        edges = _maybe_flip(edge_cache[img_id], fh, fv)
                        regions = bnd.decompose_regions(probs_fg, cfg.tau, edges)
                        gamma = _maybe_flip(gmaps.gamma[p], fh, fv)
                        centers = bnd.weighted_centers(features.data[j], gamma,
                                                       regions,
                                                       state=center_state,
                                                       tau_min=cfg.tau_min)
                        fallback_count += sum(centers.used_fallback)
                        dcd_vals = bnd.dcd_map(features.data[j], regions,
                                               centers, eps=cfg.dcd_eps,
                                               dcd_max=cfg.dcd_max)
                        weights = bnd.boundary_weights(dcd_vals, cfg.tau_dcd)
                        bd_weight_img[j][regions.bd] = weights
                    boundary_t = ad.asum(ad.mul(pixel_map,
                                                tape.const(bd_weight_img)))
                    boundary_val = float(boundary_t.data)
                    total_t = ad.add(total_t, ad.scale(boundary_t, cfg.lambda_bd))

                dice_val = 0.0
                if cfg.dice:
                    fg_probs = _fg_prob_tensor(probs, netcfg.classes)
                    dice_t = None
                    for j in range(len(batch_ids)):
                        dj = dice_loss_on_tape(ad.take_index(fg_probs, j),
                                               blabels[j].astype(np.float64))
                        dice_t = dj if dice_t is None else ad.add(dice_t, dj)
                    dice_val = float(dice_t.data)
                    total_t = ad.add(total_t, ad.scale(dice_t, cfg.lambda_dice))

                adj = ad.backward(total_t)
                grad = adj[tv.idx]
                grad = np.zeros_like(theta.values) if grad is None else \
                    grad.astype(np.float64)
                base_val = float(base_t.data)
                total_val = float(total_t.data)
        except ad.NonFiniteError as exc:
            log.append({"event": "abort", "epoch": epoch, "step": step,
                        "error": str(exc)})
            raise TrainAbort(str(exc)) from exc

        grad, clipped_norm = _clip_gradient(grad, cfg.grad_clip)
        grad = grad + cfg.weight_decay * theta.values
        momentum_buf = cfg.momentum * momentum_buf + grad
        theta = ParamVector(theta.segments, theta.values - lr_t * momentum_buf)
        if ema_values is not None:
            ema_values = cfg.ema_decay * ema_values + (1 - cfg.ema_decay) * theta.values

        sel = np.asarray(positions)
        live = ~maps.reset[sel]
        wsum = (maps.alpha_hat[sel] + maps.beta_hat[sel]).sum(axis=(1, 2))
        wsum_err = float(np.abs(wsum[live] - 1.0).max()) if live.any() else 0.0
        record = {
            "epoch": epoch,
            "step": step,
            "phase": "warmup" if warmup else "meta",
            "base": base_val,
            "boundary": boundary_val,
            "dice": dice_val,
            "total": total_val,
            "val_loss": val_loss,
            "mean_gamma": float(gamma_map(maps).gamma.mean()),
            "fallback_centers": fallback_count,
            "reset_weights": resets,
            "grad_norm": clipped_norm,
            "lr": lr_t,
            "weight_sum_err": wsum_err,
            "weight_min_rect": float(min(maps.alpha_t[sel].min(),
                                         maps.beta_t[sel].min())),
        }
        log.append(record)
        timings.append({"step": step, "wall_ms": (time.perf_counter() - t_start) * 1e3})
        step += 1

    for epoch in range(cfg.epochs):
        epoch_rng = train_stream.derive(epoch + 1)
        order = list(range(len(train_ids)))
        epoch_rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            batch_ids = [train_ids[p] for p in chunk]
            if cfg.augment_flips:
                flips = [(epoch_rng.next_float() < 0.5,
                          epoch_rng.next_float() < 0.5) for _ in chunk]
            else:
                flips = [(False, False)] * len(chunk)
            run_step(epoch, batch_ids, flips)

    ema_params = None
    if ema_values is not None:
        ema_params = ParamVector(theta.segments, ema_values)
    result = TrainResult(params=theta, cfg=cfg, log=log, weight_maps=maps,
                         center_state=center_state, ema_params=ema_params,
                         timings=timings)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_log(os.path.join(out_dir, "train_log.jsonl"), log)
        write_log(os.path.join(out_dir, "timing.jsonl"), timings)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), netcfg, theta)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            fh.write(cfg.to_json())
    return result


def write_log(path: str, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSummary:
    miou: float
    dsc: float
    hd: float
    per_image: list[dict]


def predict(theta: ParamVector, cfg: NetConfig, image: np.ndarray,
            dtype=ad.F64) -> np.ndarray:
    with Tape(dtype) as tape:
        tv = tape.const(theta.values.astype(dtype, copy=False))
        _, _, probs = build_forward(cfg, tv, image, theta.segments)
        return pseudo_labels(probs.data[0])


def evaluate(theta: ParamVector, netcfg: NetConfig, dataset: Dataset,
             ids: list[int] | None = None, dtype=ad.F64) -> EvalSummary:
    """Mean mIoU / DSC / Hausdorff against clean masks over the given ids
    (test split by default)."""
    if ids is None:
        ids = dataset.test_ids
    if not ids:
        raise ValueError("evaluation set is empty")
    per_image = []
    for i in ids:
        pred = predict(theta, netcfg, dataset.items[i].image, dtype)
        res = evaluate_pair(pred, dataset.items[i].clean_mask.astype(np.int64),
                            netcfg.classes)
        per_image.append({"id": i, "miou": res.miou, "dsc": res.dsc, "hd": res.hd})
    return EvalSummary(miou=float(np.mean([r["miou"] for r in per_image])),
                       dsc=float(np.mean([r["dsc"] for r in per_image])),
                       hd=float(np.mean([r["hd"] for r in per_image])),
                       per_image=per_image)


# ---------------------------------------------------------------------------
# studies


ABLATION_ROWS = (
    ("full", {}),
    ("no_meta", {"meta": False}),
    ("no_dcd", {"dcd": False}),
    ("no_dice", {"dice": False}),
)


def ablate(cfg: TrainConfig, seeds: tuple[int, ...] = (0, 1, 2)) -> list[dict]:
    """Train the four toggle combinations over the given seeds and report
    mean and standard deviation of the test metrics. Each seed builds its
    own corpus; all rows within a seed share it."""
    per_row: dict[str, dict[str, list[float]]] = {
        name: {"miou": [], "dsc": [], "hd": []} for name, _ in ABLATION_ROWS}
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        ds = prepare_benchmark(seed_cfg)
        for name, overrides in ABLATION_ROWS:
            run_cfg = replace(seed_cfg, **overrides)
            result = train(run_cfg, ds)
            summary = evaluate(result.params, run_cfg.net_config(), ds,
                               dtype=run_cfg.dtype)
            per_row[name]["miou"].append(summary.miou)
            per_row[name]["dsc"].append(summary.dsc)
            per_row[name]["hd"].append(summary.hd)
    rows = []
    for name, _ in ABLATION_ROWS:
        stats = per_row[name]
        row = {"config": name, "seeds": list(seeds)}
        for metric in ("miou", "dsc", "hd"):
            vals = np.asarray(stats[metric])
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_sd"] = float(vals.std(ddof=0))
        rows.append(row)
    return rows


def meta_size_study(cfg: TrainConfig,
                    fracs: tuple[float, ...] = (0.01, 0.02, 0.05, 0.10)) -> list[dict]:
    """Train at several meta-set sizes; report metrics, wall time, the
    tensor-arena peak as the memory proxy, and cost efficiency against the
    first (reference) row, whose own cell is '-'."""
    rows = []
    for frac in sorted(fracs):
        run_cfg = replace(cfg, metaval_frac=frac)
        ds = prepare_benchmark(run_cfg)
        ad.arena_reset_peak()
        t0 = time.perf_counter()
        result = train(run_cfg, ds)
        wall = time.perf_counter() - t0
        peak = ad.arena_peak_bytes()
        summary = evaluate(result.params, run_cfg.net_config(), ds,
                           dtype=run_cfg.dtype)
        rows.append({"frac": frac, "miou": summary.miou, "dsc": summary.dsc,
                     "hd": summary.hd, "wall_s": wall, "peak_bytes": peak,
                     "cost_efficiency": None})
    ref = rows[0]
    for row in rows[1:]:
        delta = (row["miou"] - ref["miou"]) * 100.0
        try:
            row["cost_efficiency"] = cost_efficiency(
                delta, row["wall_s"], ref["wall_s"],
                row["peak_bytes"], ref["peak_bytes"])
        except ZeroDivisionError:
            row["cost_efficiency"] = None
    return rows

import json
import os

import numpy as np
import pytest

from mdcseg.network import load_checkpoint
from mdcseg.train import (TrainConfig, ablate, evaluate, meta_size_study,
                          prepare_benchmark, train)


def tiny_cfg(**overrides):
    base = dict(n_images=16, height=32, width=32, epochs=4, warmup_epochs=2,
                batch_size=4, metaval_frac=0.1, test_frac=0.2, seed=0,
                base_width=4, feature_dim=4)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_run():
    cfg = tiny_cfg()
    ds = prepare_benchmark(cfg)
    return cfg, ds, train(cfg, ds)


def test_config_json_round_trip():
    cfg = tiny_cfg(lambda_bd=0.25, tau_dcd=0.9)
    back = TrainConfig.from_json(cfg.to_json())
    assert back == cfg


def test_config_rejects_unknown_fields():
    with pytest.raises(ValueError, match="unknown config fields"):
        TrainConfig.from_json('{"no_such_field": 1}')


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(precision="f16")


def test_lr_schedule_exact():
    cfg = tiny_cfg(lr=0.005)
    for epoch in (0, 1, 7, 99):
        assert cfg.lr_at(epoch) == 0.005 * 20.0 / (epoch + 20.0)


def test_training_is_deterministic(tmp_path, tiny_run):
    cfg, ds, first = tiny_run
    second = train(cfg, ds, out_dir=tmp_path / "run2")
    assert first.params.values.tobytes() == second.params.values.tobytes()
    assert json.dumps(first.log) == json.dumps(second.log)


def test_log_schema_and_phases(tiny_run):
    cfg, ds, result = tiny_run
    steps_per_epoch = (len(ds.train_ids) + cfg.batch_size - 1) // cfg.batch_size
    assert len(result.log) == cfg.epochs * steps_per_epoch
    for rec in result.log:
        for key in ("epoch", "step", "phase", "base", "boundary", "dice",
                    "total", "val_loss", "mean_gamma", "fallback_centers",
                    "reset_weights", "grad_norm", "lr", "weight_sum_err"):
            assert key in rec
    warm = [r for r in result.log if r["epoch"] < cfg.warmup_epochs]
    assert all(r["phase"] == "warmup" for r in warm)
    assert all(r["boundary"] == 0.0 for r in warm)
    assert all(r["val_loss"] is None for r in warm)
    meta = [r for r in result.log if r["epoch"] >= cfg.warmup_epochs]
    assert all(r["phase"] == "meta" for r in meta)
    assert all(r["val_loss"] is not None for r in meta)


def test_gradient_clipping_invariant(tiny_run):
    cfg, _, result = tiny_run
    for rec in result.log:
        assert rec["grad_norm"] <= cfg.grad_clip + 1e-9


def test_normalization_identity_every_step(tiny_run):
    _, _, result = tiny_run
    for rec in result.log:
        assert rec["weight_sum_err"] <= 1e-6
        assert rec["weight_min_rect"] >= 0.0


def test_lr_in_log_matches_schedule(tiny_run):
    cfg, _, result = tiny_run
    for rec in result.log:
        assert rec["lr"] == cfg.lr_at(rec["epoch"])


def test_warmup_matches_plain_baseline_bitwise():
    # Warm-up ignores the meta and boundary machinery entirely, so any
    # config shares its warm-up trajectory bitwise with the baseline that
    # has those toggles off. The dice term participates in warm-up when
    # enabled, so equivalence is per dice setting.
    for dice in (True, False):
        cfg_full = tiny_cfg(epochs=3, warmup_epochs=2, dice=dice)
        cfg_base = tiny_cfg(epochs=3, warmup_epochs=2, dice=dice,
                            meta=False, dcd=False, lambda_bd=0.0)
        ds = prepare_benchmark(cfg_full)
        full = train(cfg_full, ds)
        base = train(cfg_base, ds)
        n_warm = sum(r["epoch"] < 2 for r in full.log)
        for a, b in zip(full.log[:n_warm], base.log[:n_warm]):
            assert a["total"] == b["total"]
            assert a["grad_norm"] == b["grad_norm"]


def test_toggles_off_reduces_to_plain_ce():
    # With everything off the meta phase IS the warm-up computation: the
    # trajectory equals a run that never leaves warm-up.
    cfg_off = tiny_cfg(epochs=4, warmup_epochs=2, meta=False, dcd=False,
                       dice=False)
    cfg_warm = tiny_cfg(epochs=4, warmup_epochs=3, meta=False, dcd=False,
                        dice=False)
    ds = prepare_benchmark(cfg_off)
    a = train(cfg_off, ds)
    b = train(cfg_warm, ds)
    assert a.params.values.tobytes() == b.params.values.tobytes()
    for ra, rb in zip(a.log, b.log):
        assert ra["total"] == rb["total"]


def test_train_writes_artifacts(tmp_path):
    cfg = tiny_cfg(epochs=3, warmup_epochs=1)
    ds = prepare_benchmark(cfg)
    out = tmp_path / "run"
    result = train(cfg, ds, out_dir=out)
    assert (out / "model.ckpt").exists()
    netcfg, theta = load_checkpoint(out / "model.ckpt")
    np.testing.assert_allclose(theta.values,
                               result.params.values.astype(np.float32))
    with open(out / "train_log.jsonl") as fh:
        lines = fh.read().strip().splitlines()
    assert len(lines) == len(result.log)
    json.loads(lines[-1])
    with open(out / "timing.jsonl") as fh:
        timing = [json.loads(line) for line in fh]
    assert len(timing) == len(result.log)
    assert all("wall_ms" in t for t in timing)
    # wall time lives in the sidecar, not the training log
    assert all("wall_ms" not in r for r in result.log)


def test_non_finite_input_aborts_with_diagnostic_record():
    from mdcseg.train import TrainAbort
    cfg = tiny_cfg(epochs=2, warmup_epochs=1)
    ds = prepare_benchmark(cfg)
    ds.items[ds.train_ids[0]].image[3, 3] = np.nan
    with pytest.raises(TrainAbort):
        train(cfg, ds)


def test_train_requires_noisy_masks():
    cfg = tiny_cfg()
    from mdcseg.data import gen_synthetic, split
    ds = gen_synthetic(cfg.n_images, 32, 32, cfg.seed)
    split(ds, metaval_frac=0.1, test_frac=0.2, seed=cfg.seed)
    with pytest.raises(ValueError, match="noisy"):
        train(cfg, ds)


def test_evaluate_empty_set_faults(tiny_run):
    cfg, ds, result = tiny_run
    with pytest.raises(ValueError, match="empty"):
        evaluate(result.params, cfg.net_config(), ds, ids=[])


def test_evaluate_deterministic(tiny_run):
    cfg, ds, result = tiny_run
    a = evaluate(result.params, cfg.net_config(), ds)
    b = evaluate(result.params, cfg.net_config(), ds)
    assert a.per_image == b.per_image


@pytest.mark.slow
def test_overfit_on_clean_labels_reaches_high_train_dsc():
    # Sanity: with clean training labels and plenty of steps the model can
    # drive the training-set Dice above 0.95.
    cfg = tiny_cfg(n_images=10, epochs=150, warmup_epochs=149, batch_size=1,
                   metaval_frac=0.1, test_frac=0.1, base_width=8,
                   feature_dim=8, dice=True)
    from mdcseg.data import gen_synthetic, split
    ds = gen_synthetic(cfg.n_images, 32, 32, cfg.seed)
    split(ds, metaval_frac=0.1, test_frac=0.1, seed=cfg.seed)
    for i in ds.train_ids:
        ds.items[i].noisy_mask = ds.items[i].clean_mask.copy()
    result = train(cfg, ds)
    summary = evaluate(result.params, cfg.net_config(), ds, ids=ds.train_ids)
    assert summary.dsc > 0.95


def test_separate_tapes_run_on_separate_threads():
    # Tapes are single-use and thread-confined; distinct tapes may run
    # concurrently.
    import threading
    from mdcseg import autodiff as ad
    from mdcseg.autodiff import ParamVector, value_and_grad

    results = {}

    def work(tag, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=50)
        theta = ParamVector([("t", (50,), 0)], x.copy())
        for _ in range(20):
            val, grad = value_and_grad(
                lambda t: ad.asum(ad.mul(ad.relu(t), ad.mul(t, t))), theta)
        results[tag] = (val, grad.values.copy())

    threads = [threading.Thread(target=work, args=(i, 11)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    base = results[0]
    for i in range(1, 4):
        assert results[i][0] == base[0]
        np.testing.assert_array_equal(results[i][1], base[1])


def test_ema_params_tracked():
    cfg = tiny_cfg(epochs=3, warmup_epochs=1, ema=True)
    ds = prepare_benchmark(cfg)
    result = train(cfg, ds)
    assert result.ema_params is not None
    assert not np.array_equal(result.ema_params.values, result.params.values)


def test_ablate_rows_shape():
    cfg = tiny_cfg(epochs=3, warmup_epochs=1)
    rows = ablate(cfg, seeds=(0,))
    assert [r["config"] for r in rows] == ["full", "no_meta", "no_dcd", "no_dice"]
    for row in rows:
        for metric in ("miou", "dsc", "hd"):
            assert f"{metric}_mean" in row and f"{metric}_sd" in row


def test_meta_size_rows():
    cfg = tiny_cfg(n_images=24, epochs=3, warmup_epochs=1)
    rows = meta_size_study(cfg, fracs=(0.05, 0.10))
    assert [r["frac"] for r in rows] == [0.05, 0.10]
    assert rows[0]["cost_efficiency"] is None  # reference row prints "-"
    assert rows[1]["cost_efficiency"] is not None
    assert rows[1]["peak_bytes"] > 0

"""Training loop behavior and the command-line surface.

CLI commands run in-process through ``cli.main`` so exit codes and
stdout/stderr are observable without subprocesses.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from tdae import cli
from tdae.data import SynthSpec, read_tensor, save_dataset, synth_generate, write_tensor
from tdae.engine import Tensor, VJP_RULES, finite_diff_check
from tdae.errors import ConfigurationError, ContractError, NumericError
from tdae.model import ModelConfig
from tdae.train import (
    Adam,
    PlateauStopper,
    SgdMomentum,
    TrainConfig,
    load_model_checkpoint,
    predict_masks,
    segmentation_loss,
    train_run,
)

MODEL_32 = dict(
    input_size=(32, 32), in_channels=1, num_classes=4, embed_dim=8,
    depths=(1, 1, 1), bottleneck_depth=1, heads=(2, 2, 2, 2),
)


def _dataset(count=8, seed=3, size=32):
    spec = SynthSpec(size=(size, size), num_classes=4, seed=seed)
    return synth_generate(spec, count), spec


# --------------------------------------------------------------------------
# loss

def test_loss_matches_manual_cross_entropy_and_dice():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 4, 4, 3))
    masks = rng.integers(0, 3, size=(2, 4, 4))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    onehot = np.eye(3)[masks]
    ce = -(logp * onehot).sum() / masks.size
    got_ce = segmentation_loss(Tensor(logits), masks, 3, lambda_ce=1.0, lambda_dice=0.0)
    np.testing.assert_allclose(got_ce.item(), ce, rtol=1e-12)

    probs = np.exp(logp)
    eps = 1e-5
    inter = (probs * onehot).sum(axis=(0, 1, 2))
    denom = probs.sum(axis=(0, 1, 2)) + onehot.sum(axis=(0, 1, 2))
    soft = ((2 * inter) + eps) / (denom + eps)
    got_dice = segmentation_loss(Tensor(logits), masks, 3, lambda_ce=0.0, lambda_dice=1.0)
    np.testing.assert_allclose(got_dice.item(), 1.0 - soft.mean(), rtol=1e-12)


def test_loss_prefers_correct_prediction():
    rng = np.random.default_rng(1)
    masks = rng.integers(0, 3, size=(1, 8, 8))
    confident = Tensor(20.0 * np.eye(3)[masks])
    uniform = Tensor(np.zeros((1, 8, 8, 3)))
    good = segmentation_loss(confident, masks, 3).item()
    bad = segmentation_loss(uniform, masks, 3).item()
    assert 0.0 <= good < 0.01 < bad


def test_loss_input_validation():
    masks = np.zeros((1, 4, 4), dtype=np.int64)
    with pytest.raises(ContractError):
        segmentation_loss(Tensor(np.zeros((1, 4, 4, 3))), masks, 4)  # k != classes
    with pytest.raises(ContractError):
        segmentation_loss(Tensor(np.zeros((1, 4, 5, 3))), masks, 3)
    with pytest.raises(ContractError):
        segmentation_loss(Tensor(np.zeros((1, 4, 4, 3))), masks + 7, 3)


def test_loss_gradients():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(1, 4, 4, 3)), requires_grad=True)
    masks = rng.integers(0, 3, size=(1, 4, 4))
    err = finite_diff_check(
        lambda lg: segmentation_loss(lg, masks, 3), [logits], sample=96, seed=3
    )
    assert err <= 1e-4


# --------------------------------------------------------------------------
# optimizers

def test_sgd_momentum_matches_reference():
    rng = np.random.default_rng(4)
    w0 = rng.normal(size=(3, 2))
    opt = SgdMomentum(lr=0.1, momentum=0.9, weight_decay=0.5)
    params = {"w": Tensor(w0.copy(), requires_grad=True)}
    ref_w, ref_buf = w0.copy(), None
    for step in range(3):
        g = rng.normal(size=(3, 2))
        new = opt.step(params, {params["w"]: g.copy()})
        raw = g + 0.5 * ref_w
        ref_buf = raw if ref_buf is None else 0.9 * ref_buf + raw
        ref_w = ref_w - 0.1 * ref_buf
        np.testing.assert_allclose(new["w"].data, ref_w, rtol=1e-12)
        params = new


def test_adam_matches_reference():
    rng = np.random.default_rng(5)
    w0 = rng.normal(size=(4,))
    opt = Adam(lr=0.01, weight_decay=0.1)
    params = {"w": Tensor(w0.copy(), requires_grad=True)}
    ref_w = w0.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    for step in range(1, 4):
        g = rng.normal(size=(4,))
        new = opt.step(params, {params["w"]: g.copy()})
        raw = g + 0.1 * ref_w
        m = 0.9 * m + 0.1 * raw
        v = 0.999 * v + 0.001 * raw * raw
        mhat = m / (1 - 0.9**step)
        vhat = v / (1 - 0.999**step)
        ref_w = ref_w - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(new["w"].data, ref_w, rtol=1e-10)
        params = new


# --------------------------------------------------------------------------
# plateau stopping

def test_plateau_stopper_fires_on_eleventh_frozen_epoch():
    stop = PlateauStopper(tol=1e-4, patience=10)
    fired = [stop.update(0.5) for _ in range(11)]
    assert fired == [False] * 10 + [True]


def test_plateau_stopper_resets_on_movement():
    stop = PlateauStopper(tol=1e-4, patience=3)
    assert not stop.update(0.5)
    assert not stop.update(0.5)
    assert not stop.update(0.5)
    assert not stop.update(0.7)  # movement resets the streak
    assert not stop.update(0.7)
    assert not stop.update(0.7)
    assert stop.update(0.7)


def test_plateau_stopper_tolerance_boundary():
    stop = PlateauStopper(tol=1e-4, patience=1)
    stop.update(0.5)
    assert not stop.update(0.5 + 2e-4)  # moved more than tol
    assert stop.update(0.5 + 2e-4 + 5e-5)  # within tol of the last value


def test_train_stops_after_constructed_plateau(monkeypatch):
    """Validation frozen from epoch 0 stops training at exactly epoch 11."""
    monkeypatch.setattr("tdae.train.validation_mean_dice", lambda *a, **k: 0.5)
    samples, _ = _dataset(count=4)
    cfg = ModelConfig(**MODEL_32)
    tc = TrainConfig(max_epochs=50, patience=10, batch_size=4, seed=1)
    _, log = train_run(cfg, tc, samples)
    assert log.stop_reason == "early_stop"
    assert len(log.epochs) == 11
    assert [e.epoch for e in log.epochs] == list(range(11))


# --------------------------------------------------------------------------
# training runs

def test_training_reduces_loss():
    samples, _ = _dataset(count=8)
    cfg = ModelConfig(**MODEL_32)
    tc = TrainConfig(max_epochs=3, batch_size=4, optimizer="adam", lr=3e-3, seed=2)
    _, log = train_run(cfg, tc, samples)
    assert log.stop_reason == "max_epochs"
    assert log.epochs[-1].train_loss < log.epochs[0].train_loss
    assert all(np.isfinite(e.train_loss) for e in log.epochs)


def test_training_is_deterministic(tmp_path):
    """Same (seed, config, data) produces bitwise-identical checkpoints."""
    samples, _ = _dataset(count=4)
    cfg = ModelConfig(**MODEL_32)
    tc = TrainConfig(max_epochs=2, batch_size=4, seed=3)
    a = tmp_path / "a"
    b = tmp_path / "b"
    _, log_a = train_run(cfg, tc, samples, out_dir=a)
    _, log_b = train_run(cfg, tc, samples, out_dir=b)
    keyfields = lambda log: [(e.epoch, e.train_loss, e.val_dice, e.lr) for e in log.epochs]
    assert keyfields(log_a) == keyfields(log_b)
    assert (a / "last.tdck").read_bytes() == (b / "last.tdck").read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    samples, _ = _dataset(count=4)
    val, _ = _dataset(count=2, seed=9)
    cfg = ModelConfig(**MODEL_32)
    tc4 = TrainConfig(max_epochs=4, batch_size=4, seed=4)
    full_dir = tmp_path / "full"
    params_full, log_full = train_run(cfg, tc4, samples, val_set=val, out_dir=full_dir)

    part_dir = tmp_path / "part"
    tc2 = dataclasses.replace(tc4, max_epochs=2)
    train_run(cfg, tc2, samples, val_set=val, out_dir=part_dir)
    resumed_dir = tmp_path / "resumed"
    params_res, log_res = train_run(
        cfg, tc4, samples, val_set=val, out_dir=resumed_dir,
        resume=part_dir / "last.tdck",
    )
    for name in params_full:
        np.testing.assert_array_equal(params_full[name].data, params_res[name].data)
    full_hist = [(e.epoch, e.train_loss, e.val_dice) for e in log_full.epochs]
    res_hist = [(e.epoch, e.train_loss, e.val_dice) for e in log_res.epochs]
    assert full_hist == res_hist
    assert (full_dir / "last.tdck").read_bytes() == (resumed_dir / "last.tdck").read_bytes()


def test_resume_rejects_other_config(tmp_path):
    samples, _ = _dataset(count=4)
    cfg = ModelConfig(**MODEL_32)
    tc = TrainConfig(max_epochs=1, batch_size=4, seed=5)
    train_run(cfg, tc, samples, out_dir=tmp_path)
    other = ModelConfig(**{**MODEL_32, "embed_dim": 16})
    with pytest.raises(ContractError):
        train_run(other, tc, samples, resume=tmp_path / "last.tdck")


def test_nonfinite_loss_aborts_with_batch_seed(monkeypatch):
    samples, _ = _dataset(count=4)
    cfg = ModelConfig(**MODEL_32)
    monkeypatch.setattr(
        "tdae.train.segmentation_loss",
        lambda *a, **k: Tensor(np.array(float("inf"))),
    )
    with pytest.raises(NumericError, match="epoch 0 batch 0"):
        train_run(cfg, TrainConfig(max_epochs=1, batch_size=4, seed=6), samples)


def test_loss_finite_across_seeds():
    """Short runs from many seeds never produce a non-finite loss."""
    samples, _ = _dataset(count=4)
    cfg = ModelConfig(**MODEL_32)
    for seed in range(10):
        tc = TrainConfig(max_epochs=2, batch_size=4, seed=seed)
        _, log = train_run(cfg, tc, samples)  # raises NumericError on any non-finite loss
        assert all(np.isfinite(e.train_loss) for e in log.epochs)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    assert TrainConfig.from_dict({"lr": 0.01}).lr == 0.01


def test_empty_training_set_rejected():
    with pytest.raises(ContractError):
        train_run(ModelConfig(**MODEL_32), TrainConfig(), [])


# --------------------------------------------------------------------------
# CLI surface

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth dataset trained for two epochs through the real CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = cli.main([
        "synth", "--out", str(data), "--count", "8", "--val-count", "4",
        "--size", "32", "--classes", "4", "--seed", "3",
    ])
    assert rc == 0
    config = root / "config.json"
    config.write_text(json.dumps({
        "model": {
            "input_size": [32, 32], "in_channels": 1, "num_classes": 4,
            "embed_dim": 8, "depths": [1, 1, 1], "bottleneck_depth": 1,
            "heads": [2, 2, 2, 2],
        },
        "train": {"max_epochs": 2, "batch_size": 4, "seed": 0},
    }))
    out = root / "run"
    rc = cli.main(["train", "--config", str(config), "--data", str(data), "--out", str(out)])
    assert rc == 0
    return SimpleNamespace(root=root, data=data, config=config, out=out,
                           ckpt=out / "best.tdck")


def test_cli_synth_layout(workspace):
    for split, count in (("train", 8), ("val", 4)):
        manifest = json.loads((workspace.data / split / "manifest.json").read_text())
        assert manifest["count"] == count
        assert manifest["height"] == manifest["width"] == 32
        img = read_tensor(workspace.data / split / "images" / "0000.tdae")
        assert img.shape == (32, 32) and img.dtype == np.float32


def test_cli_train_outputs(workspace):
    assert (workspace.out / "last.tdck").exists()
    assert (workspace.out / "best.tdck").exists()
    runlog = json.loads((workspace.out / "runlog.json").read_text())
    assert runlog["stop_reason"] == "max_epochs"
    assert [e["epoch"] for e in runlog["epochs"]] == [0, 1]
    for e in runlog["epochs"]:
        assert set(e) == {"epoch", "train_loss", "val_dice", "lr", "wall_s"}
        assert np.isfinite(e["train_loss"])


def test_cli_eval(workspace, capsys, tmp_path):
    report_path = tmp_path / "report.json"
    rc = cli.main([
        "eval", "--ckpt", str(workspace.ckpt), "--data", str(workspace.data),
        "--out", str(report_path),
    ])
    out1 = capsys.readouterr().out
    assert rc == 0
    doc = json.loads(out1)
    assert set(doc) == {"per_class", "mean_dice", "mean_hd"}
    assert 0.0 <= doc["mean_dice"] <= 1.0
    assert json.loads(report_path.read_text()) == doc
    rc = cli.main(["eval", "--ckpt", str(workspace.ckpt), "--data", str(workspace.data)])
    assert rc == 0
    assert json.loads(capsys.readouterr().out) == doc  # deterministic re-run


def test_cli_eval_mismatched_dataset(workspace, tmp_path, capsys):
    samples, spec = _dataset(count=2, seed=8, size=64)
    save_dataset(tmp_path / "big", samples, spec)
    rc = cli.main(["eval", "--ckpt", str(workspace.ckpt), "--data", str(tmp_path / "big")])
    captured = capsys.readouterr()
    assert rc == 1
    assert "error:" in captured.err


def test_cli_predict_matches_library_path(workspace, tmp_path, capsys):
    image_path = workspace.data / "train" / "images" / "0000.tdae"
    mask_path = tmp_path / "mask.tdae"
    rc = cli.main([
        "predict", "--ckpt", str(workspace.ckpt), "--image", str(image_path),
        "--out", str(mask_path),
    ])
    assert rc == 0
    info = json.loads(capsys.readouterr().out)
    assert info["shape"] == [32, 32]
    mask = read_tensor(mask_path)
    assert mask.dtype == np.uint8
    assert mask.shape == (32, 32)
    assert mask.max() < 4
    cfg, params, _, _ = load_model_checkpoint(workspace.ckpt)
    want = predict_masks(params, cfg, [read_tensor(image_path)], batch_size=1)[0]
    np.testing.assert_array_equal(mask, want)


def test_cli_predict_rejects_bad_dims(workspace, tmp_path, capsys):
    indivisible = tmp_path / "odd.tdae"
    write_tensor(indivisible, np.zeros((48, 48), dtype=np.float32))
    rc = cli.main(["predict", "--ckpt", str(workspace.ckpt), "--image", str(indivisible),
                   "--out", str(tmp_path / "m.tdae")])
    assert rc == 1
    wrong_size = tmp_path / "big.tdae"
    write_tensor(wrong_size, np.zeros((64, 64), dtype=np.float32))
    rc = cli.main(["predict", "--ckpt", str(workspace.ckpt), "--image", str(wrong_size),
                   "--out", str(tmp_path / "m.tdae")])
    assert rc == 1
    capsys.readouterr()


def test_cli_gradcheck_full_suite(capsys):
    rc = cli.main(["gradcheck", "--seed", "0"])
    report = json.loads(capsys.readouterr().out)
    assert rc == 0
    assert report["pass"] is True
    assert report["tolerance"] == 1e-4
    expected = {
        "layer_norm", "efficient_attention", "reduced_attention", "feed_forward",
        "dual_block", "large_kernel_attention", "fuse_skip", "patch_embed", "patch_merge",
        "patch_expand", "final_project", "model",
    }
    assert set(report["components"]) == expected
    assert all(v <= 1e-4 for v in report["components"].values())


def test_cli_gradcheck_detects_corrupted_rule(monkeypatch, capsys):
    """A broken backward rule must surface as a numeric failure, exit 2."""
    orig = VJP_RULES["matmul"]
    monkeypatch.setitem(
        VJP_RULES, "matmul",
        lambda saved, g: tuple(2.0 * x for x in orig(saved, g)),
    )
    rc = cli.main(["gradcheck", "--components", "efficient_attention"])
    report = json.loads(capsys.readouterr().out)
    assert rc == 2
    assert report["pass"] is False


def test_cli_gradcheck_unknown_component(capsys):
    rc = cli.main(["gradcheck", "--components", "nonexistent_block"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_bench_scaling(tmp_path, capsys):
    csv_path = tmp_path / "bench.csv"
    rc = cli.main(["bench", "--n", "16,32,64,128", "--d", "8", "--R", "1,2,4",
                   "--repeats", "1", "--out", str(csv_path)])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "kernel,n,d,R,flops,wall_ns"
    assert len(lines) == 1 + 4 * (2 + 3)  # per n: standard, efficient, 3 reduced rows
    assert 1.9 <= summary["flops_exponent"]["standard"] <= 2.1
    assert 0.9 <= summary["flops_exponent"]["efficient"] <= 1.1
    assert abs(summary["reduced_quadratic_ratio_vs_r1"]["2"] - 0.5) <= 0.075
    assert abs(summary["reduced_quadratic_ratio_vs_r1"]["4"] - 0.25) <= 0.0375


def test_cli_bench_rejects_tiny_n(capsys):
    rc = cli.main(["bench", "--n", "1,8", "--d", "8", "--R", "1", "--repeats", "1"])
    assert rc == 1
    capsys.readouterr()


def test_cli_seed_env_override(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TDAE_SEED", "123")
    rc = cli.main(["synth", "--out", str(tmp_path / "ds"), "--count", "1",
                   "--size", "32", "--seed", "0"])
    out = json.loads(capsys.readouterr().out)
    assert rc == 0
    assert out["seed"] == 123


def test_cli_seed_env_invalid(monkeypatch, capsys):
    monkeypatch.setenv("TDAE_SEED", "not-a-number")
    rc = cli.main(["gradcheck", "--components", "layer_norm"])
    assert rc == 1
    assert "TDAE_SEED" in capsys.readouterr().err


def test_cli_bad_arguments_exit_one(capsys):
    assert cli.main(["train"]) == 1  # missing required flags
    assert cli.main(["no-such-command"]) == 1
    capsys.readouterr()


def test_cli_config_validation(tmp_path, capsys):
    data = tmp_path / "d"
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"model": dict(MODEL_32, input_size=[32, 32],
                                                  depths=[1, 1, 1], heads=[2, 2, 2, 2]),
                                    "extra": {}}))
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data),
                     "--out", str(tmp_path / "o")]) == 1
    cfg_path.write_text(json.dumps({"train": {}}))
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data),
                     "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "missing.json"),
                     "--data", str(data), "--out", str(tmp_path / "o")]) == 1
    capsys.readouterr()

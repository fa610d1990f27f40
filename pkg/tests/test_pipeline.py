import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from panfuse.checkpoint import load_checkpoint, save_checkpoint, state_hash
from panfuse.config import config_hash, resolve_config
from panfuse.errors import (
    ConfigError,
    DependencyError,
    GeometryError,
    LockError,
    TrainingDivergenceError,
    ValidationError,
)
from panfuse.metrics import psnr
from panfuse.pipeline import (
    MODEL_NAME,
    STAGE1_NAME,
    STAGE2_NAME,
    evaluate_model,
    fuse_images,
    make_toy_data,
    model_from_checkpoint,
    read_events,
    run_ablate_stages,
    run_evaluate,
    run_fuse,
    run_lock,
    run_pretrain_spatial,
    run_pretrain_spectral,
    run_train,
)
from panfuse.raster import MSImage, bicubic_upsample, load_raster, save_raster
from panfuse.unfolding import UnfoldingModel
from panfuse.wald import load_dataset

TINY = {
    "profile": "desk",
    "seed": "5",
    "ratio": "4",
    "bands": "4",
    "stages": "1",
    "width": "8",
    "lr": "1e-3",
    "batch_size": "4",
    "epochs": "4",
    "max_steps": "8",
    "pretrain_steps": "6",
    "pretrain_lr": "1e-3",
    "token_patch_side": "16",
    "token_embed_dim": "32",
    "token_enc_layers": "1",
    "token_dec_layers": "1",
    "token_heads": "2",
    "toy_train_scenes": "6",
    "toy_val_scenes": "3",
    "toy_size": "32",
}


def _tiny_cfg(data_dir, **extra):
    raw = dict(TINY, data_dir=str(data_dir))
    raw.update({k: str(v) for k, v in extra.items()})
    return resolve_config(raw)


@pytest.fixture(scope="module")
def toy_cfg(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("toydata")
    cfg = _tiny_cfg(data_dir)
    make_toy_data(cfg)
    return cfg


@pytest.fixture(scope="module")
def pretrained(toy_cfg, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("prerun")
    stage1 = run_pretrain_spatial(toy_cfg, run_dir)
    stage2 = run_pretrain_spectral(toy_cfg, run_dir)
    return run_dir, stage1, stage2


# ---------------------------------------------------------------------------
# toy data
# ---------------------------------------------------------------------------


def test_make_toy_data_layout_and_counts(toy_cfg):
    root = Path(toy_cfg.data_dir)
    train, train_manifest = load_dataset(root / "train")
    val, val_manifest = load_dataset(root / "val")
    assert len(train) == 6 and len(val) == 3
    assert train_manifest["config_hash"] == config_hash(toy_cfg)
    assert val_manifest["split"] == "val"
    pair = train[0]
    assert pair.gt.data.shape == (32, 32, 4)
    assert pair.lrms.data.shape == (8, 8, 4)
    assert pair.pan.data.shape == (32, 32, 1)


def test_make_toy_data_deterministic(tmp_path):
    cfg_a = _tiny_cfg(tmp_path / "a")
    cfg_b = _tiny_cfg(tmp_path / "b")
    make_toy_data(cfg_a)
    make_toy_data(cfg_b)
    a = (tmp_path / "a" / "train" / "pairs" / "00000" / "gt.bin").read_bytes()
    b = (tmp_path / "b" / "train" / "pairs" / "00000" / "gt.bin").read_bytes()
    assert a == b
    # train and val scenes are disjoint
    t = (tmp_path / "a" / "train" / "pairs" / "00000" / "gt.bin").read_bytes()
    v = (tmp_path / "a" / "val" / "pairs" / "00000" / "gt.bin").read_bytes()
    assert t != v


# ---------------------------------------------------------------------------
# pretraining commands
# ---------------------------------------------------------------------------


def test_pretrain_spatial_artifacts(toy_cfg, pretrained):
    run_dir, stage1, _ = pretrained
    payload = load_checkpoint(stage1, kind="conv_mae",
                              expect_config_hash=config_hash(toy_cfg))
    assert payload["channels"] == 4 and payload["width"] == 8
    events = [e for e in read_events(run_dir) if e["phase"] == "pretrain_spatial"]
    assert [e["step"] for e in events] == list(range(6))
    assert all(np.isfinite(e["loss"]) for e in events)
    assert not (run_dir / "lock").exists()


def test_pretrain_spectral_artifacts(toy_cfg, pretrained):
    run_dir, _, stage2 = pretrained
    payload = load_checkpoint(stage2, kind="token_mae",
                              expect_config_hash=config_hash(toy_cfg))
    assert payload["height"] == 32 and payload["patch_side"] == 16
    events = [e for e in read_events(run_dir) if e["phase"] == "pretrain_spectral"]
    assert [e["step"] for e in events] == list(range(6))


def test_pretrain_determinism(toy_cfg, tmp_path):
    h = []
    for sub in ("r1", "r2"):
        path = run_pretrain_spatial(toy_cfg, tmp_path / sub)
        h.append(state_hash(load_checkpoint(path)["state"]))
    assert h[0] == h[1]


def test_pretrain_loss_decreases(toy_cfg, tmp_path):
    cfg = replace(toy_cfg, pretrain_steps=60, pretrain_lr=2e-3)
    run_dir = tmp_path / "longer"
    run_pretrain_spatial(cfg, run_dir)
    losses = [e["loss"] for e in read_events(run_dir) if e["phase"] == "pretrain_spatial"]
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_pretrain_spectral_patch_mismatch(toy_cfg, tmp_path):
    cfg = replace(toy_cfg, token_patch_side=12)  # 32 % 12 != 0
    with pytest.raises(GeometryError):
        run_pretrain_spectral(cfg, tmp_path / "bad")


def test_missing_dataset_error(tmp_path):
    cfg = _tiny_cfg(tmp_path / "nowhere")
    with pytest.raises(DependencyError):
        run_pretrain_spatial(cfg, tmp_path / "run")


def test_run_lock_exclusive(tmp_path):
    run_dir = tmp_path / "locked"
    with run_lock(run_dir):
        assert (run_dir / "lock").exists()
        with pytest.raises(LockError):
            with run_lock(run_dir):
                pass
    assert not (run_dir / "lock").exists()


# ---------------------------------------------------------------------------
# training command
# ---------------------------------------------------------------------------


def test_train_requires_pretrained_checkpoints(toy_cfg, tmp_path):
    with pytest.raises(DependencyError):
        run_train(toy_cfg, tmp_path / "r")


def test_train_without_priors(toy_cfg, tmp_path):
    cfg = replace(toy_cfg, disable_u_mae=True, disable_l_mae=True)
    ckpt = run_train(cfg, tmp_path / "noprior")
    payload = load_checkpoint(ckpt, kind="unfolding")
    assert payload["provenance"] == {}
    events = [e for e in read_events(tmp_path / "noprior") if e["phase"] == "train"]
    assert len(events) == 8  # max_steps cap
    assert events[0]["epoch"] == 1 and all("lr" in e for e in events)


def test_train_with_priors_and_provenance(toy_cfg, pretrained, tmp_path):
    run_dir, stage1, stage2 = pretrained
    ckpt = run_train(toy_cfg, tmp_path / "full", stage1=stage1, stage2=stage2)
    payload = load_checkpoint(ckpt, kind="unfolding",
                              expect_config_hash=config_hash(toy_cfg))
    assert payload["provenance"]["u_mae"] == state_hash(
        load_checkpoint(stage1)["state"]
    )
    assert payload["provenance"]["l_mae"] == state_hash(
        load_checkpoint(stage2)["state"]
    )
    assert "optimizer_state" in payload
    model = model_from_checkpoint(ckpt)
    assert model.stages == 1 and not model.training


def test_train_rejects_foreign_checkpoint(toy_cfg, pretrained, tmp_path):
    run_dir, stage1, stage2 = pretrained
    other = replace(toy_cfg, seed=6)
    with pytest.raises(ConfigError):
        run_train(other, tmp_path / "mix", stage1=stage1, stage2=stage2)
    ckpt = run_train(other, tmp_path / "mix-ok", stage1=stage1, stage2=stage2,
                     allow_mismatch=True)
    assert Path(ckpt).exists()


def test_train_determinism(toy_cfg, pretrained, tmp_path):
    _, stage1, stage2 = pretrained
    hashes = []
    for sub in ("d1", "d2"):
        ckpt = run_train(toy_cfg, tmp_path / sub, stage1=stage1, stage2=stage2)
        hashes.append(state_hash(load_checkpoint(ckpt)["state"]))
    assert hashes[0] == hashes[1]


def test_train_divergence_dumps_diagnostics(toy_cfg, tmp_path, monkeypatch):
    import panfuse.pipeline as pl

    def explode(*args, **kwargs):
        raise TrainingDivergenceError("boom", diagnostics={"step": 3, "loss": float("nan")})

    monkeypatch.setattr(pl, "train_step", explode)
    cfg = replace(toy_cfg, disable_u_mae=True, disable_l_mae=True)
    run_dir = tmp_path / "diverged"
    with pytest.raises(TrainingDivergenceError):
        run_train(cfg, run_dir)
    dump = json.loads((run_dir / "divergence.json").read_text())
    assert dump["step"] == 3
    assert not (run_dir / "lock").exists()  # lock released on failure


# ---------------------------------------------------------------------------
# fusion command
# ---------------------------------------------------------------------------


def _write_pair(tmp_path, pair):
    save_raster(pair.lrms, tmp_path / "lrms")
    save_raster(pair.pan, tmp_path / "pan")
    return tmp_path / "lrms", tmp_path / "pan"


def test_fuse_baseline_identity_case(toy_cfg, tmp_path):
    pairs, _ = load_dataset(Path(toy_cfg.data_dir) / "val")
    pair = pairs[0]
    ms_up = bicubic_upsample(pair.lrms, pair.ratio)
    from panfuse.raster import PanImage

    pan_identity = PanImage(ms_up.data.mean(axis=2, keepdims=True))
    fused, meta = fuse_images("ihs", pair.lrms, pan_identity)
    assert np.max(np.abs(fused.data - ms_up.data)) <= 1e-6
    assert meta["method"] == "ihs" and meta["ratio"] == 4


def test_run_fuse_unfolding_k0_equals_bicubic(toy_cfg, tmp_path):
    pairs, _ = load_dataset(Path(toy_cfg.data_dir) / "val")
    lrms_path, pan_path = _write_pair(tmp_path, pairs[0])
    torch.manual_seed(0)
    model = UnfoldingModel(channels=4, ratio=4, stages=0, width=8)
    ckpt = tmp_path / "k0.pt"
    save_checkpoint(
        ckpt, "unfolding", model.state_dict(), "e" * 64,
        extra={"channels": 4, "ratio": 4, "stages": 0, "width": 8,
               "share_stage_weights": False, "share_degradation_ops": True},
    )
    out = run_fuse("unfolding", lrms_path, pan_path, tmp_path / "fused", checkpoint=ckpt)
    fused = load_raster(out)
    want = bicubic_upsample(pairs[0].lrms, 4)
    assert fused.data.shape == (32, 32, 4)
    assert np.array_equal(fused.data, want.data)
    meta = json.loads((tmp_path / "fused.meta.json").read_text())
    assert meta["method"] == "unfolding" and meta["config_hash"] == "e" * 64


def test_run_fuse_all_baselines_write_output(toy_cfg, tmp_path):
    pairs, _ = load_dataset(Path(toy_cfg.data_dir) / "val")
    lrms_path, pan_path = _write_pair(tmp_path, pairs[0])
    for method in ("bicubic", "ihs", "brovey", "gs", "sfim", "gfpca"):
        out = run_fuse(method, lrms_path, pan_path, tmp_path / f"f_{method}")
        img = load_raster(out)
        assert img.data.shape == (32, 32, 4)


def test_fuse_error_paths(toy_cfg, tmp_path):
    pairs, _ = load_dataset(Path(toy_cfg.data_dir) / "val")
    pair = pairs[0]
    with pytest.raises(ValidationError):
        fuse_images("sharpen-o-matic", pair.lrms, pair.pan)
    with pytest.raises(ValidationError):
        fuse_images("unfolding", pair.lrms, pair.pan)  # no checkpoint
    from panfuse.raster import PanImage

    bad_pan = PanImage(np.zeros((33, 32, 1), dtype=np.float32))
    with pytest.raises(GeometryError):
        fuse_images("bicubic", pair.lrms, bad_pan)


# ---------------------------------------------------------------------------
# evaluation command
# ---------------------------------------------------------------------------


@pytest.fixture()
def fused_copy_of_gt(toy_cfg, tmp_path):
    dataset = Path(toy_cfg.data_dir) / "val"
    pairs, manifest = load_dataset(dataset)
    fused_dir = tmp_path / "fused"
    fused_dir.mkdir()
    for pid, pair in zip(manifest["pairs"], pairs):
        save_raster(pair.gt, fused_dir / pid)
    return dataset, fused_dir


def test_evaluate_identity_reduced(toy_cfg, fused_copy_of_gt, tmp_path):
    dataset, fused_dir = fused_copy_of_gt
    payload = run_evaluate(fused_dir, dataset, "reduced",
                           tmp_path / "r.json", tmp_path / "r.csv")
    assert payload["config_hash"] == config_hash(toy_cfg)
    assert len(payload["rows"]) == 3
    for row in payload["rows"]:
        assert row["psnr"] == 100.0
        assert row["ssim"] == 1.0
        assert row["sam"] == 0.0
        assert row["ergas"] == 0.0
        assert abs(row["qnr"] - (1 - row["d_lambda"]) * (1 - row["d_s"])) <= 1e-9
    csv_lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 1 + 3 + 1  # header + rows + aggregate
    assert csv_lines[0].startswith("id,psnr,ssim,sam,ergas,d_lambda,d_s,qnr")
    assert csv_lines[-1].startswith("aggregate,")
    saved = json.loads((tmp_path / "r.json").read_text())
    assert saved["aggregate"]["psnr"] == 100.0


def test_evaluate_full_mode_columns(fused_copy_of_gt, tmp_path):
    dataset, fused_dir = fused_copy_of_gt
    payload = run_evaluate(fused_dir, dataset, "full",
                           tmp_path / "f.json", tmp_path / "f.csv")
    for row in payload["rows"]:
        assert set(row) == {"id", "d_lambda", "d_s", "qnr"}
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header == "id,d_lambda,d_s,qnr"


def test_evaluate_unmatched_ids(fused_copy_of_gt, tmp_path):
    dataset, fused_dir = fused_copy_of_gt
    (fused_dir / "00001.json").unlink()
    (fused_dir / "00001.bin").unlink()
    save_raster(load_raster(fused_dir / "00000"), fused_dir / "99999")
    with pytest.raises(ValidationError) as err:
        run_evaluate(fused_dir, dataset, "reduced", tmp_path / "x.json", tmp_path / "x.csv")
    assert "00001" in str(err.value) and "99999" in str(err.value)


def test_evaluate_mode_validation(fused_copy_of_gt, tmp_path):
    dataset, fused_dir = fused_copy_of_gt
    with pytest.raises(ValidationError):
        run_evaluate(fused_dir, dataset, "medium", tmp_path / "x.json", tmp_path / "x.csv")


def test_evaluate_model_helper(toy_cfg):
    pairs, _ = load_dataset(Path(toy_cfg.data_dir) / "val")
    model = UnfoldingModel(channels=4, ratio=4, stages=0, width=8)
    aggregate = evaluate_model(model, pairs)
    want = float(np.mean([
        psnr(bicubic_upsample(p.lrms, p.ratio), p.gt) for p in pairs
    ]))
    assert abs(aggregate["psnr"] - want) < 1e-9
    with pytest.raises(ValidationError):
        evaluate_model(model, [])


# ---------------------------------------------------------------------------
# stage ablation command
# ---------------------------------------------------------------------------


def test_ablate_stages(toy_cfg, tmp_path):
    cfg = replace(toy_cfg, max_steps=4, pretrain_steps=2)
    run_dir = tmp_path / "ablate"
    rows = run_ablate_stages(cfg, run_dir, [0, 1])
    assert [row["stages"] for row in rows] == [0, 1]
    assert all(np.isfinite(row["psnr"]) for row in rows)
    csv_lines = (run_dir / "ablation.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "stages,psnr,ssim,sam,ergas"
    assert len(csv_lines) == 3
    rows2 = run_ablate_stages(cfg, tmp_path / "ablate2", [0, 1])
    assert rows == rows2  # same seeds, same table
    with pytest.raises(ValidationError):
        run_ablate_stages(cfg, tmp_path / "ablate3", [])

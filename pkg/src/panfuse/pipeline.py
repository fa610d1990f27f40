"""Run orchestration: pretraining, fusion training, inference, evaluation.

Every command takes a resolved RunConfig and a run directory, appends
line-delimited JSON events as it goes, and stamps the config hash into each
artifact it writes. A lockfile serializes training commands per run
directory. Determinism contract: identical (config, seed, data manifest)
reproduce every artifact bit-exactly on one machine.
"""

from __future__ import annotations

import contextlib
import csv
import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .baselines import FUSE_BASELINES, FusionInput
from .checkpoint import load_checkpoint, save_checkpoint, state_hash
from .config import RunConfig, config_hash
from .errors import (
    DependencyError,
    GeometryError,
    LockError,
    TrainingDivergenceError,
    ValidationError,
)
from .mae import ConvMAE, TokenMAE, conv_mae_pretrain_step, token_mae_pretrain_step
from .metrics import build_report, d_lambda, d_s, ergas, psnr, qnr, sam, ssim
from .raster import (
    MSImage,
    PanImage,
    bicubic_upsample,
    from_tensor,
    load_raster,
    save_raster,
    to_tensor,
)
from .unfolding import UnfoldingModel, make_train_state, train_step
from .wald import (
    DegradationConfig,
    SamplePair,
    blur_decimate,
    gaussian_kernel,
    load_dataset,
    save_dataset,
    synth_toy_scene,
)

STAGE1_NAME = "stage1_cmae.pt"
STAGE2_NAME = "stage2_tmae.pt"
MODEL_NAME = "model.pt"
EVENTS_NAME = "events.jsonl"

REDUCED_KEYS = ("psnr", "ssim", "sam", "ergas")
NOREF_KEYS = ("d_lambda", "d_s", "qnr")


# ---------------------------------------------------------------------------
# run-directory plumbing
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """One training process per run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"{run_dir} is locked by another run (stale? remove {lock})"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def log_event(run_dir: Path, **fields) -> None:
    fields.setdefault("ts", time.time())
    with open(run_dir / EVENTS_NAME, "a") as handle:
        handle.write(json.dumps(fields, sort_keys=True) + "\n")


def read_events(run_dir: Path) -> list[dict]:
    path = Path(run_dir) / EVENTS_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _load_split(cfg: RunConfig, split: str) -> tuple[list[SamplePair], dict]:
    root = Path(cfg.data_dir) / split
    if not (root / "manifest.json").exists():
        raise DependencyError(f"no dataset at {root}; run make-toy-data or point data_dir at one")
    return load_dataset(root)


def _pair_batches(pairs: list[SamplePair], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(pairs))
    for i in range(0, len(order), batch_size):
        yield [pairs[int(j)] for j in order[i : i + batch_size]]


# ---------------------------------------------------------------------------
# toy data
# ---------------------------------------------------------------------------


def _toy_pair(ms: MSImage, pan: PanImage, dcfg: DegradationConfig) -> SamplePair:
    """Toy scenes are already full-resolution (MS, PAN) pairs on one grid:
    only the MS side is degraded, the scene itself is the target."""
    kernel = gaussian_kernel(dcfg.kernel_size, dcfg.blur_sigma)
    low = blur_decimate(ms.data, kernel, dcfg.ratio)
    if dcfg.noise_std > 0:
        low = low + np.random.default_rng(dcfg.seed).normal(0.0, dcfg.noise_std, size=low.shape)
    low = np.clip(low, 0.0, 1.0).astype(np.float32)
    return SamplePair(lrms=MSImage(low), pan=pan, gt=ms, ratio=dcfg.ratio)


def make_toy_data(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Build train/ and val/ toy datasets under cfg.data_dir (or out_dir)."""
    root = Path(out_dir) if out_dir is not None else Path(cfg.data_dir)
    chash = config_hash(cfg)
    summary = {"config_hash": chash}
    for split, count, offset in (
        ("train", cfg.toy_train_scenes, 0),
        ("val", cfg.toy_val_scenes, 500_000),  # disjoint seed range
    ):
        pairs = []
        for i in range(count):
            scene_seed = cfg.seed * 1_000_003 + offset + i
            ms, pan = synth_toy_scene(scene_seed, size=cfg.toy_size, bands=cfg.bands)
            dcfg = DegradationConfig(
                ratio=cfg.ratio, noise_std=cfg.noise_std, seed=scene_seed + 1
            )
            pairs.append(_toy_pair(ms, pan, dcfg))
        save_dataset(pairs, root / split, meta={"config_hash": chash, "split": split})
        summary[split] = str(root / split)
    return summary


# ---------------------------------------------------------------------------
# stage 1 / stage 2 pretraining
# ---------------------------------------------------------------------------


def run_pretrain_spatial(cfg: RunConfig, run_dir: str | Path) -> Path:
    """Masked-reconstruction pretraining of the conv encoder on GT patches."""
    run_dir = Path(run_dir)
    chash = config_hash(cfg)
    pairs, _ = _load_split(cfg, "train")
    torch.manual_seed(cfg.seed)
    model = ConvMAE(cfg.bands, cfg.width)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.pretrain_lr)
    with run_lock(run_dir):
        rng = np.random.default_rng(cfg.seed + 101)
        step = 0
        while step < cfg.pretrain_steps:
            for batch in _pair_batches(pairs, cfg.batch_size, rng):
                if step >= cfg.pretrain_steps:
                    break
                x = torch.cat([to_tensor(p.gt) for p in batch])
                loss = conv_mae_pretrain_step(
                    model, x, optimizer, cfg.mask_cell, cfg.mask_ratio_spatial,
                    seed=cfg.seed * 131 + step,
                )
                log_event(run_dir, phase="pretrain_spatial", step=step, loss=loss,
                          lr=cfg.pretrain_lr)
                step += 1
        path = run_dir / STAGE1_NAME
        save_checkpoint(
            path, "conv_mae", model.state_dict(), chash,
            extra={"channels": cfg.bands, "width": cfg.width},
        )
    return path


def run_pretrain_spectral(cfg: RunConfig, run_dir: str | Path) -> Path:
    """Masked-token pretraining of the spatial-spectral transformer on GT."""
    run_dir = Path(run_dir)
    chash = config_hash(cfg)
    pairs, _ = _load_split(cfg, "train")
    gt0 = pairs[0].gt
    torch.manual_seed(cfg.seed + 1)
    model = TokenMAE(
        height=gt0.height, width=gt0.width, channels=cfg.bands,
        patch_side=cfg.token_patch_side, band_group=cfg.token_band_group,
        embed_dim=cfg.token_embed_dim, enc_layers=cfg.token_enc_layers,
        dec_layers=cfg.token_dec_layers, heads=cfg.token_heads,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.pretrain_lr)
    with run_lock(run_dir):
        rng = np.random.default_rng(cfg.seed + 202)
        step = 0
        while step < cfg.pretrain_steps:
            for batch in _pair_batches(pairs, cfg.batch_size, rng):
                if step >= cfg.pretrain_steps:
                    break
                x = torch.cat([to_tensor(p.gt) for p in batch])
                loss = token_mae_pretrain_step(
                    model, x, optimizer, cfg.mask_ratio_spectral,
                    seed=cfg.seed * 151 + step,
                )
                log_event(run_dir, phase="pretrain_spectral", step=step, loss=loss,
                          lr=cfg.pretrain_lr)
                step += 1
        path = run_dir / STAGE2_NAME
        save_checkpoint(
            path, "token_mae", model.state_dict(), chash,
            extra={
                "height": gt0.height, "width": gt0.width, "channels": cfg.bands,
                "patch_side": cfg.token_patch_side, "band_group": cfg.token_band_group,
                "embed_dim": cfg.token_embed_dim, "enc_layers": cfg.token_enc_layers,
                "dec_layers": cfg.token_dec_layers, "heads": cfg.token_heads,
            },
        )
    return path


def _load_stage1_encoder(path: Path, cfg: RunConfig, chash: str, allow_mismatch: bool):
    if not path.exists():
        raise DependencyError(
            f"missing spatial-prior checkpoint {path}; run pretrain-spatial "
            "or set disable_u_mae"
        )
    payload = load_checkpoint(path, kind="conv_mae", expect_config_hash=chash,
                              allow_mismatch=allow_mismatch)
    encoder = ConvMAE(payload["channels"], payload["width"])
    encoder.load_state_dict(payload["state"])
    return encoder, state_hash(payload["state"])


def _load_stage2_encoder(path: Path, chash: str, allow_mismatch: bool):
    if not path.exists():
        raise DependencyError(
            f"missing loss-prior checkpoint {path}; run pretrain-spectral "
            "or set disable_l_mae"
        )
    payload = load_checkpoint(path, kind="token_mae", expect_config_hash=chash,
                              allow_mismatch=allow_mismatch)
    e_mae = TokenMAE(
        height=payload["height"], width=payload["width"], channels=payload["channels"],
        patch_side=payload["patch_side"], band_group=payload["band_group"],
        embed_dim=payload["embed_dim"], enc_layers=payload["enc_layers"],
        dec_layers=payload["dec_layers"], heads=payload["heads"],
    )
    e_mae.load_state_dict(payload["state"])
    for p in e_mae.parameters():  # loss-side features stay fixed
        p.requires_grad_(False)
    return e_mae, state_hash(payload["state"])


def run_train(
    cfg: RunConfig,
    run_dir: str | Path,
    stage1: str | Path | None = None,
    stage2: str | Path | None = None,
    allow_mismatch: bool = False,
) -> Path:
    """Stages 3-4: fit the unfolding model with the pretrained priors."""
    run_dir = Path(run_dir)
    chash = config_hash(cfg)
    train_pairs, _ = _load_split(cfg, "train")

    provenance: dict[str, str] = {}
    encoder = None
    if not cfg.disable_u_mae:
        encoder, h1 = _load_stage1_encoder(
            Path(stage1 or run_dir / STAGE1_NAME), cfg, chash, allow_mismatch
        )
        provenance["u_mae"] = h1
    e_mae = None
    if not cfg.disable_l_mae:
        e_mae, h2 = _load_stage2_encoder(
            Path(stage2 or run_dir / STAGE2_NAME), chash, allow_mismatch
        )
        provenance["l_mae"] = h2

    torch.manual_seed(cfg.seed + 2)
    model = UnfoldingModel(
        channels=cfg.bands, ratio=cfg.ratio, stages=cfg.stages, width=cfg.width,
        encoder=encoder, share_stage_weights=cfg.share_stage_weights,
        share_degradation_ops=cfg.share_degradation_ops,
        freeze_encoder=cfg.freeze_encoder,
    )
    state = make_train_state(
        model, lr=cfg.lr, decay_epoch=cfg.decay_epoch,
        encoder_lr_scale=cfg.encoder_lr_scale,
    )
    with run_lock(run_dir):
        step = 0
        capped = False
        for epoch in range(1, cfg.epochs + 1):
            state.epoch = epoch
            rng = np.random.default_rng(cfg.seed * 7919 + epoch)
            for batch in _pair_batches(train_pairs, cfg.batch_size, rng):
                if cfg.max_steps and step >= cfg.max_steps:
                    capped = True
                    break
                try:
                    loss, state = train_step(
                        model, batch, state, e_mae=e_mae, lambda_ss=cfg.lambda_ss
                    )
                except TrainingDivergenceError as exc:
                    (run_dir / "divergence.json").write_text(
                        json.dumps(exc.diagnostics, indent=2, sort_keys=True)
                    )
                    log_event(run_dir, phase="train", event="divergence",
                              **exc.diagnostics)
                    raise
                log_event(run_dir, phase="train", epoch=epoch, step=step, loss=loss,
                          lr=state.optimizer.param_groups[0]["lr"])
                step += 1
            if capped:
                break
        path = run_dir / MODEL_NAME
        save_checkpoint(
            path, "unfolding", model.state_dict(), chash, epoch=state.epoch,
            provenance=provenance,
            extra={
                "channels": cfg.bands, "ratio": cfg.ratio, "stages": cfg.stages,
                "width": cfg.width, "share_stage_weights": cfg.share_stage_weights,
                "share_degradation_ops": cfg.share_degradation_ops,
                "optimizer_state": state.optimizer.state_dict(),
            },
        )
    return path


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _unfolding_from_payload(payload: dict) -> UnfoldingModel:
    model = UnfoldingModel(
        channels=payload["channels"], ratio=payload["ratio"],
        stages=payload["stages"], width=payload["width"],
        share_stage_weights=payload["share_stage_weights"],
        share_degradation_ops=payload["share_degradation_ops"],
    )
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def model_from_checkpoint(path: str | Path, expect_config_hash: str | None = None,
                          allow_mismatch: bool = False) -> UnfoldingModel:
    return _unfolding_from_payload(
        load_checkpoint(path, kind="unfolding", expect_config_hash=expect_config_hash,
                        allow_mismatch=allow_mismatch)
    )


def _infer_ratio(lrms: MSImage, pan: PanImage) -> int:
    if pan.height % lrms.height or pan.width % lrms.width:
        raise GeometryError(
            f"PAN {pan.height}x{pan.width} is not an integer multiple of "
            f"MS {lrms.height}x{lrms.width}"
        )
    r_h, r_w = pan.height // lrms.height, pan.width // lrms.width
    if r_h != r_w or r_h < 2:
        raise GeometryError(f"inconsistent resolution ratio {r_h}x vs {r_w}x")
    return r_h


def fuse_images(method: str, lrms: MSImage, pan: PanImage,
                checkpoint: str | Path | None = None) -> tuple[MSImage, dict]:
    """Fuse one (lrms, pan) pair; returns the image and a provenance record."""
    ratio = _infer_ratio(lrms, pan)
    meta: dict = {"method": method, "ratio": ratio}
    if method == "bicubic":
        fused = bicubic_upsample(lrms, ratio)
    elif method in FUSE_BASELINES:
        inp = FusionInput(ms_up=bicubic_upsample(lrms, ratio), pan=pan)
        if method == "sfim":
            fused = FUSE_BASELINES[method](inp, ratio=ratio)
        else:
            fused = FUSE_BASELINES[method](inp)
    elif method == "unfolding":
        if checkpoint is None:
            raise ValidationError("method 'unfolding' needs a checkpoint path")
        payload = load_checkpoint(checkpoint, kind="unfolding")
        model = _unfolding_from_payload(payload)
        if model.ratio != ratio:
            raise GeometryError(
                f"checkpoint was trained at ratio {model.ratio}, inputs are {ratio}x"
            )
        with torch.no_grad():
            out = model(to_tensor(lrms), to_tensor(pan))
        fused = MSImage(from_tensor(out), band_names=lrms.band_names)
        meta["checkpoint_hash"] = state_hash(payload["state"])
        meta["config_hash"] = payload["config_hash"]
    else:
        known = ["bicubic", "unfolding", *sorted(FUSE_BASELINES)]
        raise ValidationError(f"unknown method {method!r}; choose from {known}")
    return fused, meta


def run_fuse(method: str, lrms_path: str | Path, pan_path: str | Path,
             out_path: str | Path, checkpoint: str | Path | None = None) -> Path:
    lrms = load_raster(lrms_path)
    pan = load_raster(pan_path)
    if not isinstance(lrms, MSImage):
        raise GeometryError(f"{lrms_path} is not multi-band")
    if not isinstance(pan, PanImage):
        raise GeometryError(f"{pan_path} is not single-band")
    fused, meta = fuse_images(method, lrms, pan, checkpoint)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_raster(fused, out_path)
    Path(f"{out_path}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out_path


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _metric_row(mode: str, pid: str, fused: MSImage, pair: SamplePair) -> dict:
    row: dict = {"id": pid}
    if mode == "reduced":
        row["psnr"] = psnr(fused, pair.gt)
        row["ssim"] = ssim(fused, pair.gt)
        row["sam"] = sam(fused, pair.gt)
        row["ergas"] = ergas(fused, pair.gt, pair.ratio)
    dl = d_lambda(fused, pair.lrms)
    ds = d_s(fused, pair.lrms, pair.pan)
    row["d_lambda"] = dl
    row["d_s"] = ds
    row["qnr"] = qnr(dl, ds)
    return row


def run_evaluate(fused_dir: str | Path, dataset_dir: str | Path, mode: str,
                 out_json: str | Path, out_csv: str | Path) -> dict:
    """Score every fused raster against its dataset pair; write JSON + CSV.

    reduced mode emits all seven metrics (the reference set plus the
    no-reference set); full mode emits the no-reference trio only."""
    if mode not in ("reduced", "full"):
        raise ValidationError(f"mode must be 'reduced' or 'full', got {mode!r}")
    fused_dir = Path(fused_dir)
    pairs, manifest = load_dataset(dataset_dir)
    ids = list(manifest["pairs"])
    found = {
        p.stem for p in fused_dir.glob("*.json") if not p.name.endswith(".meta.json")
    }
    missing = sorted(set(ids) - found)
    extra = sorted(found - set(ids))
    if missing or extra:
        raise ValidationError(
            f"fused rasters do not match dataset ids; missing: {missing}; "
            f"unmatched: {extra}"
        )
    rows = []
    for pid, pair in zip(ids, pairs):
        fused = load_raster(fused_dir / pid)
        if not isinstance(fused, MSImage):
            raise GeometryError(f"{fused_dir / pid} is not multi-band")
        rows.append(_metric_row(mode, pid, fused, pair))
    report = build_report(rows)
    keys = [*REDUCED_KEYS, *NOREF_KEYS] if mode == "reduced" else list(NOREF_KEYS)
    payload = {
        "mode": mode,
        "config_hash": manifest.get("config_hash"),
        "rows": list(report.per_image),
        "aggregate": report.aggregate,
    }
    out_json, out_csv = Path(out_json), Path(out_csv)
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(json.dumps(payload, indent=2, sort_keys=True))
    with open(out_csv, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", *keys])
        for row in report.per_image:
            writer.writerow([row["id"], *[f"{row[k]:.8f}" for k in keys]])
        writer.writerow(["aggregate", *[f"{report.aggregate[k]:.8f}" for k in keys]])
    return payload


def evaluate_model(model: UnfoldingModel, pairs: list[SamplePair]) -> dict:
    """Mean reference metrics of a model over in-memory pairs."""
    if not pairs:
        raise ValidationError("cannot evaluate on zero pairs")
    rows = []
    model.eval()
    for pair in pairs:
        with torch.no_grad():
            out = model(to_tensor(pair.lrms), to_tensor(pair.pan))
        fused = MSImage(from_tensor(out))
        rows.append({
            "psnr": psnr(fused, pair.gt),
            "ssim": ssim(fused, pair.gt),
            "sam": sam(fused, pair.gt),
            "ergas": ergas(fused, pair.gt, pair.ratio),
        })
    return build_report(rows).aggregate


# ---------------------------------------------------------------------------
# stage-count ablation
# ---------------------------------------------------------------------------


def run_ablate_stages(cfg: RunConfig, run_dir: str | Path, k_list: list[int]) -> list[dict]:
    """Train one model per stage count under an identical budget and report
    validation metrics. Pretrained priors are shared across the K variants
    (they do not depend on K), which is a deliberate cross-config reuse."""
    if not k_list:
        raise ValidationError("empty stage list")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stage1 = run_dir / STAGE1_NAME
    stage2 = run_dir / STAGE2_NAME
    if not cfg.disable_u_mae and not stage1.exists():
        run_pretrain_spatial(cfg, run_dir)
    if not cfg.disable_l_mae and not stage2.exists():
        run_pretrain_spectral(cfg, run_dir)
    val_pairs, _ = _load_split(cfg, "val")
    rows = []
    for k in k_list:
        cfg_k = replace(cfg, stages=int(k))
        sub_dir = run_dir / f"stages_{k}"
        ckpt = run_train(cfg_k, sub_dir, stage1=stage1, stage2=stage2,
                         allow_mismatch=True)
        model = model_from_checkpoint(ckpt, allow_mismatch=True)
        aggregate = evaluate_model(model, val_pairs)
        rows.append({"stages": int(k), **aggregate})
    with open(run_dir / "ablation.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["stages", *REDUCED_KEYS])
        for row in rows:
            writer.writerow([row["stages"], *[f"{row[k]:.8f}" for k in REDUCED_KEYS]])
    return rows

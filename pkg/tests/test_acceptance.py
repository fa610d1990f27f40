"""Shipping gate for the toolkit, twelve checks in four groups:

* optimisation core (01-04): the data-consistency step agrees with finite
  differences of its quadratic objective under oracle degradation operators,
  the oracle is self-adjoint-consistent, satisfied constraints are a fixed
  point, and repeated identity-prox steps descend monotonically;
* self-supervision invariants (05-06): masked-cell counts and the rho = 0
  identity, plus the zero/composition identities of the training losses;
* scoring (07-08): metric identities at x == x, the product form of QNR with
  a pinned reference value, and every classical baseline returning the
  upsampled MS bit-near-exactly when the injected detail is zero;
* desk-scale training (09-12): one shared run of the full pipeline on the
  synthetic benchmark (seed 7), checked for margin over bicubic, stage-count
  and prior-ablation direction, and checkpoint-level determinism.

Each test prints one `criterion NN ... PASS|FAIL` line with the measured
value next to its bound. Groups one to three finish in a couple of minutes;
the desk fixture adds roughly a quarter of an hour on a single CPU core.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from panfuse.baselines import (
    FusionInput,
    brovey_fuse,
    gfpca_fuse,
    gs_fuse,
    ihs_fuse,
    principal_components,
    sfim_fuse,
)
from panfuse.checkpoint import load_checkpoint, state_hash
from panfuse.config import resolve_config
from panfuse.degradation import FixedDegradeOracle
from panfuse.mae import TokenMAE, ss_consistency_loss
from panfuse.masking import apply_spatial_mask, make_spatial_mask
from panfuse.metrics import d_lambda, d_s, ergas, psnr, qnr, sam, ssim
from panfuse.pipeline import (
    _load_split,
    evaluate_model,
    make_toy_data,
    model_from_checkpoint,
    run_pretrain_spatial,
    run_pretrain_spectral,
    run_train,
)
from panfuse.raster import MSImage, PanImage, upsample_tensor
from panfuse.unfolding import (
    UnfoldingModel,
    hnet_gradient_step,
    hnet_update,
    image_loss,
    total_loss,
)


def _line(num: int, name: str, detail: str, ok: bool) -> None:
    print(f"criterion {num:02d} {name}: {detail}  {'PASS' if ok else 'FAIL'}")


# ---------------------------------------------------------------------------
# 01-04: data-consistency step against the oracle operators
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    oracle = FixedDegradeOracle(ratio=2)
    delta2, eta = 0.3, 0.7

    def objective(h, u, low):
        resid = oracle.apply(h) - low
        return 0.5 * float((resid**2).sum()) + 0.5 * eta * float(((h - u) ** 2).sum())

    t0 = time.monotonic()
    worst = 0.0
    for _ in range(20):
        h = torch.from_numpy(rng.random((1, 2, 8, 8)))
        u = torch.from_numpy(rng.random((1, 2, 8, 8)))
        low = torch.from_numpy(rng.random((1, 2, 4, 4)))
        stepped = hnet_gradient_step(h, u, low, delta2, eta, oracle.apply, oracle.adjoint)
        grad = (h - stepped) / delta2  # step = h - delta2 * grad
        eps = 1e-6
        for _ in range(3):
            d = torch.from_numpy(rng.standard_normal(h.shape))
            fd = (objective(h + eps * d, u, low) - objective(h - eps * d, u, low)) / (2 * eps)
            ad = float((grad * d).sum())
            worst = max(worst, abs(fd - ad) / max(abs(ad), 1e-12))
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-3 and elapsed < 60.0
    _line(1, "gradient vs finite differences",
          f"rel err {worst:.2e} (bound 1e-3), {elapsed:.1f}s (< 60s), 20 instances", ok)
    assert ok, f"worst rel err {worst:.3e}, elapsed {elapsed:.1f}s"


def test_criterion_02_oracle_adjoint_identity():
    rng = np.random.default_rng(12)
    worst = 0.0
    for i in range(100):
        ratio = (2, 4)[i % 2]
        c = int(rng.integers(1, 5))
        side = int(rng.integers(4, 9))
        oracle = FixedDegradeOracle(ratio=ratio)
        x = torch.from_numpy(rng.standard_normal((1, c, side * ratio, side * ratio)))
        y = torch.from_numpy(rng.standard_normal((1, c, side, side)))
        lhs = float((oracle.apply(x) * y).sum())
        rhs = float((x * oracle.adjoint(y)).sum())
        worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-6
    _line(2, "oracle adjoint identity",
          f"max |<Ax,y> - <x,A'y>| {worst:.2e} (bound 1e-6), 100 pairs", ok)
    assert ok, f"worst adjoint gap {worst:.3e}"


def test_criterion_03_satisfied_constraints_are_a_fixed_point():
    # learned-operator path: L built as the model's own down(H), U = H
    torch.manual_seed(13)
    model = UnfoldingModel(channels=2, ratio=4, stages=3, width=8)
    rng = np.random.default_rng(13)
    h = torch.from_numpy(rng.random((1, 2, 16, 16)).astype(np.float32))
    with torch.no_grad():
        low = model.down_ops[0](h)
        out = hnet_update(model, h, h.clone(), low, k=0)
    dev_model = 0.0 if torch.equal(out, h) else float((out - h).abs().max())

    # oracle path: exact arithmetic end to end
    oracle = FixedDegradeOracle(ratio=2)
    h64 = torch.from_numpy(rng.random((1, 2, 8, 8)))
    stepped = hnet_gradient_step(h64, h64.clone(), oracle.apply(h64), 0.3, 0.7,
                                 oracle.apply, oracle.adjoint)
    dev_oracle = 0.0 if torch.equal(stepped, h64) else float((stepped - h64).abs().max())

    worst = max(dev_model, dev_oracle)
    ok = worst <= 1e-7
    _line(3, "fixed point at satisfied constraints",
          "bitwise" if worst == 0.0 else f"max dev {worst:.2e} (bound 1e-7)", ok)
    assert ok, f"fixed-point deviation {worst:.3e}"


def test_criterion_04_identity_prox_monotone_descent():
    rng = np.random.default_rng(14)
    oracle = FixedDegradeOracle(ratio=2)
    min_drop = np.inf
    for _ in range(50):
        h = torch.from_numpy(rng.random((1, 2, 8, 8)))
        low = torch.from_numpy(rng.random((1, 2, 4, 4)))
        prev = 0.5 * float(((oracle.apply(h) - low) ** 2).sum())
        for _ in range(10):
            h = hnet_gradient_step(h, h, low, 0.1, 0.0, oracle.apply, oracle.adjoint)
            cur = 0.5 * float(((oracle.apply(h) - low) ** 2).sum())
            min_drop = min(min_drop, prev - cur)
            assert cur < prev, f"objective rose: {prev:.6e} -> {cur:.6e}"
            prev = cur
    ok = min_drop > 0.0
    _line(4, "identity-prox descent",
          f"min per-iteration drop {min_drop:.2e} over 50 x 10 iterations (strict)", ok)
    assert ok


# ---------------------------------------------------------------------------
# 05-06: masking and loss invariants
# ---------------------------------------------------------------------------


def test_criterion_05_mask_count_and_rho_zero_identity():
    rng = np.random.default_rng(15)
    for i in range(1000):
        p = int(rng.choice([2, 3, 4, 8, 16]))
        h = int(rng.integers(p, 65))
        w = int(rng.integers(p, 65))
        if i % 10 == 0:
            rho = float(rng.choice([0.0, 1.0]))  # exercise both endpoints
        else:
            rho = float(rng.random())
        seed = int(rng.integers(0, 2**31 - 1))
        spec = make_spatial_mask(h, w, p, rho, seed)
        want = round(rho * spec.n_cells)
        assert len(spec.masked) == want, (
            f"dims {h}x{w} p={p} rho={rho}: {len(spec.masked)} masked, want {want}"
        )

    img = torch.from_numpy(np.random.default_rng(16).random((1, 3, 16, 16)).astype(np.float32))
    spec0 = make_spatial_mask(16, 16, 4, 0.0, seed=3)
    identity = torch.equal(apply_spatial_mask(img, spec0, torch.full((3,), 0.5)), img)
    ok = identity
    _line(5, "mask invariants",
          f"count == round(rho * cells) on 1000 cases, rho=0 identity {identity}", ok)
    assert ok


def test_criterion_06_loss_identities():
    torch.manual_seed(17)
    rng = np.random.default_rng(17)
    c, low_side, r = 2, 8, 2
    model = UnfoldingModel(channels=c, ratio=r, stages=0, width=8).train()
    low = torch.from_numpy(rng.random((1, c, low_side, low_side)).astype(np.float32))
    pan = torch.rand(1, 1, low_side * r, low_side * r)
    gt = upsample_tensor(low, r)  # the stage-free model reproduces this exactly
    e_mae = TokenMAE(height=low_side * r, width=low_side * r, channels=c, patch_side=8,
                     band_group=2, embed_dim=32, enc_layers=1, dec_layers=1, heads=2)

    l_img = float(image_loss(gt, gt))
    l_ss = float(ss_consistency_loss(e_mae, gt, gt).detach())
    l_tot = float(total_loss(model, (low, pan, gt), e_mae, lambda_ss=1.0).detach())

    # lambda = 1 composition on a batch with a real gap
    gt2 = (gt + 0.07).clamp(0, 1)
    pred = model(low, pan)
    part_img = float(image_loss(pred, gt2))
    part_ss = float(ss_consistency_loss(e_mae, pred, gt2).detach())
    combined = float(total_loss(model, (low, pan, gt2), e_mae, lambda_ss=1.0).detach())
    comp_gap = abs(combined - (part_img + part_ss))

    ok = l_img == 0.0 and l_ss == 0.0 and l_tot == 0.0 and comp_gap < 1e-6
    _line(6, "loss identities",
          f"L_img(x,x)={l_img} L_ss(x,x)={l_ss} total(x,x)={l_tot}, "
          f"lambda=1 composition gap {comp_gap:.1e} (< 1e-6)", ok)
    assert ok, (l_img, l_ss, l_tot, comp_gap)


# ---------------------------------------------------------------------------
# 07-08: metrics and classical baselines
# ---------------------------------------------------------------------------


def test_criterion_07_metric_identity_suite():
    rng = np.random.default_rng(18)
    x = rng.random((24, 24, 4))
    identities = (psnr(x, x), ssim(x, x), sam(x, x), ergas(x, x, ratio=4))

    # product form on raw pairs and on distortions computed from images
    worst = 0.0
    for _ in range(200):
        dl, ds = float(rng.random()), float(rng.random())
        worst = max(worst, abs(qnr(dl, ds) - (1.0 - dl) * (1.0 - ds)))
    fused = rng.random((64, 64, 4))
    lrms = rng.random((16, 16, 4))
    pan = rng.random((64, 64, 1))
    dl = d_lambda(fused, lrms)
    ds = d_s(fused, lrms, pan)
    worst = max(worst, abs(qnr(dl, ds) - (1.0 - dl) * (1.0 - ds)))

    ref = qnr(0.0676, 0.1112)
    ref_gap = abs(ref - 0.8287)

    ok = (identities == (100.0, 1.0, 0.0, 0.0)) and worst <= 1e-9 and ref_gap <= 5e-4
    _line(7, "metric identity suite",
          f"psnr/ssim/sam/ergas(x,x)={identities}, QNR product gap {worst:.1e} (<= 1e-9), "
          f"qnr(0.0676, 0.1112)={ref:.4f} (0.8287 +/- 5e-4)", ok)
    assert ok, (identities, worst, ref)


def test_criterion_08_baseline_identity_family():
    def inp(ms, pan):
        return FusionInput(MSImage(ms), PanImage(pan))

    worst: dict[str, float] = {}
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        ms = (rng.random((16, 16, 4)) * 0.4 + 0.2).astype(np.float32)
        inten = ms.astype(np.float64).mean(axis=2)

        # ihs / gs: pan equal to the band mean carries zero detail
        pan_i = inten.astype(np.float32)
        devs = {
            "ihs": np.max(np.abs(ihs_fuse(inp(ms, pan_i)).data - ms)),
            "gs": np.max(np.abs(gs_fuse(inp(ms, pan_i)).data - ms)),
            # brovey guards its ratio with eps; offset pan so the ratio is one
            "brovey": np.max(np.abs(brovey_fuse(inp(ms, (inten + 1e-6).astype(np.float32))).data - ms)),
        }

        # sfim: constant pan means the modulation ratio is one everywhere;
        # keep ms below 0.5 so the eps bias in the denominator stays in bound
        ms_s = (rng.random((16, 16, 4)) * 0.35 + 0.1).astype(np.float32)
        ones = np.ones((16, 16), np.float32)
        devs["sfim"] = np.max(np.abs(sfim_fuse(inp(ms_s, ones), ratio=4).data - ms_s))

        # gfpca: a pan affine in PC1 is reproduced exactly by the
        # unregularised guided filter, so the substituted component is PC1
        scores, _, _ = principal_components(ms.astype(np.float64))
        pc1 = scores[:, :, 0]
        pan_g = ((pc1 - pc1.min()) / (pc1.max() - pc1.min())).astype(np.float32)
        devs["gfpca"] = np.max(np.abs(gfpca_fuse(inp(ms, pan_g), reg=0.0).data - ms))

        for k, v in devs.items():
            worst[k] = max(worst.get(k, 0.0), float(v))

    ok = all(v <= 1e-6 for v in worst.values())
    detail = " ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    _line(8, "baseline zero-detail identity", f"max dev {detail} (bound 1e-6)", ok)
    assert ok, worst


# ---------------------------------------------------------------------------
# 09-12: desk-scale training (shared fixture, seed 7)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = resolve_config({"profile": "desk", "seed": "7", "data_dir": str(root / "toy")})

    t0 = time.monotonic()
    make_toy_data(cfg)
    run = root / "run_k4"
    s1 = run_pretrain_spatial(cfg, run)
    s2 = run_pretrain_spectral(cfg, run)
    model_path = run_train(cfg, run, stage1=s1, stage2=s2)
    val_pairs, _ = _load_split(cfg, "val")
    fused = evaluate_model(model_from_checkpoint(model_path), val_pairs)
    bicubic_model = UnfoldingModel(channels=cfg.bands, ratio=cfg.ratio, stages=0,
                                   width=cfg.width).eval()
    bicubic = evaluate_model(bicubic_model, val_pairs)
    elapsed_k4 = time.monotonic() - t0

    # single-stage variant reuses the same priors and data
    m1 = run_train(replace(cfg, stages=1), root / "run_k1",
                   stage1=s1, stage2=s2, allow_mismatch=True)
    k1 = evaluate_model(model_from_checkpoint(m1), val_pairs)

    # prior-free variant trains from scratch with both encoders disabled
    mn = run_train(replace(cfg, disable_u_mae=True, disable_l_mae=True), root / "run_noprior")
    noprior = evaluate_model(model_from_checkpoint(mn), val_pairs)

    return {"cfg": cfg, "root": root, "fused": fused, "bicubic": bicubic,
            "k1": k1, "noprior": noprior, "elapsed_k4": elapsed_k4}


def test_criterion_09_desk_run_beats_bicubic(desk_runs):
    gain = desk_runs["fused"]["psnr"] - desk_runs["bicubic"]["psnr"]
    elapsed = desk_runs["elapsed_k4"]
    ok = gain >= 1.5 and elapsed <= 1800.0
    _line(9, "desk run vs bicubic",
          f"fused {desk_runs['fused']['psnr']:.3f} dB vs bicubic "
          f"{desk_runs['bicubic']['psnr']:.3f} dB, gain {gain:.3f} (>= 1.5), "
          f"{elapsed:.0f}s (<= 1800s)", ok)
    assert ok, f"gain {gain:.3f} dB in {elapsed:.0f}s"


def test_criterion_10_more_stages_do_not_hurt(desk_runs):
    p4, p1 = desk_runs["fused"]["psnr"], desk_runs["k1"]["psnr"]
    ok = p4 >= p1
    _line(10, "stage-count direction", f"K=4 {p4:.3f} dB >= K=1 {p1:.3f} dB", ok)
    assert ok, (p4, p1)


def test_criterion_11_priors_do_not_hurt(desk_runs):
    pp, pn = desk_runs["fused"]["psnr"], desk_runs["noprior"]["psnr"]
    ok = pp >= pn - 0.1
    _line(11, "prior-ablation direction",
          f"with priors {pp:.3f} dB >= no-prior {pn:.3f} - 0.1 dB", ok)
    assert ok, (pp, pn)


def test_criterion_12_identical_seeds_identical_checkpoints(desk_runs):
    # full pipeline repeated at reduced step count; hash compares the three
    # checkpoints (conv encoder, token encoder, fused model) state by state
    cfg = replace(desk_runs["cfg"], max_steps=30, pretrain_steps=60)
    hashes = []
    for name in ("det_a", "det_b"):
        run = desk_runs["root"] / name
        s1 = run_pretrain_spatial(cfg, run)
        s2 = run_pretrain_spectral(cfg, run)
        mp = run_train(cfg, run, stage1=s1, stage2=s2)
        hashes.append(tuple(
            state_hash(load_checkpoint(p, kind=k)["state"])
            for p, k in ((s1, "conv_mae"), (s2, "token_mae"), (mp, "unfolding"))
        ))
    ok = hashes[0] == hashes[1]
    _line(12, "checkpoint determinism",
          f"stage1/stage2/model hashes {'identical' if ok else 'DIFFER'} across repeated runs", ok)
    assert ok, f"{hashes[0]} vs {hashes[1]}"

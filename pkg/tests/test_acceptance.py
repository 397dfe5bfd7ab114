"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the lines are
also repeated in the terminal summary.
"""
import numpy as np
import pytest
import torch

from mbr_reid.auditor import (
    audit_all,
    count_params,
    expected_table,
    lai_param_count,
)
from mbr_reid.data import PKBatchSpec, load_manifest
from mbr_reid.evaluator import EmbeddingMatrix, extract_embeddings, rank_and_score
from mbr_reid.losses import LossWeights, batch_hard_triplet, ce_label_smoothing, lbs_total
from mbr_reid.model import build_model, get_preset, make_stage
from mbr_reid.model.layers import CONV, conv_weight_count
from mbr_reid.model.network import _branch_to_resnet_key
from mbr_reid.model.presets import CLS, METRIC, preset_names
from mbr_reid.trainer import TrainPlan, run_training

from oracles import ce_ls_oracle, retrieval_oracle, triplet_oracle
from test_model import _half_state, _torchvision_layer4

SMALL = (64, 64)

# recipe for the smoke run; see README for why these differ from the full recipe
SMOKE_PLAN = TrainPlan(epochs=20, base_lr=1e-3, warmup_epochs=2, decay_epochs=(12, 17), checkpoint_every=100)
SMOKE_PK = PKBatchSpec(P=5, K=4, seed=0)


@pytest.fixture(scope="module")
def audit():
    # every buildable preset that has a row, LBS twins included
    return audit_all(preset_names())


def test_criterion_1_params(audit, acceptance_report):
    bad = [f"{r.preset} {r.measured_params / 1e6:.2f}M vs {r.expected_params_m}M" for r in audit.rows if not r.pass_params]
    acceptance_report(
        1,
        not bad,
        f"params within 2% for {len(audit.rows) - len(bad)}/{len(audit.rows)} presets"
        + (f"; outside: {', '.join(bad)}" if bad else ""),
    )


def test_criterion_2_flops(audit, acceptance_report):
    bad = [f"{r.preset} {r.measured_flops / 1e9:.2f}G vs {r.expected_flops_g}G" for r in audit.rows if not r.pass_flops]
    worst = max(audit.rows, key=lambda r: r.flops_dev)
    acceptance_report(
        2,
        not bad,
        f"MACs within 5% for {len(audit.rows) - len(bad)}/{len(audit.rows)} presets "
        f"(largest deviation {worst.preset} {100 * worst.flops_dev:.1f}%)"
        + (f"; outside: {', '.join(bad)}" if bad else ""),
    )


def test_criterion_3_dims(audit, acceptance_report):
    bad = [r.preset for r in audit.rows if not r.pass_dims]
    acceptance_report(3, not bad, f"slice and f_g dims exact for {len(audit.rows) - len(bad)}/{len(audit.rows)} presets")


def test_criterion_4_lai(acceptance_report):
    cfg = expected_table()["lai_veri776"]
    n_cam, n_view = cfg["n_cam"], cfg["n_view"]
    with_lai = build_model(get_preset("R50-LAI", n_cam, n_view, input_size=SMALL), pretrained=False)
    plain = build_model(get_preset("R50", input_size=SMALL), pretrained=False)
    delta = count_params(with_lai, "full") - count_params(plain, "full")
    grouped = build_model(get_preset("MBR_R50-4G-LAI", n_cam, n_view, input_size=SMALL), pretrained=False)
    ok = delta == cfg["params_per_unit_set"] == lai_param_count(1, 2048, n_cam, n_view) == grouped.lai.A.numel()
    acceptance_report(4, ok, f"LAI adds {delta:,} parameters per unit-set ({n_cam} cams x {n_view} views)")


def test_criterion_5_losses(acceptance_report):
    rng = np.random.default_rng(2024)
    worst_tri = 0.0
    for _ in range(100):
        P, K, d = int(rng.integers(2, 7)), int(rng.integers(2, 5)), int(rng.integers(2, 33))
        emb = rng.normal(size=(P * K, d))
        ids = np.repeat(np.arange(P), K)
        perm = rng.permutation(P * K)
        emb, ids = emb[perm], ids[perm]
        margin = float(rng.uniform(0.05, 1.0))
        got = batch_hard_triplet(torch.from_numpy(emb), torch.from_numpy(ids), margin).item()
        worst_tri = max(worst_tri, abs(got - triplet_oracle(emb, ids, margin)))

    worst_ce = 0.0
    for _ in range(100):
        n, c = int(rng.integers(1, 20)), int(rng.integers(2, 30))
        logits = rng.normal(scale=4, size=(n, c))
        targets = rng.integers(0, c, size=n)
        eps = float(rng.uniform(0, 0.5))
        got = ce_label_smoothing(torch.from_numpy(logits), torch.from_numpy(targets), eps).item()
        worst_ce = max(worst_ce, abs(got - ce_ls_oracle(logits, targets, eps)))

    ids = torch.arange(3).repeat_interleave(3)
    emb = torch.from_numpy(np.random.default_rng(1).normal(size=(9, 6))).requires_grad_(True)
    batch_hard_triplet(emb, ids, 0.5).backward()
    h, numeric = 1e-6, torch.zeros_like(emb)
    with torch.no_grad():
        for idx in np.ndindex(*emb.shape):
            e = emb.detach().clone()
            e[idx] += h
            up = batch_hard_triplet(e, ids, 0.5)
            e[idx] -= 2 * h
            numeric[idx] = (up - batch_hard_triplet(e, ids, 0.5)) / (2 * h)
    rel = ((emb.grad - numeric).norm() / numeric.norm()).item()

    ok = worst_tri < 1e-6 and worst_ce < 1e-6 and rel < 1e-4
    acceptance_report(
        5, ok, f"triplet max err {worst_tri:.1e}, CE max err {worst_ce:.1e} over 100 cases each; grad rel err {rel:.1e}"
    )


def test_criterion_6_retrieval(acceptance_report):
    rng = np.random.default_rng(6)
    cases = [(5, 20, 4, 2, True), (40, 150, 15, 4, True), (100, 500, 50, 6, True), (100, 500, 50, 6, False)]
    mismatches = []
    for nq, ng, n_ids, n_cams, cross in cases:
        q = EmbeddingMatrix(rng.normal(size=(nq, 16)), rng.integers(0, n_ids, nq), rng.integers(0, n_cams, nq))
        g = EmbeddingMatrix(rng.normal(size=(ng, 16)), rng.integers(0, n_ids, ng), rng.integers(0, n_cams, ng))
        res = rank_and_score(q, g, cross_camera=cross)
        m, cmc, excluded = retrieval_oracle(
            q.rows, q.vehicle_ids, q.camera_ids, g.rows, g.vehicle_ids, g.camera_ids, cross
        )
        if not (res.mAP == m and list(res.cmc[: len(cmc)]) == cmc and res.n_excluded == excluded):
            mismatches.append((nq, ng, cross))
    acceptance_report(
        6, not mismatches, f"exact mAP/CMC agreement on {len(cases) - len(mismatches)}/{len(cases)} sets up to 100x500"
    )


def test_criterion_7_lbs_structure(acceptance_report):
    rng = np.random.default_rng(7)
    ids = torch.tensor([0, 0, 1, 1, 2, 2])
    cls_emb = torch.from_numpy(rng.normal(size=(6, 8))).requires_grad_(True)
    cls_logits = torch.from_numpy(rng.normal(size=(6, 3))).requires_grad_(True)
    met_emb = torch.from_numpy(rng.normal(size=(6, 8))).requires_grad_(True)
    met_logits = torch.from_numpy(rng.normal(size=(6, 3))).requires_grad_(True)
    total, _ = lbs_total([(cls_emb, CLS, cls_logits), (met_emb, METRIC, met_logits)], ids, LossWeights())
    total.backward()
    decoupled = met_logits.grad is None and cls_emb.grad is None

    model = build_model(get_preset("MBR_R50-2B", input_size=SMALL), n_classes=3, seed=0).train()
    out = model(torch.randn(4, 3, *SMALL))
    out.logits[0].pow(2).sum().backward()
    isolated = all(p.grad is None or p.grad.abs().sum() == 0 for p in model.stage4_parameters(1))
    own = any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.stage4_parameters(0))
    shared = model.shared.layer1[0].conv1.weight.grad.abs().sum() > 0
    ok = decoupled and isolated and own and bool(shared)
    acceptance_report(
        7, ok, f"loss decoupling={decoupled}, stage-4 isolation={isolated}, own branch grad={own}, trunk grad={bool(shared)}"
    )


def test_criterion_8_grouped_conv(acceptance_report):
    torch.manual_seed(0)
    ref = _torchvision_layer4().eval()
    ours = make_stage((CONV,)).eval()
    state = ref.state_dict()
    ours.load_state_dict({k: state[_branch_to_resnet_key(k)] for k in ours.state_dict()})
    x = torch.randn(2, 1024, 16, 16)
    with torch.no_grad():
        bit_equal = torch.equal(ours(x), ref(x))

    grouped = make_stage((CONV, CONV), 64, 32, 128, n_blocks=2, resolution=(4, 4)).eval()
    gstate = grouped.state_dict()
    halves = []
    for g in range(2):
        half = make_stage((CONV,), 32, 16, 64, n_blocks=2, resolution=(4, 4)).eval()
        half.load_state_dict(_half_state(gstate, half.state_dict().keys(), g, 2))
        halves.append(half)
    x = torch.randn(2, 64, 4, 4)
    with torch.no_grad():
        err = (grouped(x) - torch.cat([h(c) for h, c in zip(halves, x.chunk(2, dim=1))], dim=1)).abs().max().item()

    full = conv_weight_count(make_stage((CONV,)))
    ratios = {G: conv_weight_count(make_stage((CONV,) * G)) * G == full for G in (2, 4)}
    ok = bit_equal and err <= 1e-5 and all(ratios.values())
    acceptance_report(8, ok, f"G=1 bit-equal={bit_equal}, G=2 max err {err:.1e}, 1/G ratio exact for G=2,4: {all(ratios.values())}")


@pytest.mark.slow
def test_criterion_9_smoke_training(synth_root, tmp_path, acceptance_report):
    train = load_manifest(synth_root, "csv", "train")
    model = build_model(get_preset("MBR_R50-2G"), n_classes=train.n_classes, pretrained=False, seed=0)
    result = run_training(
        model, train, SMOKE_PLAN, LossWeights(), SMOKE_PK, out_dir=tmp_path, augmentation=None, seed=0, deterministic=True
    )
    first, last = result.epoch_losses[0], result.epoch_losses[SMOKE_PLAN.epochs - 1]
    q = extract_embeddings(model, load_manifest(synth_root, "csv", "query"))
    g = extract_embeddings(model, load_manifest(synth_root, "csv", "gallery"))
    res = rank_and_score(q, g)
    ratio = last / first
    ok = ratio < 0.5 and res.cmc_at(1) >= 0.8
    acceptance_report(
        9, ok, f"loss {first:.3f} -> {last:.3f} (ratio {ratio:.3f}, need < 0.5), query CMC1 {res.cmc_at(1):.2f} (need >= 0.8)"
    )

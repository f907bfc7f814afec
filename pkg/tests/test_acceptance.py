"""Acceptance gate: one check per headline criterion, summarized at the end of the run."""

import json
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS
from oracles import (
    aupro_all_thresholds,
    ap_thresholds,
    auroc_pairs,
    central_difference,
    f1_thresholds,
    random_rect_mask,
)
from zsad.cli import main
from zsad.encoder import l2_normalize
from zsad.metrics import aupro, auroc, average_precision, f1_max
from zsad.prompts import (
    GENERIC_TEMPLATES,
    MEDICAL_LEXICON,
    MEDICAL_TEMPLATES,
    LearnablePromptState,
    TextPrototypes,
    build_localization_prototypes,
    detection_prototypes,
    init_learnable_prompts,
)
from zsad.scoring import class_likelihood, score_features, softmax_pair
from zsad.training import TrainConfig, local_loss_terms


def record(name, ok, detail):
    ACCEPTANCE_RESULTS.append(("PASS" if ok else "FAIL", name, detail))
    assert ok, f"{name}: {detail}"


def test_metric_oracle_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"auroc": 0.0, "ap": 0.0, "f1": 0.0, "aupro": 0.0}
    threshold_mismatch = 0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.random(n)
        if rng.random() < 0.5:
            s = np.round(s, 1)
        worst["auroc"] = max(worst["auroc"], abs(auroc(s, y) - auroc_pairs(s, y)))
        worst["ap"] = max(worst["ap"], abs(average_precision(s, y) - ap_thresholds(s, y)))
        f1, t = f1_max(s, y)
        f1_ref, t_ref = f1_thresholds(s, y)
        worst["f1"] = max(worst["f1"], abs(f1 - f1_ref))
        threshold_mismatch += t != t_ref
    for _ in range(50):
        masks = [random_rect_mask(rng, 16, 16, max_regions=3, max_side=6) for _ in range(3)]
        maps = [np.round(0.5 * m + rng.random(m.shape), 2) for m in masks]
        worst["aupro"] = max(worst["aupro"], abs(aupro(maps, masks, 0.3) - aupro_all_thresholds(maps, masks, 0.3)))
    elapsed = time.perf_counter() - start
    ok = (
        max(worst["auroc"], worst["ap"], worst["f1"]) <= 1e-9
        and worst["aupro"] <= 1e-6
        and threshold_mismatch == 0
        and elapsed < 30
    )
    detail = ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    record("metric oracle suite", ok, detail)


def test_likelihood_property_suite():
    rng = np.random.default_rng(7)
    d, n = 1024, 1000
    taus = (0.0042, 0.01, 1.0)
    e = torch.from_numpy(rng.standard_normal((n, d)))
    g_n = l2_normalize(torch.from_numpy(rng.standard_normal(d)))
    g_a = l2_normalize(torch.from_numpy(rng.standard_normal(d)))
    G = TextPrototypes(g_n, g_a)
    labels = rng.integers(0, 2, n)
    norm_err = shift_err = 0.0
    aurocs = []
    for tau in taus:
        p_n, p_a = class_likelihood(e, G, tau)
        norm_err = max(norm_err, float((p_n + p_a - 1).abs().max()))
        e_hat = l2_normalize(e)
        sims = e_hat @ G.stacked().T
        shift = torch.from_numpy(rng.uniform(-3, 3, n))
        q_n, q_a = softmax_pair(sims[:, 0] + shift, sims[:, 1] + shift, tau)
        shift_err = max(shift_err, float((q_a - p_a).abs().max()), float((q_n - p_n).abs().max()))
        # ranking is only informative while no two probabilities collapse to the same float
        assert np.unique(p_a.numpy()).size == n, f"saturation ties at tau={tau}"
        aurocs.append(auroc(p_a.numpy(), labels))
    gap_auroc = auroc((sims[:, 1] - sims[:, 0]).numpy(), labels)
    ok = norm_err <= 1e-12 and shift_err <= 1e-12 and len(set(aurocs)) == 1 and aurocs[0] == gap_auroc
    record(
        "likelihood property suite",
        ok,
        f"sum err {norm_err:.1e}, shift err {shift_err:.1e}, AUROC over tau {aurocs} (1000 triples)",
    )


GRAD_TAUS = (1.0, 0.1, 0.05)


def test_gradient_check():
    cfg = TrainConfig(focal_gamma=2.0, focal_alpha=0.25, dice_epsilon=1.0)
    rng = np.random.default_rng(11)
    worst = {}
    for tau in GRAD_TAUS:
        worst[tau] = 0.0
        for _ in range(20):
            z = torch.from_numpy(rng.standard_normal((1, 16, 16)))
            mask = torch.from_numpy(random_rect_mask(rng, 8, 8, 3, 1, 4)[None].astype(np.float64))
            g = rng.standard_normal((2, 16))
            g /= np.linalg.norm(g, axis=1, keepdims=True)

            def loss(x):
                focal, dice = local_loss_terms(z, TextPrototypes(x[0], x[1]), mask, tau, (4, 4), cfg)
                return focal + dice

            leaf = torch.from_numpy(g.copy()).requires_grad_(True)
            loss(leaf).backward()
            analytic = leaf.grad.numpy()
            numeric = central_difference(lambda x: float(loss(torch.from_numpy(x))), g.copy(), 1e-3)
            err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
            worst[tau] = max(worst[tau], err)
    ok = all(v <= 1e-4 for v in worst.values())
    record("gradient check", ok, ", ".join(f"tau={t}: max rel err {v:.1e}" for t, v in worst.items()) + " (20 instances, 8x8)")


def test_decoupling_wiring(encoder, mock_cfg, random_images):
    tau = mock_cfg.temperature
    G_f = detection_prototypes(encoder, "object")
    G_f_other = detection_prototypes(encoder, "object", MEDICAL_LEXICON, MEDICAL_TEMPLATES[:1] + GENERIC_TEMPLATES[2:4])
    dt = mock_cfg.text_token_dim
    g = torch.Generator().manual_seed(3)
    states = [
        init_learnable_prompts(8, dt, 111),
        LearnablePromptState(torch.randn(8, dt, generator=g), torch.randn(8, dt, generator=g)),
    ]
    with torch.no_grad():
        G_ls = [build_localization_prototypes(s, encoder) for s in states]
    feats = encoder.encode_images(random_images)
    global_equal = local_equal = local_changed = 0
    for f in feats:
        for strategy in ("S1", "S2", "S3", "S4"):
            values = {score_features(f, G_f, G_l, tau, 4.0, (224, 224), strategy)[0].value for G_l in G_ls}
            global_equal += len(values) == 1
        maps = [score_features(f, Gf, G_ls[0], tau, 4.0, (224, 224))[1].values for Gf in (G_f, G_f_other)]
        local_equal += np.array_equal(maps[0], maps[1])
        alt = score_features(f, G_f, G_ls[1], tau, 4.0, (224, 224))[1].values
        local_changed += not np.array_equal(maps[0], alt)
    n = len(feats)
    ok = global_equal == 4 * n and local_equal == n and local_changed == n
    record(
        "decoupling wiring",
        ok,
        f"S1-S4 bitwise equal {global_equal}/{4 * n}, map unchanged under new fixed prompts {local_equal}/{n}, "
        f"map moved under new learnable state {local_changed}/{n}",
    )


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    assert main(["synth-dataset", "--out", str(root / "train"), "--n-normal", "40", "--n-anomalous", "40",
                 "--image-size", "128", "--seed", "1", "--name", "synthetic-train"]) == 0
    assert main(["synth-dataset", "--out", str(root / "test"), "--n-normal", "20", "--n-anomalous", "20",
                 "--image-size", "128", "--seed", "2", "--name", "synthetic-test"]) == 0

    def train_and_eval(tag, mode):
        assert main(["train", "--backbone", "mock", "--manifest", str(root / "train" / "manifest.json"),
                     "--out", str(root / tag), "--epochs", "2", "--batch-size", "8", "--seed", "111",
                     "--loss-mode", mode]) == 0
        assert main(["evaluate", "--backbone", "mock", "--manifest", str(root / "test" / "manifest.json"),
                     "--checkpoint", str(root / tag / "prompts.ckpt"), "--out", str(root / tag / "eval"),
                     "--strategy", "S5"]) == 0
        return json.loads((root / tag / "eval" / "report.json").read_text())

    local = train_and_eval("local", "local")
    wall = time.perf_counter() - start
    return {"root": root, "local": local, "wall": wall, "train_and_eval": train_and_eval}


def test_end_to_end_synthetic(e2e):
    mean = e2e["local"]["dataset_mean"]
    pixel, image = mean["pixel"]["auroc"], mean["image"]["auroc"]
    glob = e2e["train_and_eval"]("global", "global")["dataset_mean"]["pixel"]["auroc"]
    ok = pixel >= 0.95 and image >= 0.90 and e2e["wall"] < 120 and glob < pixel
    record(
        "end-to-end synthetic run",
        ok,
        f"pixel AUROC {pixel:.4f}, image AUROC (S5) {image:.4f}, wall {e2e['wall']:.1f}s, "
        f"global-mode pixel AUROC {glob:.4f}",
    )


def test_determinism(e2e):
    root = e2e["root"]
    e2e["train_and_eval"]("repeat", "local")
    same_ckpt = (root / "local" / "prompts.ckpt").read_bytes() == (root / "repeat" / "prompts.ckpt").read_bytes()
    same_report = (root / "local" / "eval" / "report.json").read_bytes() == (
        root / "repeat" / "eval" / "report.json"
    ).read_bytes()
    record(
        "determinism",
        same_ckpt and same_report,
        f"checkpoint bytes equal: {same_ckpt}, report.json bytes equal: {same_report} (single platform)",
    )


def test_full_scale_reproduction():
    ACCEPTANCE_RESULTS.append(
        ("SKIP", "full-scale reproduction", "optional, needs user-supplied pretrained weights and datasets (see README)")
    )
    pytest.skip("optional full-scale criterion: needs pretrained weights and external datasets")

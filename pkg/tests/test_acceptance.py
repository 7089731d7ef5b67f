"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they execute. Paper-derived protocol constants are used verbatim:
threshold quantile 0.90, fine-tuning learning rate 0.001, sweeps bounded by
50 filters (the directional checks read out k = 10).
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from filterpot import dataset as ds
from filterpot import toycnn
from filterpot.cli import main as cli_main
from filterpot.errors import ParameterError
from filterpot.evaluate import (
    EvalConfig,
    finetune_sweep,
    make_ranking_providers,
    pruning_sweep,
)
from filterpot.evt import GpdParams, fit_gpd, gpd_cdf
from filterpot.profiles import FilterStats, SaliencyMatrix, load_profiles, save_profiles
from filterpot.ranking import (
    TailModel,
    fit_tail_model,
    group_attribution,
    load_tail_model,
    normal_tail_probability,
    pot_saliency,
    rank,
    save_tail_model,
)
from helpers import grid_search_gpd_mle, sample_gpd
from test_toycnn import _central_difference_check


def _verdict(number, description, ok):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {description}")
    assert ok, f"criterion {number} failed: {description}"


def test_criterion_1_gpd_recovery():
    rng = np.random.default_rng(2024)
    ok = True
    details = []
    for true_shape in (-0.2, 0.0, 0.2):
        x = sample_gpd(rng, 10_000, 1.0, true_shape)
        start = time.perf_counter()
        params, _ = fit_gpd(x)
        elapsed = time.perf_counter() - start
        good = (
            abs(params.shape - true_shape) <= 0.05
            and abs(params.scale - 1.0) <= 0.05
            and elapsed < 5.0
        )
        ok = ok and good
        details.append(
            f"shape {true_shape:+.1f} -> ({params.shape:+.3f}, {params.scale:.3f}) in {elapsed:.2f}s"
        )
    _verdict(1, "GPD recovery within +-0.05 under 5 s per fit [" + "; ".join(details) + "]", ok)


def test_criterion_2_grimshaw_residual_and_grid_oracle():
    rng = np.random.default_rng(2025)
    ok = True
    worst_gap = -np.inf
    for _ in range(20):
        n = int(rng.integers(300, 900))
        scale = float(rng.uniform(0.4, 1.6))
        shape = float(rng.uniform(-0.4, 0.8))
        x = sample_gpd(rng, n, scale, shape)
        params, diag = fit_gpd(x)
        if not diag.degenerate and params.shape != 0.0:
            ok = ok and diag.grimshaw_residual < 1e-8
        best_ll, _, _ = grid_search_gpd_mle(x)
        gap = best_ll - diag.log_likelihood
        worst_gap = max(worst_gap, gap)
        ok = ok and diag.log_likelihood >= best_ll - 1e-3
    _verdict(
        2,
        f"Grimshaw residual < 1e-8 and log-likelihood >= grid oracle - 1e-3 "
        f"on 20 datasets (worst oracle gap {worst_gap:.2e})",
        ok,
    )


def test_criterion_3_order_equivalence():
    rng = np.random.default_rng(2026)
    matches = 0
    trials = 100
    for _ in range(trials):
        l = 50
        mu = rng.uniform(0.0, 10.0, l)
        sigma = rng.uniform(0.1, 5.0, l)
        profile = rng.normal(mu, sigma)
        z = (profile - mu) / sigma
        tail = np.array([normal_tail_probability(v) for v in z])
        if rank(z, "zscore", profile).filter_ids == rank(tail, "pot", profile).filter_ids:
            matches += 1
    _verdict(3, f"z-score order equals exact normal-tail order ({matches}/{trials})", matches == trials)


def test_criterion_4_gradient_check():
    base = toycnn.init_state(1234)
    state = toycnn.ToyCnnState(
        conv_w=tuple(np.abs(w) for w in base.conv_w),
        conv_b=tuple(b.copy() for b in base.conv_b),
        fc_w=base.fc_w.copy(),
        fc_b=base.fc_b.copy(),
    )
    img = np.random.default_rng(55).uniform(0.5, 1.0, (1, 16, 16))
    checked, max_rel = _central_difference_check(state, img, 2, per_array=40)
    _verdict(
        4,
        f"analytic vs central-difference gradients, {checked} parameters, "
        f"max relative error {max_rel:.2e} < 1e-4",
        checked >= 200 and max_rel < 1e-4,
    )


@pytest.fixture(scope="module")
def sweep_setup(trained_state, shifted_misclassified, shifted_model):
    filters = toycnn.filter_metas()
    return {
        "state": trained_state,
        "mis": shifted_misclassified,
        "model": shifted_model,
        "filters": filters,
    }


def test_criterion_5_pruning_separation(sweep_setup):
    state, mis, model, filters = (
        sweep_setup["state"],
        sweep_setup["mis"],
        sweep_setup["model"],
        sweep_setup["filters"],
    )
    start = time.perf_counter()
    enough = len(mis) >= 100
    cfg_pot = EvalConfig("pot", max_filters=10)
    cfg_rand = EvalConfig("random", max_filters=10)
    rep_pot = pruning_sweep(
        state, mis, make_ranking_providers("pot", state, filters, model=model), cfg_pot
    )
    rep_rand = pruning_sweep(
        state,
        mis,
        make_ranking_providers("random", state, filters, random_seeds=cfg_rand.random_seeds),
        cfg_rand,
    )
    elapsed = time.perf_counter() - start
    drop_pot = rep_pot.incorrect_conf[0] - rep_pot.incorrect_conf[10]
    drop_rand = rep_rand.incorrect_conf[0] - rep_rand.incorrect_conf[10]
    ok = (
        enough
        and drop_pot > drop_rand
        and rep_pot.frac_corrected[10] >= rep_rand.frac_corrected[10]
        and elapsed < 300.0
    )
    _verdict(
        5,
        f"pruning separation on {len(mis)} misclassified samples: "
        f"drop(POT)={drop_pot:.3f} > drop(random)={drop_rand:.3f}, "
        f"corrected {rep_pot.frac_corrected[10]:.3f} >= {rep_rand.frac_corrected[10]:.3f}, "
        f"{elapsed:.0f}s < 300s",
        ok,
    )


def test_criterion_6_finetune_improvement(sweep_setup):
    state, mis, model, filters = (
        sweep_setup["state"],
        sweep_setup["mis"],
        sweep_setup["model"],
        sweep_setup["filters"],
    )
    cfg = EvalConfig("pot", max_filters=10, lr=0.001)
    rep_pot = finetune_sweep(
        state, mis, make_ranking_providers("pot", state, filters, model=model), cfg
    )
    rep_z = finetune_sweep(
        state,
        mis,
        make_ranking_providers("zscore", state, filters, model=model),
        EvalConfig("zscore", max_filters=10, lr=0.001),
    )
    ok = (
        rep_pot.correct_conf[10] > rep_pot.correct_conf[0]
        and rep_z.correct_conf[10] > rep_z.correct_conf[0]
    )
    _verdict(
        6,
        f"one-step fine-tuning (lr 0.001) raises correct-class confidence at k=10: "
        f"POT {rep_pot.correct_conf[0]:.4f}->{rep_pot.correct_conf[10]:.4f}, "
        f"z-score {rep_z.correct_conf[0]:.4f}->{rep_z.correct_conf[10]:.4f}",
        ok,
    )


def test_criterion_7_domain_shift_attribution(sweep_setup):
    state, mis, model, filters = (
        sweep_setup["state"],
        sweep_setup["mis"],
        sweep_setup["model"],
        sweep_setup["filters"],
    )
    (pot_provider,) = make_ranking_providers("pot", state, filters, model=model)
    (z_provider,) = make_ranking_providers("zscore", state, filters, model=model)
    pot_rankings = [pot_provider(s.image, s.true_label) for s in mis]
    z_rankings = [z_provider(s.image, s.true_label) for s in mis]
    shares_pot = group_attribution(pot_rankings, 20, filters)
    shares_z = group_attribution(z_rankings, 20, filters)
    last = filters[-1].layer_group
    nonzero_groups = sum(1 for v in shares_pot.values() if v > 0.0)
    ok = shares_pot[last] < shares_z[last] and nonzero_groups >= 2
    _verdict(
        7,
        f"top-20 attribution: last group {shares_pot[last]:.1f}% (POT) < "
        f"{shares_z[last]:.1f}% (z-score); POT spans {nonzero_groups} groups",
        ok,
    )


def test_criterion_8_pot_score_contracts():
    rng = np.random.default_rng(2027)
    ok = True
    # randomized single-filter models keep each sub-check easy to steer
    for _ in range(200):
        n_total = int(rng.integers(50, 400))
        n_exceed = int(rng.integers(2, max(3, n_total // 5)))
        threshold = float(rng.uniform(0.5, 3.0))
        shape = float(rng.uniform(-0.9, 1.0))
        scale = float(rng.uniform(0.2, 2.0))
        stats = [FilterStats(mean=0.0, std=1.0, threshold=threshold, n_exceed=n_exceed, n_total=n_total)]
        model = TailModel(0.9, stats, [GpdParams(scale, shape)], [False])
        model.reference_sorted = np.zeros((n_total, 1))

        excesses = np.sort(rng.uniform(1e-6, 6.0, size=8))
        scores = [
            float(pot_saliency([threshold + e], model)[0]) for e in excesses
        ]
        band = all(0.0 <= s <= n_exceed / n_total for s in scores)
        ok = ok and band
        if shape >= 0.0:
            ok = ok and all(b < a for a, b in zip(scores, scores[1:]))
        else:
            endpoint = -scale / shape
            beyond = pot_saliency([threshold + endpoint + 0.5], model)[0]
            ok = ok and beyond == 0.0
    _verdict(
        8,
        "POT scores: above-threshold in [0, n/N], strictly decreasing in the "
        "excess for shape >= 0, exactly 0 beyond the right endpoint for shape < 0",
        ok,
    )


def test_criterion_9_round_trips(tmp_path, shifted_matrix, shifted_model):
    # profiles: save -> load -> save, byte-identical
    p1 = save_profiles(shifted_matrix, tmp_path / "a")
    loaded = load_profiles(p1)
    p2 = save_profiles(loaded, tmp_path / "b")
    profiles_ok = (
        p1.read_bytes() == p2.read_bytes()
        and (tmp_path / "a" / "profiles.f32").read_bytes()
        == (tmp_path / "b" / "profiles.f32").read_bytes()
    )

    # tail model: save -> load -> save, byte-identical
    t1 = save_tail_model(shifted_model, tmp_path / "m1.json")
    t2 = save_tail_model(load_tail_model(t1), tmp_path / "m2.json")
    model_ok = t1.read_bytes() == t2.read_bytes()

    # CLI: a full run replayed from its manifest is bit-reproducible
    def digest(path):
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()

    weights = tmp_path / "w.bin"
    profiles_dir = tmp_path / "profiles"
    model_path = tmp_path / "tm.json"
    out_dir = tmp_path / "eval"
    assert cli_main(["toy", "train", "--seed", "3", "--epochs", "2", "--train-size", "96",
                     "--data-seed", "1", "--out", str(weights)]) == 0
    assert cli_main(["toy", "profiles", "--weights", str(weights), "--split", "shifted",
                     "--data-seed", "1", "--count", "64", "--out", str(profiles_dir)]) == 0
    assert cli_main(["fit", "--manifest", str(profiles_dir / "manifest.json"),
                     "--out", str(model_path)]) == 0
    assert cli_main(["eval", "--experiment", "prune", "--method", "pot",
                     "--weights", str(weights), "--model", str(model_path),
                     "--manifest", str(profiles_dir / "manifest.json"),
                     "--split", "shifted", "--data-seed", "1", "--count", "64",
                     "--max-filters", "5", "--attribution-k", "10",
                     "--out", str(out_dir)]) == 0
    outputs = [out_dir / "report.csv", out_dir / "attribution.csv", out_dir / "run_manifest.json"]
    before = [digest(p) for p in outputs]
    assert cli_main(["rerun", str(out_dir / "run_manifest.json")]) == 0
    cli_ok = before == [digest(p) for p in outputs]

    _verdict(
        9,
        f"byte-identical round trips (profiles {profiles_ok}, tail model {model_ok}, "
        f"CLI rerun {cli_ok})",
        profiles_ok and model_ok and cli_ok,
    )

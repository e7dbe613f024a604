import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest

from splitguard.errors import ConfigurationError
from splitguard.eval_harness import (CSV_FIELDS, ScenarioConfig, Workbench, derive_rng,
                                     downstream_robustness, execute, reports_to_csv, run_scenario,
                                     sweep, write_reports)

SMALL = ScenarioConfig(n_train=300, n_observe=200, n_benign=70, n_adversarial=30, classifier_epochs=1,
                       attack_epochs=2, detector_epochs=2, attack_latent_dim=4, latent_dim=4)


@pytest.fixture(scope="module")
def bench():
    return Workbench()


@pytest.fixture(scope="module")
def grid(bench):
    return sweep(SMALL, nus=[0.2, 0.5, 0.8], presets=["none", "moderate"], variants=["NA", "NU"], bench=bench)


def _rows(reports):
    return list(csv.DictReader(io.StringIO(reports_to_csv(reports))))


def test_config_validation():
    for bad in (dict(nu=1.5), dict(noise="loud"), dict(variant="XX"), dict(n_benign=0),
                dict(attacker_view="side"), dict(dataset="idx"), dict(model="vgg")):
        with pytest.raises(ConfigurationError):
            replace(SMALL, **bad)


def test_cardinality_and_order(grid):
    assert len(grid) == 12
    keys = [(r.config.noise, r.config.nu, r.config.variant) for r in grid]
    assert keys == [(p, v, var) for p in ("none", "moderate") for v in (0.2, 0.5, 0.8) for var in ("NA", "NU")]


def test_header_and_rates(grid):
    text = reports_to_csv(grid)
    assert text.splitlines()[0] == ",".join(CSV_FIELDS)
    for row in _rows(grid):
        for k in ("accuracy", "precision", "recall", "f1_anom", "balanced_acc", "auroc", "far", "dr",
                  "asr", "mean_conf"):
            assert 0 <= float(row[k]) <= 1
        assert row["latency_ms"] == ""


def test_metric_identities_on_rows(grid):
    for r in grid:
        assert r.balanced_accuracy == pytest.approx((r.dr + 1 - r.far) / 2, abs=1e-15)
        if r.precision + r.recall > 0:
            assert r.f1_anom == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))


def test_variants_see_identical_traffic(grid):
    na, nu = grid[0::2], grid[1::2]
    for a, b in zip(na, nu):
        assert (a.config.noise, a.config.nu) == (b.config.noise, b.config.nu)
        assert (a.asr, a.mean_confidence, a.delta_acc) == (b.asr, b.mean_confidence, b.delta_acc)


def test_none_preset_leaves_benign_accuracy(grid):
    assert all(r.delta_acc == 0 and r.rwcg_delta == 0 for r in grid if r.config.noise == "none")


def test_deterministic_across_workbenches(grid):
    again = sweep(SMALL, nus=[0.2, 0.5, 0.8], presets=["none", "moderate"], variants=["NA", "NU"])
    assert reports_to_csv(again) == reports_to_csv(grid)


def test_single_scenario_matches_sweep_cell(bench, grid):
    cfg = replace(SMALL, nu=0.5, noise="moderate", variant="NU")
    assert reports_to_csv([run_scenario(cfg, bench)]) == reports_to_csv([grid[9]])


def test_failed_cells_are_flagged(bench):
    reports = sweep(SMALL, cuts=["deep", "nowhere"], bench=bench)
    assert reports[0].error is None and reports[1].error is not None
    assert "error" in _rows(reports)[1]["degenerate_flags"]


def test_execute_exposes_stream(bench):
    run = execute(SMALL, bench)
    assert len(run.stream) == 100 and run.stream.adversarial.sum() == 30
    assert run.stream.noisy.sum() == 30  # moderate: f_n = 0.30
    assert run.report.blocked == int(run.flags.sum())
    assert np.array_equal(run.flags, run.scores > 0)


def test_latency_measured_on_request(bench):
    r = run_scenario(replace(SMALL, measure_latency=True), bench)
    assert r.latency_ms is not None and r.latency_ms > 0


def test_write_reports(tmp_path, grid):
    out = write_reports(grid[:2], tmp_path / "reports", "grid", stamp="20250101T000000")
    assert out == tmp_path / "reports" / "grid" / "20250101T000000"
    rows = json.loads((out / "report.json").read_text())
    assert list(rows[0]) == list(CSV_FIELDS)
    assert (out / "report.csv").read_text() == reports_to_csv(grid[:2])


def test_downstream_robustness_none_is_zero(bench):
    r = downstream_robustness(replace(SMALL, noise="none"), bench)
    assert r["delta_acc"] == 0 and r["accuracy_clean"] == r["accuracy_noisy"]


def test_derive_rng_stable():
    a = derive_rng(0, "x").random(3)
    assert np.array_equal(a, derive_rng(0, "x").random(3))
    assert not np.array_equal(a, derive_rng(0, "y").random(3))

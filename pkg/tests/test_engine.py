import logging
import math

import numpy as np
import pytest

from nova import defaults
from nova.engine import (
    RunConfig,
    attention_flops,
    compare_runs,
    intra_scale_attention_flops,
    kv_fill_flops,
    mlp_flops,
    mse_importance,
    predict_ledger,
    readout_flops,
    run_generation,
    run_report,
)
from nova.entropy import ActivationParams
from nova.errors import ConfigError, UsageError
from nova.model import ModelConfig, ScaleSchedule, build_model
from nova.scheduler import LinkageParams, SchedulerMode, scale_ratio
from conftest import WORKED_MEANS
from oracles import ledger_closed_form
from reference_dense import dense_generate

MODES = ["off", "nova", "scale_only", "layer_only", "fixed"]
LINEAR = tuple(float(t) for t in range(1, 11))


@pytest.fixture(scope="module")
def worked_nova(default_model_config, default_model):
    cfg = RunConfig(model=default_model_config, entropy_override=WORKED_MEANS)
    return run_generation(cfg, default_model)


def _run(model_cfg, model, **kw):
    return run_generation(RunConfig(model=model_cfg, **kw), model)


class TestLedgerFormulas:
    def test_single_token_hand_count(self):
        d = 8
        # q.k and p.v: 2*d each; four d x d projections of one row: 8*d^2
        assert attention_flops(1, 1, d, 2) == 4 * d + 8 * d * d
        assert mlp_flops(1, d, 4 * d) == 16 * d * d
        assert kv_fill_flops(3, d) == 12 * d * d
        assert readout_flops(5, d, 10) == 800

    def test_halving_queries_halves(self):
        for q in (2, 10, 64):
            assert 2 * attention_flops(q // 2, 300, 64, 4) == attention_flops(q, 300, 64, 4)

    def test_intra_scale_quadratic_drop(self):
        for n in (100, 256):
            kept = n // 2
            drop = 1 - intra_scale_attention_flops(kept, 64) / intra_scale_attention_flops(n, 64)
            assert drop == pytest.approx(0.75, abs=1e-12)
        # odd count rounds the kept set up
        assert intra_scale_attention_flops(85, 64) / intra_scale_attention_flops(169, 64) == \
            pytest.approx(85**2 / 169**2, abs=1e-15)


class TestDense:
    def test_bit_exact_against_reference(self, dense_run, default_model):
        ids, feature, logits = dense_generate(default_model)
        for tm, ref in zip(dense_run.tokens, ids):
            np.testing.assert_array_equal(tm.ids.reshape(-1), np.asarray(ref).reshape(-1))
        np.testing.assert_array_equal(dense_run.feature, feature)

    def test_ledger_matches_closed_form(self, dense_run, default_model_config):
        c = default_model_config
        sides = defaults.SCALE_SIDES
        expect = ledger_closed_form(sides, c.dim, c.vocab_size, c.layers, c.heads,
                                    [s * s for s in sides])
        assert dense_run.ledger.total == expect == 1128484864

    def test_off_never_prunes(self, dense_run):
        assert all(m.pruned.size == 0 for m in dense_run.masks.values())
        assert dense_run.plan.mean_ratio() == 0.0


# selectors other than entropy need a pruning mode
COMBOS = [("off", "entropy")] + [(m, s) for m in MODES[1:] for s in ("entropy", "attention", "mse")]


@pytest.mark.parametrize("mode, selector", COMBOS)
def test_ledger_soundness(mode, selector, default_model_config, default_model):
    r = _run(default_model_config, default_model, mode=mode, selector=selector,
             entropy_override=WORKED_MEANS)
    assert set(r.measured) == set(r.ledger.rows)
    for key, row in r.ledger.rows.items():
        assert r.measured[key] == row.total, key
    probes = [[(t, j) in r.layer_maps for j in range(1, 9)] for t in range(1, 11)]
    assert predict_ledger(default_model_config, r.plan.kept, probes).rows == r.ledger.rows
    for key, mask in r.masks.items():
        np.testing.assert_array_equal(r.query_rows[key], mask.kept)
    assert all(r.cache_dense.values())


class TestActivation:
    def test_worked_trace(self, worked_nova):
        assert worked_nova.t_star == 7 and worked_nova.activation == 8
        base = worked_nova.plan.base
        assert base[:7] == [0.0] * 7
        p = LinkageParams()
        for t in (8, 9, 10):
            g = WORKED_MEANS[t - 2] - WORKED_MEANS[t - 3]
            assert base[t - 1] == scale_ratio(t, 7, g, p)

    def test_no_pruning_before_activation(self, worked_nova):
        for (t, _), m in worked_nova.masks.items():
            if t < 8:
                assert m.pruned.size == 0

    def test_undetected_equals_dense(self, dense_run, default_model_config, default_model):
        r = _run(default_model_config, default_model, entropy_override=LINEAR)
        assert r.t_star is None and r.activation is None
        assert r.digest() == dense_run.digest()
        assert r.ledger.total == dense_run.ledger.total

    def test_layer_linkage_changes_plan(self, worked_nova, default_model_config, default_model):
        so = _run(default_model_config, default_model, mode="scale_only", entropy_override=WORKED_MEANS)
        assert so.plan.base == worked_nova.plan.base
        for t in (8, 9, 10):
            assert len(set(so.plan.kept[t - 1])) == 1
        assert any(len(set(worked_nova.plan.kept[t - 1])) > 1 for t in (8, 9, 10))


class TestWorkReduction:
    def test_all_modes_at_most_dense(self, dense_run, default_model_config, default_model):
        for mode in MODES[1:]:
            r = _run(default_model_config, default_model, mode=mode, entropy_override=WORKED_MEANS)
            assert r.ledger.total <= dense_run.ledger.total, mode

    def test_monotone_in_fixed_ratio(self, default_model_config, default_model):
        totals = []
        for r in (0.0, 0.2, 0.5, 0.8):
            ratios = (0.0,) * 7 + (r,) * 3
            totals.append(_run(default_model_config, default_model, mode="fixed",
                               fixed_ratios=ratios).ledger.total)
        assert totals == sorted(totals, reverse=True)
        assert len(set(totals)) == 4

    def test_fixed_golden(self, dense_run, default_model_config, default_model):
        r = _run(default_model_config, default_model, mode="fixed", fixed_ratios=(0.0,) * 7 + (0.5,) * 3)
        assert r.ledger.total == 660041728
        assert [r.plan.kept[t][0] for t in (7, 8, 9)] == [50, 85, 128]
        assert compare_runs(dense_run, r).speedup == pytest.approx(1.7097174559242412, abs=1e-12)


class TestSelectors:
    def test_mse_zero_on_constant(self):
        hidden = np.full((9, 4), 0.3)
        prior = np.full((2, 2, 4), 0.3)
        np.testing.assert_array_equal(mse_importance(hidden, prior, (3, 3)), np.zeros(9))

    def test_mse_oracle(self, rng):
        hidden = rng.normal(size=(4, 3))
        prior = rng.normal(size=(1, 1, 3))
        expect = ((hidden - prior.reshape(1, 3)) ** 2).mean(axis=1)
        np.testing.assert_allclose(mse_importance(hidden, prior, (2, 2)), expect, rtol=1e-14)

    def test_attention_fallback_logged(self, default_model_config, default_model, caplog):
        with caplog.at_level(logging.INFO, logger="nova.engine"):
            _run(default_model_config, default_model, mode="fixed", selector="attention")
        assert "falling back to entropy" in caplog.text

    def test_selectors_pick_different_sets(self, default_model_config, default_model):
        kept = {}
        for sel in ("entropy", "attention", "mse"):
            r = _run(default_model_config, default_model, mode="fixed", selector=sel)
            kept[sel] = r.masks[(10, 4)].kept.tolist()
        assert kept["entropy"] != kept["mse"]
        assert kept["entropy"] != kept["attention"]

    def test_shared_mask(self, default_model_config, default_model):
        r = _run(default_model_config, default_model, mode="fixed", shared_mask=True)
        for t in (8, 9, 10):
            first = r.masks[(t, 1)].kept
            for j in range(2, 9):
                np.testing.assert_array_equal(r.masks[(t, j)].kept, first)


class TestComparison:
    def test_reflexive(self, dense_run):
        c = compare_runs(dense_run, dense_run)
        assert c.speedup == 1.0 and c.mse == 0.0 and math.isinf(c.psnr)
        assert c.agreement == [1.0] * 10
        assert c.fidelity()["psnr"] is None

    def test_speedup_recomputed_from_reports(self, dense_run, worked_nova):
        a, b = run_report(dense_run), run_report(worked_nova)
        ratio = a["ledger"]["totals"]["total"] / b["ledger"]["totals"]["total"]
        assert compare_runs(dense_run, worked_nova).speedup == pytest.approx(ratio, abs=1e-12)
        assert sum(b["ledger"]["per_scale"]) == b["ledger"]["totals"]["total"]

    def test_different_models(self, dense_run, small_config):
        other = run_generation(RunConfig(model=small_config, activation=ActivationParams(t_est=3),
                                         mode="off"))
        with pytest.raises(UsageError):
            compare_runs(dense_run, other)


class TestConfigAndDeterminism:
    @pytest.mark.parametrize("kw, fld", [
        ({"selector": "random"}, "selector"),
        ({"selector": "mse", "mode": "off"}, "selector"),
        ({"sampling": "topk"}, "sampling"),
        ({"fixed_ratios": (0.5,) * 3}, "fixed_ratios"),
        ({"fixed_ratios": (0.99,) * 10}, "fixed_ratios"),
        ({"entropy_override": (1.0,)}, "entropy_override"),
        ({"mode": "warp"}, "mode"),
        ({"activation": ActivationParams(t_est=9)}, "t_est"),
    ])
    def test_rejected(self, kw, fld):
        with pytest.raises(ConfigError, match=fld):
            RunConfig(**kw)

    def test_model_config_mismatch(self, default_model, small_config):
        with pytest.raises(ConfigError, match="model"):
            run_generation(RunConfig(model=small_config, activation=ActivationParams(t_est=3)),
                           default_model)

    def test_repeatable(self, small_config):
        cfg = RunConfig(model=small_config, activation=ActivationParams(t_est=3), mode="fixed",
                        fixed_ratios=(0, 0, 0, 0.5, 0.5), sampling="categorical", sample_seed=9)
        a, b = run_generation(cfg), run_generation(cfg)
        assert a.digest() == b.digest() and a.ledger.rows == b.ledger.rows
        np.testing.assert_array_equal(a.feature, b.feature)
        c = run_generation(RunConfig(model=small_config, activation=ActivationParams(t_est=3),
                                     sampling="categorical", sample_seed=10, mode="fixed",
                                     fixed_ratios=(0, 0, 0, 0.5, 0.5)))
        assert c.digest() != a.digest()

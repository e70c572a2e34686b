import json

import numpy as np
import pytest

from stfusion import data as D
from stfusion import lab as L
from stfusion.errors import ContractError
from stfusion.gates import GateParams, ObjectiveConfig
from stfusion.model import (
    FusionStrategy,
    StrategyLayer,
    FusionUnitKind,
    TemplateConfig,
    build_template,
    strategy_from_literature,
)

CFG = TemplateConfig(
    num_blocks=1, layers_per_block=2, growth_channels=4, stem_channels=4,
    clip_shape=(1, 4, 8, 8), num_classes=2,
)


@pytest.fixture(scope="module")
def tiny_splits():
    spec = D.SynthSpec(mode="temporal_only", classes=2, clips_per_class=8,
                       clip_shape=(1, 4, 8, 8), noise_sigma=0.0)
    ds = D.generate_synthetic(spec, seed=0)
    return D.split(ds, 0.5, seed=0)


def make_eval(acc, mults=10, params=10, tag=0):
    strat = FusionStrategy(layers=[
        StrategyLayer(l=1, v=(True,), u=FusionUnitKind(tag % 3)),
        StrategyLayer(l=2, v=(True, True), u=FusionUnitKind.S_PLUS_ST),
    ])
    return L.StrategyEvaluation(strategy=strat, val_accuracy=acc,
                                active_param_count=params, mult_add_proxy=mults)


class TestRankCorrelation:
    def test_perfect_agreement(self):
        assert L.rank_correlation([0.1, 0.2, 0.3], [1.0, 2.0, 9.0]) == pytest.approx(1.0)

    def test_perfect_reversal(self):
        assert L.rank_correlation([1, 2, 3, 4], [8, 6, 4, 2]) == pytest.approx(-1.0)

    def test_hand_computed_single_swap(self):
        # ranks (1,2,3,4) vs (1,2,4,3): rho = 1 - 6*2/(4*15) = 0.8
        assert L.rank_correlation([1, 2, 3, 4], [1, 2, 4, 3]) == pytest.approx(0.8)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            L.rank_correlation([1, 2], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(ContractError):
            L.rank_correlation([1], [2])

    def test_constant_input_is_zero(self):
        assert L.rank_correlation([2, 2, 2], [1, 5, 3]) == 0.0

    def test_monotone_transform_invariance(self):
        a = [0.3, 0.9, 0.1, 0.5]
        b = [1.0, 4.0, 0.5, 2.0]
        assert L.rank_correlation(a, b) == L.rank_correlation(a, [np.exp(x) for x in b])


class TestSelectBest:
    def test_argmax(self):
        evals = [make_eval(0.5), make_eval(0.9), make_eval(0.7)]
        assert L.select_best(evals) is evals[1]

    def test_tie_prefers_cheaper_compute(self):
        evals = [make_eval(0.8, mults=20), make_eval(0.8, mults=5), make_eval(0.8, mults=12)]
        assert L.select_best(evals) is evals[1]

    def test_tie_then_fewer_params(self):
        evals = [make_eval(0.8, mults=5, params=40), make_eval(0.8, mults=5, params=20)]
        assert L.select_best(evals) is evals[1]

    def test_full_tie_keeps_first(self):
        evals = [make_eval(0.8), make_eval(0.8)]
        assert L.select_best(evals) is evals[0]

    def test_empty(self):
        with pytest.raises(ContractError):
            L.select_best([])


class TestSampling:
    def test_degenerate_posterior_always_full(self):
        net = build_template(CFG, seed=0)
        params = GateParams.for_config(CFG, init_drop=0.0)
        for lg in params.layers:
            lg.edge.data = np.float64(-60.0)
            lg.s.data = np.float64(-60.0)
            lg.st.data = np.float64(-60.0)
        full = strategy_from_literature("mixed_everywhere", CFG.total_layers)
        for strat in L.sample_strategies(net, params, 20, np.random.default_rng(0)):
            assert strat.to_json() == full.to_json()

    def test_count_and_determinism(self):
        net = build_template(CFG, seed=0)
        params = GateParams.for_config(CFG, init_drop=0.5)
        a = L.sample_strategies(net, params, 30, np.random.default_rng(7))
        b = L.sample_strategies(net, params, 30, np.random.default_rng(7))
        assert len(a) == 30
        assert [s.to_json() for s in a] == [s.to_json() for s in b]


class TestEvaluateStrategy:
    def _checksum(self, net):
        return float(sum(np.sum(p.data) for p in net.parameters())) + float(
            sum(np.sum(bn.running_mean) + np.sum(bn.running_var) for bn in net.batch_norms()))

    def test_full_strategy_matches_template(self, tiny_splits):
        train, val = tiny_splits
        net = build_template(CFG, seed=1)
        sched = L.TrainSchedule(warmup_epochs=2, main_epochs=0, batch_size=8, lr=0.05, seed=1)
        L.train_template(net, GateParams.for_config(CFG), train, val, sched,
                         ObjectiveConfig(k=1.0, n_train=len(train)))
        full = strategy_from_literature("mixed_everywhere", CFG.total_layers)
        ev = L.evaluate_strategy(net, full, val)
        assert ev.val_accuracy == L.template_accuracy(net, val)

    def test_evaluation_leaves_network_untouched(self, tiny_splits):
        train, val = tiny_splits
        net = build_template(CFG, seed=1)
        sched = L.TrainSchedule(warmup_epochs=1, main_epochs=0, batch_size=8, seed=1)
        L.train_template(net, GateParams.for_config(CFG), train, val, sched,
                         ObjectiveConfig(k=1.0, n_train=len(train)))
        before = self._checksum(net)
        strat = strategy_from_literature("top_heavy", CFG.total_layers)
        L.evaluate_strategy(net, strat, val)
        L.evaluate_strategy(net, strat, val, recalibrate=train)
        assert self._checksum(net) == before

    def test_repeat_evaluation_identical(self, tiny_splits):
        train, val = tiny_splits
        net = build_template(CFG, seed=2)
        sched = L.TrainSchedule(warmup_epochs=1, main_epochs=0, batch_size=8, seed=2)
        L.train_template(net, GateParams.for_config(CFG), train, val, sched,
                         ObjectiveConfig(k=1.0, n_train=len(train)))
        strat = strategy_from_literature("bottom_heavy", CFG.total_layers)
        a = L.evaluate_strategy(net, strat, val)
        b = L.evaluate_strategy(net, strat, val)
        assert (a.val_accuracy, a.active_param_count, a.mult_add_proxy) == \
               (b.val_accuracy, b.active_param_count, b.mult_add_proxy)

    def test_empty_val_rejected(self, tiny_splits):
        train, _ = tiny_splits
        net = build_template(CFG, seed=0)
        empty = D.ClipDataset(clips=train.clips[:0], labels=train.labels[:0], manifest=train.manifest)
        with pytest.raises(ContractError):
            L.evaluate_strategy(net, strategy_from_literature("top_heavy", 2), empty)


class TestTrainTemplate:
    def test_warmup_reduces_nll(self, tiny_splits):
        train, val = tiny_splits
        net = build_template(CFG, seed=3)
        sched = L.TrainSchedule(warmup_epochs=6, main_epochs=0, batch_size=8, lr=0.05, seed=3)
        hist = L.train_template(net, GateParams.for_config(CFG), train, val, sched,
                                ObjectiveConfig(k=1.0, n_train=len(train)))
        assert len(hist) == 6
        assert all(h["phase"] == "warmup" for h in hist)
        assert hist[-1]["nll"] < hist[0]["nll"]

    def test_history_schema_and_phases(self, tiny_splits):
        train, val = tiny_splits
        net = build_template(CFG, seed=4)
        sched = L.TrainSchedule(warmup_epochs=2, main_epochs=3, batch_size=8, lr=0.02,
                                lr_decay_epochs=(4,), seed=4)
        hist = L.train_template(net, GateParams.for_config(CFG), train, val, sched,
                                ObjectiveConfig(k=1.0, n_train=len(train)))
        assert [h["phase"] for h in hist] == ["warmup"] * 2 + ["main"] * 3
        assert [h["epoch"] for h in hist] == list(range(5))
        for h in hist:
            assert {"nll", "entropy_term", "weight_term", "total", "val_accuracy"} <= set(h)
        assert hist[2]["tau"] == 1.0 and abs(hist[4]["tau"] - 0.1) < 1e-12

    def test_bitwise_reproducible(self, tiny_splits):
        train, val = tiny_splits

        def run():
            net = build_template(CFG, seed=5)
            params = GateParams.for_config(CFG, init_drop=0.1)
            sched = L.TrainSchedule(warmup_epochs=2, main_epochs=2, batch_size=8, lr=0.02, seed=5)
            hist = L.train_template(net, params, train, val, sched,
                                    ObjectiveConfig(k=1.0, n_train=len(train)))
            return json.dumps(hist, sort_keys=True)

        assert run() == run()

    def test_empty_train_rejected(self, tiny_splits):
        train, val = tiny_splits
        net = build_template(CFG, seed=0)
        empty = D.ClipDataset(clips=train.clips[:0], labels=train.labels[:0], manifest=train.manifest)
        with pytest.raises(ContractError):
            L.train_template(net, GateParams.for_config(CFG), empty, val,
                             L.TrainSchedule(), ObjectiveConfig(k=1.0, n_train=1))


class TestTrainStandalone:
    def test_deterministic(self, tiny_splits):
        train, val = tiny_splits
        sched = L.TrainSchedule(warmup_epochs=0, main_epochs=3, batch_size=8, lr=0.05, seed=6)
        strat = strategy_from_literature("top_heavy", CFG.total_layers)
        a = L.train_standalone(strat, CFG, train, val, sched)
        b = L.train_standalone(strat, CFG, train, val, sched)
        assert a == b
        assert 0.0 <= a <= 1.0


class TestReports:
    def test_layer_preference_rows(self):
        params = GateParams.for_config(CFG, init_drop=0.25)
        best = strategy_from_literature("top_heavy", CFG.total_layers)
        report = L.layer_preference_report(params, best)
        assert [r.layer for r in report.rows] == [1, 2]
        for r in report.rows:
            assert r.freq_S + r.freq_ST + r.freq_SST + r.freq_skip == pytest.approx(1.0, abs=1e-12)
            assert r.eq7_S == pytest.approx(1 - np.sqrt(r.p_S), abs=1e-12)
            assert r.eq7_ST == pytest.approx(1 - np.sqrt(r.p_ST), abs=1e-12)
        assert [r.chosen_unit for r in report.rows] == ["S", "ST"]

    def test_preference_csv(self, tmp_path):
        params = GateParams.for_config(CFG, init_drop=0.25)
        best = strategy_from_literature("bottom_heavy", CFG.total_layers)
        path = tmp_path / "pref.csv"
        L.layer_preference_report(params, best).write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].split(",") == L.PreferenceReport.CSV_HEADER
        assert len(lines) == 1 + CFG.total_layers

    def test_evaluations_csv_sorted(self, tmp_path):
        evals = [make_eval(0.5, tag=0), make_eval(0.9, tag=1), make_eval(0.7, tag=2)]
        path = tmp_path / "evals.csv"
        L.write_evaluations_csv(evals, path)
        import csv as csvmod
        with open(path) as f:
            rows = list(csvmod.DictReader(f))
        accs = [float(r["val_accuracy"]) for r in rows]
        assert accs == sorted(accs, reverse=True)
        json.loads(rows[0]["strategy_json"])  # strategy column is valid JSON

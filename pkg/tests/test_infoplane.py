import json

import numpy as np
import pytest

from ibkit import datagen as dg
from ibkit import infoplane as ip
from ibkit import netlab as nl
from ibkit.prob import mi_from_table
from oracles import binning_naive


@pytest.fixture(scope="module")
def task():
    pset, rule = dg.generate_symmetric_rule(0)
    return nl.symmetric_dataset(pset, rule, 0.85, seed=0)


@pytest.fixture(scope="module")
def short_run(task):
    spec = nl.NetworkSpec(init_weight_std=0.2, seed=0)
    return nl.train(spec, nl.TrainConfig(epochs=30, n_snapshots=12), task)


def _traj(i_xt, i_ty, i_xy=np.nan):
    i_xt = np.asarray(i_xt, dtype=float)
    return ip.InfoPlaneTrajectory(np.arange(len(i_xt)), i_xt, np.asarray(i_ty, dtype=float), i_xy=i_xy)


class TestBinnedMi:
    @pytest.mark.parametrize("width", [1, 3, 5])
    def test_matches_naive_oracle(self, task, width):
        rng = np.random.default_rng(width)
        acts = np.tanh(rng.normal(scale=0.7, size=(4096, width)))
        pxy = task.joint_xy()
        i_xt, i_ty, clipped = ip.binned_mi(acts, pxy, ip.BinningConfig().edges())
        ox, oy = binning_naive.layer_mi(acts, pxy.tolist())
        assert clipped == 0
        assert (i_xt, i_ty) == (ox, oy)

    def test_trained_layers_match_oracle(self, task, short_run):
        cfg = ip.BinningConfig(markov=False)
        traj = ip.estimate_layer_mi(short_run, task, cfg)
        it = short_run.snapshot_iterations[-1]
        acts = nl.forward(short_run.snapshots[it], task.x, "tanh")
        pxy = task.joint_xy().tolist()
        for k, a in enumerate(acts):
            ox, oy = binning_naive.layer_mi(a, pxy)
            assert (traj.i_xt[-1, k], traj.i_ty[-1, k]) == (ox, oy)

    def test_coarsening_never_increases_ixt(self, task):
        rng = np.random.default_rng(0)
        acts = np.tanh(rng.normal(size=(4096, 4)))
        pxy = task.joint_xy()
        fine = ip.binned_mi(acts, pxy, ip.BinningConfig(n_bins=30).edges())
        coarse = ip.binned_mi(acts, pxy, ip.BinningConfig(n_bins=15).edges())
        assert coarse[0] <= fine[0] + 1e-12
        assert coarse[1] <= fine[1] + 1e-12

    def test_injective_representation_gives_12_bits(self, task):
        acts = task.x * 0.9        # the +-1 inputs land in distinct bin tuples
        i_xt, i_ty, _ = ip.binned_mi(acts, task.joint_xy(), ip.BinningConfig().edges())
        assert i_xt == pytest.approx(12.0, abs=1e-12)
        assert i_ty == pytest.approx(mi_from_table(task.joint_xy()), abs=1e-12)

    def test_saturated_representation_gives_zero(self, task):
        acts = np.full((4096, 3), 0.999)
        i_xt, i_ty, _ = ip.binned_mi(acts, task.joint_xy(), ip.BinningConfig().edges())
        assert i_xt == 0.0 and i_ty == pytest.approx(0.0, abs=1e-15)

    def test_clipping_counted(self):
        idx, clipped = ip.discretize(np.array([-2.0, 0.0, 2.0]), ip.BinningConfig(n_bins=4).edges())
        np.testing.assert_array_equal(idx, [0, 2, 3])
        assert clipped == 2

    def test_nested_edges(self):
        cfg = ip.BinningConfig(n_bins=30)
        np.testing.assert_array_equal(cfg.edges(n=15), cfg.edges()[::2])

    @pytest.mark.parametrize("kw", [dict(n_bins=1), dict(lo=1.0, hi=1.0), dict(propagate_bins=1)])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            ip.BinningConfig(**kw)


class TestTrajectory:
    def test_markov_binning_satisfies_dpi(self, task, short_run):
        traj = ip.estimate_layer_mi(short_run, task)
        assert ip.dpi_check(traj).ok()
        assert traj.i_xy == pytest.approx(mi_from_table(task.joint_xy()))
        assert traj.i_xt.shape == (len(short_run.snapshots), 6)

    def test_csv_round_trip(self, task, short_run, tmp_path):
        traj = ip.estimate_layer_mi(short_run, task, iterations=short_run.snapshot_iterations[:3])
        traj.to_csv(tmp_path / "t.csv")
        back = ip.InfoPlaneTrajectory.from_csv(tmp_path / "t.csv")
        np.testing.assert_array_equal(back.iterations, traj.iterations)
        np.testing.assert_array_equal(back.i_xt, traj.i_xt)
        np.testing.assert_array_equal(back.i_ty, traj.i_ty)

    def test_adaptive_range(self, task):
        spec = nl.NetworkSpec(activation="relu", init_weight_std=1.0)
        run = nl.train(spec, nl.TrainConfig(epochs=2, n_snapshots=3), task)
        traj = ip.estimate_layer_mi(run, task, ip.BinningConfig(adaptive=True))
        assert np.all(traj.i_xt >= 0) and np.all(traj.i_xt <= 12 + 1e-12)


class TestDpiCheck:
    def test_detects_planted_violation(self):
        traj = _traj([[5.0, 4.0, 4.5]], [[0.9, 0.8, 0.7]], i_xy=0.95)
        rep = ip.dpi_check(traj)
        assert not rep.ok()
        assert rep.x_chain_violation == pytest.approx(0.5)
        assert rep.worst == ("x", 0, 2)

    def test_y_source_violation(self):
        traj = _traj([[5.0, 4.0]], [[0.99, 0.7]], i_xy=0.9)
        rep = ip.dpi_check(traj)
        assert rep.y_chain_violation == pytest.approx(0.09)
        assert rep.worst == ("y", 0, 0)
        assert ip.dpi_check(traj, include_source=False).ok()

    def test_needs_two_layers(self):
        with pytest.raises(ValueError):
            ip.dpi_check(_traj([[1.0]], [[0.5]]))


class TestPhaseDetection:
    def test_planted_snr_step(self):
        snr = np.r_[np.full(50, 10.0), np.full(50, 0.1)]
        t = ip.detect_snr_transition(snr)
        assert abs(t - 50) <= 1

    def test_flat_snr_has_no_transition(self):
        assert ip.detect_snr_transition(np.full(100, 3.0)) is None

    def test_log_binned_transition(self):
        its = np.arange(1, 10_001)
        snr = np.where(its < 1000, 5.0, 0.05)
        t = ip.detect_snr_transition(snr, its, log_bins=40)
        assert 700 < t < 1400

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            ip.detect_snr_transition(np.ones(5))

    def test_planted_onset(self):
        series = np.r_[np.linspace(1, 5, 8), np.linspace(4.5, 2.0, 20)]
        assert ip.detect_compression_onset(series) == 7

    def test_onset_with_iterations(self):
        series = np.r_[np.linspace(1, 5, 8), np.linspace(4.5, 2.0, 20)]
        its = np.arange(28) * 10
        assert ip.detect_compression_onset(series, iterations=its) == 70

    def test_monotone_series_has_no_onset(self):
        assert ip.detect_compression_onset(np.linspace(0, 3, 30)) is None

    def test_brief_dip_is_not_onset(self):
        series = np.r_[np.linspace(1, 5, 10), [4.0, 4.0], np.full(18, 5.0)]
        assert ip.detect_compression_onset(series) is None

    def test_onset_from_trajectory_uses_deepest_hidden_layer(self):
        n = 25
        a = np.r_[np.linspace(1, 5, 10), np.linspace(4.5, 2, n - 10)]
        i_xt = np.c_[np.full(n, 9.0), a, np.full(n, 1.0)]
        traj = ip.InfoPlaneTrajectory(np.arange(n) * 100, i_xt, np.zeros((n, 3)))
        assert ip.detect_compression_onset(traj) == 900


class TestCorrelation:
    def test_perfect_linear(self):
        pairs = [(2.0 * x + 3, x) for x in (10, 20, 40, 80, 160)]
        c = ip.correlate_transitions(pairs)
        assert c.pearson_r == pytest.approx(1.0)
        assert c.slope == pytest.approx(2.0)
        assert c.intercept == pytest.approx(3.0)

    def test_missing_pairs_dropped(self):
        pairs = [(1, 1), (2, 2), (None, 5), (3, 3.5), (4, None), (5, 4.5)]
        assert len(ip.correlate_transitions(pairs).pairs) == 4

    def test_uncorrelated_control(self):
        rng = np.random.default_rng(1)
        pairs = list(zip(rng.normal(size=200), rng.normal(size=200)))
        assert abs(ip.correlate_transitions(pairs).pearson_r) < 0.2

    def test_too_few_or_degenerate(self):
        with pytest.raises(ValueError):
            ip.correlate_transitions([(1, 1), (2, 2), (3, 3)])
        with pytest.raises(ValueError):
            ip.correlate_transitions([(1, 1), (1, 2), (1, 3), (1, 4)])


class TestRunHelpers:
    def test_run_snr_transition_is_median_of_layers(self, short_run):
        per = []
        for k in range(short_run.spec.n_layers):
            its, snr = nl.gradient_snr_series(short_run, k)
            t = ip.detect_snr_transition(snr, its, log_bins=20)
            if t is not None:
                per.append(t)
        got = ip.run_snr_transition(short_run, log_bins=20)
        if per:
            assert got == pytest.approx(float(np.median(per)))
        else:
            assert got is None

    def test_layer_channel(self, task, short_run):
        params = short_run.snapshots[short_run.snapshot_iterations[-1]]
        traj = ip.estimate_layer_mi(short_run, task, iterations=[short_run.snapshot_iterations[-1]])
        for layer in (0, 3, 5):
            enc, dec, prob = ip.layer_channel(params, task, "tanh", layer)
            np.testing.assert_array_equal(enc.sum(1), 1.0)
            np.testing.assert_allclose(dec.sum(1), 1.0)
            pxt = enc * task.joint_xy().sum(1)[:, None]
            assert mi_from_table(pxt) == pytest.approx(traj.i_xt[0, layer], abs=1e-10)
            pty = pxt.sum(0)[:, None] * dec
            assert mi_from_table(pty) == pytest.approx(traj.i_ty[0, layer], abs=1e-10)
            assert prob.cardinality_t == enc.shape[1]
        with pytest.raises(IndexError):
            ip.layer_channel(params, task, "tanh", 6)

    def test_phase_report_json(self, tmp_path):
        ip.save_phase_report(tmp_path / "p.json", a=np.int64(3), b=np.arange(2), c=None,
                             d=ip.TransitionCorrelation(1.0, 2.0, 0.0, [(1.0, 2.0)]))
        d = json.loads((tmp_path / "p.json").read_text())
        assert d["a"] == 3 and d["b"] == [0, 1] and d["c"] is None
        assert d["d"]["slope"] == 2.0

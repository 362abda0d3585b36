"""The training loop: accounting, invariance, early stopping, rungs."""

import numpy as np
import pytest

from nasopt import autodiff as ad
from nasopt import builder as nb
from nasopt import objectives as obj
from nasopt import trainer as tr

from conftest import chain_genotype


def make_net(batch_code=1, dim=5, seed=1):
    cfg = nb.BuildConfig(dim=dim, num_cells=1, channels=4, input_size=14,
                         num_sol=40)
    net = nb.build(chain_genotype(batch_code=batch_code),
                   nb.BuildConfig(dim=dim, num_cells=1, channels=4,
                                  input_size=14, num_sol=40))
    nb.init_weights(net, seed=seed)
    batch = nb.InputBatch(40, 14, seed=seed + 70)
    return net, batch


class TestAccounting:
    def test_two_epochs_consume_twice_num_sol(self):
        for bcode in (0, 1):
            net, batch = make_net(batch_code=bcode)
            o = obj.SphereObjective(5)
            rep = tr.train(net, o, batch, tr.TrainConfig(max_epochs=2))
            assert rep.evals == 2 * 40
            assert o.evals == rep.evals

    def test_reported_evals_match_counter_delta(self):
        net, batch = make_net()
        o = obj.SphereObjective(5)
        o.value(np.zeros(5))                      # pre-existing usage
        before = o.evals
        rep = tr.train(net, o, batch, tr.TrainConfig(max_epochs=3))
        assert o.evals - before == rep.evals

    def test_eval_budget_hard_cap(self):
        net, batch = make_net()
        o = obj.SphereObjective(5)
        rep = tr.train(net, o, batch,
                       tr.TrainConfig(max_epochs=50, eval_budget=95))
        assert rep.evals == 95
        assert o.evals == 95
        assert rep.stop_reason == "budget"

    def test_f_best_nonincreasing(self):
        net, batch = make_net()
        rep = tr.train(net, obj.SphereObjective(5), batch,
                       tr.TrainConfig(max_epochs=6))
        diffs = np.diff(rep.epoch_bests)
        assert np.all(diffs <= 0)
        assert rep.f_best == rep.epoch_bests[-1]


class TestFstarInvariance:
    def test_shift_leaves_trajectory_bit_identical(self):
        # the reference value only offsets the printed loss
        reports = []
        weights = []
        for fstar in (0.0, 1e6):
            net, batch = make_net(seed=9)
            o = obj.SphereObjective(5)
            rep = tr.train(net, o, batch,
                           tr.TrainConfig(max_epochs=3, fstar=fstar))
            reports.append(rep)
            weights.append({n: net.store.params[n].copy()
                            for n in net.store.names()})
        np.testing.assert_array_equal(reports[0].x_best, reports[1].x_best)
        assert reports[0].f_best == reports[1].f_best
        for name in weights[0]:
            np.testing.assert_array_equal(weights[0][name], weights[1][name])
        # while the recorded losses differ by exactly fstar
        np.testing.assert_allclose(
            np.array(reports[0].loss_history) - np.array(reports[1].loss_history),
            1e6, rtol=1e-12)


class TestEarlyStop:
    def test_flat_history_halts(self):
        assert tr.early_stop_check([10.0, 10.0], 0.01)

    def test_clear_improvement_continues(self):
        assert not tr.early_stop_check([10.0, 8.0], 0.01)

    def test_geometric_decay_just_under_psi(self):
        psi = 0.01
        b0 = 0.5                                  # below 1: absolute regime
        history = [b0, b0 * (1 - psi * 1.9)]      # improvement ~0.95*psi
        assert tr.early_stop_check(history, psi)

    def test_needs_two_entries(self):
        with pytest.raises(ValueError):
            tr.early_stop_check([1.0], 0.01)

    def test_train_applies_psi_each_epoch(self):
        net, batch = make_net()
        # psi so large every epoch "fails" the improvement test
        rep = tr.train(net, obj.SphereObjective(5), batch,
                       tr.TrainConfig(max_epochs=50, psi=1e9))
        assert rep.epochs_run == 2
        assert rep.stop_reason == "early-stop"


class TestBudgetedTrain:
    def test_rung_schedule_arithmetic(self):
        assert tr.rung_schedule(5, 3, 200) == [5, 15, 45, 135, 200]
        assert tr.rung_schedule(5, 3, 5) == [5]
        assert tr.rung_schedule(2, 4, 100) == [2, 8, 32, 100]

    def test_plateau_stops_at_first_rung(self):
        net, batch = make_net()
        # an impossible improvement threshold plateaus immediately
        cfg = tr.TrainConfig(max_epochs=200, psi=1e9, rung_epochs=5,
                             max_budget_epochs=200)
        rep = tr.budgeted_train(net, obj.SphereObjective(5), batch, cfg)
        assert rep.epochs_run == 5
        assert rep.stop_reason == "early-stop"

    def test_improving_run_reaches_cap(self):
        net, batch = make_net(batch_code=0)
        cfg = tr.TrainConfig(max_epochs=12, psi=0.0, rung_epochs=2,
                             max_budget_epochs=12)
        rep = tr.budgeted_train(net, obj.SphereObjective(5), batch, cfg)
        assert rep.epochs_run == 12
        assert rep.stop_reason == "max-epochs"

    def test_budget_cap_inside_rung(self):
        net, batch = make_net()
        cfg = tr.TrainConfig(max_epochs=200, rung_epochs=5,
                             max_budget_epochs=200, eval_budget=135)
        rep = tr.budgeted_train(net, obj.SphereObjective(5), batch, cfg)
        assert rep.evals == 135
        assert rep.stop_reason == "budget"


class TestNumericAbort:
    class ExplodingObjective(obj.Objective):
        def __init__(self):
            super().__init__("exploding", 3, -100.0, 100.0)
            self.calls = 0

        def _value_batch(self, xs):
            self.calls += xs.shape[0]
            if self.calls > 60:
                return np.full(xs.shape[0], np.nan)
            return np.sum(xs ** 2, axis=1)

        def _gradient_batch(self, xs):
            return 2.0 * xs

    def test_abort_preserves_best(self):
        net, batch = make_net(dim=3)
        o = self.ExplodingObjective()
        with pytest.raises(tr.TrainAbort) as err:
            tr.train(net, o, batch, tr.TrainConfig(max_epochs=10))
        rep = err.value.report
        assert np.isfinite(rep.f_best)
        assert rep.x_best is not None
        assert rep.stop_reason == "aborted"


class TestDeterminism:
    def test_same_seeds_same_run(self):
        outs = []
        for _ in range(2):
            net, batch = make_net(seed=33)
            rep = tr.train(net, obj.SphereObjective(5), batch,
                           tr.TrainConfig(max_epochs=3))
            outs.append((rep.f_best, tuple(rep.loss_history),
                         net.store.params["head_w"].copy()))
        assert outs[0][0] == outs[1][0]
        assert outs[0][1] == outs[1][1]
        np.testing.assert_array_equal(outs[0][2], outs[1][2])

    def test_frozen_params_bit_identical_after_train(self):
        net, batch = make_net()
        nb.freeze_body(net)
        before = {n: net.store.params[n].copy() for n in net.body_names()}
        tr.train(net, obj.SphereObjective(5), batch,
                 tr.TrainConfig(max_epochs=4))
        for name, arr in before.items():
            np.testing.assert_array_equal(net.store.params[name], arr)


class TestBatchOverride:
    def test_override_changes_step_count(self):
        net, batch = make_net(batch_code=1)
        o = obj.SphereObjective(5)
        rep = tr.train(net, o, batch,
                       tr.TrainConfig(max_epochs=1, batch_size=1))
        # one epoch at batch 1 still consumes exactly num_sol evals
        assert rep.evals == 40

"""Freeze schedules, optimizers, and the training loop contract."""

import numpy as np
import pytest

from hierpath.errors import ConfigError, NumericError, UsageError
from hierpath.model import build_bundle
from hierpath.tensor import Tensor
from hierpath.training import (Adam, Phase, SgdMomentum, TrainState,
                               TrainingSchedule, _clip_gradients, component_of,
                               default_alternating_schedule, evaluate, fit,
                               joint_schedule, make_optimizer, parameter_hash,
                               train_epoch)
from hierpath.tree import enumerate_paths

from conftest import toy_config

rng = np.random.default_rng(77)


def make_samples(tree, n, multilabel=False, seed=0):
    local = np.random.default_rng(seed)
    pool = enumerate_paths(tree, leaves_only=True)
    samples = []
    for i in range(n):
        img = local.uniform(0.0, 1.0, (3, 16, 16))
        k = int(local.integers(1, 3)) if multilabel else 1
        paths = [pool[int(local.integers(len(pool)))] for _ in range(k)]
        samples.append((img, paths, f"s{i:03d}"))
    return samples


# -- schedules ---------------------------------------------------------------


def test_alternating_schedule_shape():
    sched = default_alternating_schedule(8)
    assert [p.epochs for p in sched.phases] == [2, 2, 4]
    assert sched.total_epochs == 8
    assert sched.phase_at(0).frozen == {"cnn"}
    assert sched.phase_at(3).frozen == {"head"}
    assert sched.phase_at(7).frozen == frozenset()
    assert sched.phase_at(99) is sched.phases[-1]


def test_alternating_schedule_minimum():
    sched = default_alternating_schedule(3)
    assert [p.epochs for p in sched.phases] == [1, 1, 1]
    with pytest.raises(UsageError):
        default_alternating_schedule(2)


def test_joint_schedule():
    sched = joint_schedule(5)
    assert len(sched.phases) == 1 and sched.total_epochs == 5


def test_all_frozen_phase_rejected():
    with pytest.raises(ConfigError):
        TrainingSchedule([Phase(1, frozenset({"cnn", "head"}))])


def test_component_of():
    assert component_of("cnn.block0.weight") == "cnn"
    assert component_of("head.proj.w") == "head"
    with pytest.raises(ConfigError):
        component_of("decoder.w")


# -- optimizers --------------------------------------------------------------


def test_sgd_momentum_on_quadratic():
    x = Tensor(np.array([5.0]), requires_grad=True)
    opt = SgdMomentum(lr=0.1, momentum=0.9)
    for _ in range(200):
        x.zero_grad()
        (x * x).sum().backward()
        opt.step({"x": x})
    assert abs(float(x.data[0])) < 1e-3


def test_adam_on_quadratic():
    x = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam(lr=0.2)
    for _ in range(200):
        x.zero_grad()
        (x * x).sum().backward()
        opt.step({"x": x})
    assert abs(float(x.data[0])) < 1e-2


def test_make_optimizer_rejects_unknown():
    with pytest.raises(ConfigError):
        make_optimizer(TrainingSchedule([Phase(1, frozenset())], optimizer="lbfgs"))


def test_gradient_clipping_scales_to_max_norm():
    t = Tensor(np.zeros(4), requires_grad=True)
    t._grad = np.array([3.0, 4.0, 0.0, 0.0])  # norm 5
    _clip_gradients({"t": t}, 1.0)
    assert abs(np.linalg.norm(t.grad) - 1.0) < 1e-12
    t._grad = np.array([0.1, 0.0, 0.0, 0.0])
    _clip_gradients({"t": t}, 1.0)  # under the cap: untouched
    assert t.grad[0] == 0.1


# -- freeze contract ---------------------------------------------------------


def test_frozen_component_hash_is_stable(fixed12_tree):
    samples = make_samples(fixed12_tree, 8)
    sched = TrainingSchedule([Phase(1, frozenset({"cnn"})),
                              Phase(1, frozenset({"head"})),
                              Phase(1, frozenset())], batch_size=4, lr=0.05)
    bundle = build_bundle(toy_config(), fixed12_tree, seed=0)
    state = TrainState()

    before = {c: parameter_hash(bundle, c) for c in ("cnn", "head")}
    train_epoch(bundle, samples, sched, state)  # cnn frozen
    after1 = {c: parameter_hash(bundle, c) for c in ("cnn", "head")}
    assert after1["cnn"] == before["cnn"]
    assert after1["head"] != before["head"]

    train_epoch(bundle, samples, sched, state)  # head frozen
    after2 = {c: parameter_hash(bundle, c) for c in ("cnn", "head")}
    assert after2["head"] == after1["head"]
    assert after2["cnn"] != after1["cnn"]

    train_epoch(bundle, samples, sched, state)  # nothing frozen
    after3 = {c: parameter_hash(bundle, c) for c in ("cnn", "head")}
    assert after3["cnn"] != after2["cnn"]
    assert after3["head"] != after2["head"]


def test_zero_lr_moves_nothing(fixed12_tree):
    samples = make_samples(fixed12_tree, 4)
    sched = joint_schedule(1, lr=0.0, batch_size=4)
    bundle = build_bundle(toy_config(), fixed12_tree, seed=0)
    before = {c: parameter_hash(bundle, c) for c in ("cnn", "head")}
    fit(bundle, samples, sched)
    assert {c: parameter_hash(bundle, c) for c in ("cnn", "head")} == before


def test_seeded_runs_are_bit_identical(fixed12_tree):
    samples = make_samples(fixed12_tree, 8)
    hashes = []
    for _ in range(2):
        bundle = build_bundle(toy_config(), fixed12_tree, seed=11)
        sched = default_alternating_schedule(3, batch_size=4, seed=5)
        state = fit(bundle, samples, sched)
        hashes.append((parameter_hash(bundle, "cnn"),
                       parameter_hash(bundle, "head"),
                       tuple(r["loss"] for r in state.history)))
    assert hashes[0] == hashes[1]


def test_nonfinite_loss_raises_numeric_error(fixed12_tree):
    samples = make_samples(fixed12_tree, 4)
    bundle = build_bundle(toy_config(), fixed12_tree, seed=0)
    bundle.head.parameters()["proj.w"].data[:] = np.nan
    with pytest.raises(NumericError):
        train_epoch(bundle, samples, joint_schedule(1, batch_size=4), TrainState())


# -- loop bookkeeping --------------------------------------------------------


def test_fit_history_and_best_epoch(fixed12_tree):
    train = make_samples(fixed12_tree, 8)
    val = make_samples(fixed12_tree, 4, seed=1)
    bundle = build_bundle(toy_config(), fixed12_tree, seed=2)
    seen = []
    state = fit(bundle, train, default_alternating_schedule(3, batch_size=4),
                val_samples=val, log=seen.append)
    assert len(state.history) == 3 == len(seen)
    assert state.history[0]["frozen"] == ["cnn"]
    assert all("val_metric" in r for r in state.history)
    assert state.best_epoch in range(3)
    assert state.best_metric == max(r["val_metric"] for r in state.history)
    assert bundle.step_count == state.step > 0


def test_evaluate_reports_and_mode_check(fixed12_tree, var9_tree):
    bundle = build_bundle(toy_config(), fixed12_tree, seed=0)
    samples = make_samples(fixed12_tree, 4)
    reports = evaluate(bundle, samples)
    assert set(reports) == {"path_accuracy", "node_accuracy"}
    assert 0.0 <= reports["path_accuracy"].score <= 1.0
    with pytest.raises(ConfigError):
        evaluate(bundle, samples, mode="general")


def test_multilabel_evaluate_needs_threshold_source(var9_tree):
    cfg = toy_config(type="s2s")
    cfg["loss"] = {"multilabel": True}
    bundle = build_bundle(cfg, var9_tree, seed=0)
    samples = make_samples(var9_tree, 4, multilabel=True)
    with pytest.raises(ConfigError):
        evaluate(bundle, samples)
    reports = evaluate(bundle, samples, threshold=0.5)
    assert set(reports) == {"path_f1", "node_f1"}
    assert reports["path_f1"].threshold == 0.5


def test_multilabel_evaluate_tunes_on_validation(var9_tree):
    cfg = toy_config(type="s2s")
    cfg["loss"] = {"multilabel": True}
    bundle = build_bundle(cfg, var9_tree, seed=0)
    samples = make_samples(var9_tree, 4, multilabel=True)
    val = make_samples(var9_tree, 4, multilabel=True, seed=3)
    reports = evaluate(bundle, samples, val_samples=val, threshold_grid=0.1)
    assert reports["path_f1"].threshold is not None
    assert 0.0 <= reports["path_f1"].threshold <= 1.0

import itertools

import numpy as np
import pytest
from conftest import rotation_vectors
from hypothesis import given
from hypothesis import strategies as st

from pnec.geometry import so3_exp, so3_log
from pnec.learning import (
    AdamState,
    TrainingDivergedError,
    TripletLossConfig,
    adam_step,
    anchor_loss,
    cycle_loss,
    diverse_config,
    overfit_config,
    self_supervised_loss,
    self_supervised_rotation_grads,
    supervised_loss,
    trace_normalized_error,
    train_covariances,
)
from pnec.metrics import e_rot
from pnec.synthgen import SceneConfig

# ---------------------------------------------------------------- ADAM


def _reference_adam(x, grads, lr, b1, b2, eps):
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**k)) / ((v / (1 - b2**k)) ** 0.5 + eps)
    return x


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    new, st_ = adam_step(AdamState(lr=0.1), p, np.zeros(3))
    assert np.array_equal(new, p)
    assert st_.step == 1


@given(g=st.floats(-100, 100).filter(lambda v: abs(v) > 1e-6), lr=st.floats(1e-5, 1.0))
def test_adam_first_step_closed_form(g, lr):
    new, _ = adam_step(AdamState(lr=lr), np.array([0.0]), np.array([g]))
    assert abs(new[0]) == pytest.approx(lr * abs(g) / (abs(g) + 1e-8), rel=1e-12)
    assert np.sign(new[0]) == -np.sign(g)


def test_adam_ten_steps_match_reference():
    grads = [0.3, -1.2, 0.5, 2.0, -0.1, 0.0, 0.7, -0.4, 1.1, 0.9]
    state = AdamState(lr=0.01, beta1=0.9, beta2=0.99, eps=1e-8)
    x = np.array([0.25])
    for g in grads:
        x, state = adam_step(state, x, np.array([g]))
    assert x[0] == pytest.approx(_reference_adam(0.25, grads, 0.01, 0.9, 0.99, 1e-8), abs=1e-12)
    assert state.step == 10


def test_adam_rejects_non_finite_gradient():
    p = np.array([1.0, 2.0])
    state = AdamState(lr=0.1)
    new, s2 = adam_step(state, p, np.array([np.nan, 1.0]))
    assert np.array_equal(new, p)
    assert s2.rejected == 1 and s2.step == 0


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), np.zeros(3), np.zeros(2))


# ---------------------------------------------------------------- losses


def test_supervised_loss_examples():
    R = so3_exp(np.array([0.1, 0.2, 0.3]))
    assert supervised_loss(R, R) == pytest.approx(0.0, abs=1e-12)
    Rz = so3_exp(np.array([0.0, 0.0, np.deg2rad(10.0)])) @ R
    assert supervised_loss(Rz, R) == pytest.approx(np.deg2rad(10.0), abs=1e-12)


@given(a=rotation_vectors(), b=rotation_vectors())
def test_supervised_loss_is_e_rot(a, b):
    Ra, Rb = so3_exp(a), so3_exp(b)
    assert supervised_loss(Ra, Rb) == e_rot(Ra, Rb)


def test_self_supervised_consistent_triple_is_zero():
    R12 = so3_exp(np.array([0.1, -0.2, 0.05]))
    R23 = so3_exp(np.array([-0.03, 0.2, 0.1]))
    R31 = (R12 @ R23).T
    poses = (R12, R23, R31)
    assert self_supervised_loss(poses, poses) == pytest.approx(0.0, abs=1e-7)


def test_self_supervised_cycle_example():
    R31 = so3_exp(np.array([0.0, 0.0, np.deg2rad(10.0)]))
    poses = (np.eye(3), np.eye(3), R31)
    loss = self_supervised_loss(poses, poses, TripletLossConfig(lambda_anchor=0.0))
    assert loss == pytest.approx(np.deg2rad(10.0), abs=1e-12)


@given(ws=st.lists(rotation_vectors(), min_size=6, max_size=6))
def test_self_supervised_term_by_term(ws):
    Rs = [so3_exp(w) for w in ws]
    poses, anchors = Rs[:3], Rs[3:]
    expected = np.linalg.norm(so3_log(poses[0] @ poses[1] @ poses[2]))
    expected += sum(np.linalg.norm(so3_log(P @ A.T)) for P, A in zip(poses, anchors))
    got = self_supervised_loss(poses, anchors, TripletLossConfig(1.0))
    assert got == pytest.approx(expected, abs=1e-9)
    assert got >= 0
    assert cycle_loss(*poses) >= 0 and anchor_loss(poses, anchors) >= 0


def test_triplet_config_rejects_negative_lambda():
    with pytest.raises(ValueError):
        TripletLossConfig(-1.0)


def test_large_anchor_weight_pins_estimates_to_anchors():
    # grid over rotations about z for each pose; the anchors sit on the grid
    angles = np.deg2rad(np.arange(-4.0, 5.0, 2.0))
    grid = [so3_exp(np.array([0.0, 0.0, a])) for a in angles]
    anchors = (grid[3], grid[1], grid[2])  # their composition is not the identity
    cfg = TripletLossConfig(lambda_anchor=1e6)
    best = min(itertools.product(range(len(grid)), repeat=3),
               key=lambda ijk: self_supervised_loss([grid[i] for i in ijk], anchors, cfg))
    assert best == (3, 1, 2)


def test_self_supervised_rotation_grads_finite_differences():
    rng = np.random.default_rng(5)
    poses = [so3_exp(0.3 * rng.normal(size=3)) for _ in range(3)]
    anchors = [so3_exp(0.1 * rng.normal(size=3)) @ P for P in poses]
    cfg = TripletLossConfig(0.7)
    grads = self_supervised_rotation_grads(poses, anchors, cfg)
    h = 1e-6
    for k in range(3):
        fd = []
        for e in np.eye(3):
            plus = list(poses)
            minus = list(poses)
            plus[k] = so3_exp(h * e) @ poses[k]
            minus[k] = so3_exp(-h * e) @ poses[k]
            fd.append((self_supervised_loss(plus, anchors, cfg) - self_supervised_loss(minus, anchors, cfg)) / (2 * h))
        assert np.allclose(grads[k], fd, atol=1e-7)


# ---------------------------------------------------------------- trace-normalized error


def test_trace_normalized_error_is_scale_free():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 2, 2))
    C = A @ np.swapaxes(A, -1, -2) + 0.1 * np.eye(2)
    assert np.allclose(trace_normalized_error(3.7 * C, C), 0.0, atol=1e-14)
    assert np.all(trace_normalized_error(np.broadcast_to(np.eye(2), C.shape), C) > 0)


# ---------------------------------------------------------------- training loop

SMALL = dict(n_problems=96, batch_size=96, epochs=3, evaluate_baselines=False)


def _small_scene(mode, **kw):
    return SceneConfig(n_points=20, pose_mode=mode, seed=2, **kw)


def test_zero_learning_rate_gives_flat_curve():
    rec = train_covariances(overfit_config(scene=_small_scene("fixed"), lr=0.0, **SMALL))
    errs = [e.mean_e_rot for e in rec.epochs]
    assert len(errs) == 4
    assert all(e == errs[0] for e in errs)


def test_training_is_deterministic():
    cfg = overfit_config(scene=_small_scene("fixed"), lr=0.05, **SMALL)
    a, b = train_covariances(cfg), train_covariances(cfg)
    assert a.curve_csv() == b.curve_csv()
    assert np.array_equal(a.params2.as_array(), b.params2.as_array())


def test_training_thread_count_does_not_change_results(monkeypatch):
    cfg = overfit_config(scene=_small_scene("fixed"), lr=0.05, n_problems=2100, batch_size=2100, epochs=1,
                         evaluate_baselines=False)
    monkeypatch.setenv("PNEC_NUM_THREADS", "1")
    a = train_covariances(cfg)
    monkeypatch.setenv("PNEC_NUM_THREADS", "4")
    b = train_covariances(cfg)
    assert a.curve_csv() == b.curve_csv()


def test_training_reduces_error_on_fixed_geometry():
    cfg = overfit_config(scene=_small_scene("fixed"), lr=0.05, n_problems=256, batch_size=256, epochs=8,
                         evaluate_baselines=True)
    rec = train_covariances(cfg)
    assert rec.final.mean_e_rot < rec.initial.mean_e_rot
    assert rec.final.mean_sigma_norm_err < rec.initial.mean_sigma_norm_err
    assert set(rec.baselines) == {"unit_covariance_e_rot", "nec_ls_e_rot", "true_covariance_e_rot"}
    for p in (rec.params1, rec.params2):
        assert np.all(p.s > 0) and np.all((p.beta > 0) & (p.beta < 1))


def test_minibatches_take_several_steps_per_epoch():
    one = train_covariances(overfit_config(scene=_small_scene("fixed"), lr=0.05, n_problems=96, batch_size=96,
                                           epochs=1, evaluate_baselines=False))
    three = train_covariances(overfit_config(scene=_small_scene("fixed"), lr=0.05, n_problems=96, batch_size=32,
                                             epochs=1, evaluate_baselines=False))
    assert not np.array_equal(one.params2.as_array(), three.params2.as_array())
    assert one.initial.mean_e_rot == three.initial.mean_e_rot


def test_truth_initialization_stays_flat():
    cfg = diverse_config(scene=_small_scene("random", frame1_isotropic_scale=0.5), lr=0.005,
                         init_from_truth=True, **SMALL)
    rec = train_covariances(cfg)
    errs = np.array([e.mean_e_rot for e in rec.epochs])
    assert np.max(np.abs(errs / errs[0] - 1.0)) < 0.02
    assert rec.initial.mean_cov_err < 1e-5


def test_diverse_record_exports():
    rec = train_covariances(diverse_config(scene=_small_scene("random", frame1_isotropic_scale=0.5), lr=0.05,
                                           **SMALL))
    assert rec.params1 is None
    lines = rec.recovery_csv().splitlines()
    assert lines[0] == "point,initial_error,final_error"
    assert len(lines) == 21
    head = rec.curve_csv().splitlines()[0]
    assert head == "epoch,mean_e_rot,mean_sigma_norm_err,mean_cov_err"
    assert set(rec.covariance_dump()) == {"frame2"}
    m = rec.manifest()
    assert m["seed"] == 0 and len(m["input_hash"]) == 64


def test_divergence_aborts_with_record():
    cfg = overfit_config(scene=_small_scene("fixed"), lr=5.0, divergence_factor=1.0 + 1e-9, **SMALL)
    with pytest.raises(TrainingDivergedError) as info:
        train_covariances(cfg)
    assert info.value.record.aborted
    assert len(info.value.record.epochs) >= 2


@pytest.mark.parametrize("kw", [{"n_problems": 0}, {"batch_size": 0}, {"epochs": -1}, {"lr": -1.0}])
def test_learning_config_validation(kw):
    with pytest.raises(ValueError):
        overfit_config(**kw)

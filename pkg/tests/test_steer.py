import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steerlab.errors import DegenerateDirection, EmptyPrototypes, MissingArtifact
from steerlab.steer import (
    GateDecision,
    SteeringPolicy,
    SteeringSession,
    acs_step,
    add_renormalize_step,
    additive_step,
    decide_gate,
    effective_direction,
    gate_score,
    ot_target,
    steering_energy,
    update_operator,
)
from steerlab.subspace import PrototypeSet, SubspaceArtifact
from steerlab.tensorcore import orthonormal_basis, slerp

R2 = math.sqrt(2) / 2


def artifact(basis, kind="retain", layer=0):
    b = np.atleast_2d(np.asarray(basis, dtype=float))
    if b.shape[0] == 1 and b.shape[1] > 1:
        b = b.T
    return SubspaceArtifact(
        layer=layer,
        kind=kind,
        basis=b,
        rank=b.shape[1],
        eta=0.8,
        spectrum=np.ones(b.shape[1]),
        centering_mean=np.zeros(b.shape[0]),
        item_count=2,
    )


def protos(*dirs, layer=0):
    return PrototypeSet(layer=layer, directions=np.array(dirs, dtype=float))


# ----- gate -----

def test_gate_score_extremes():
    rrs = artifact([[1.0], [0.0], [0.0]])
    assert gate_score([3.0, 0.0, 0.0], rrs) == 1.0
    assert gate_score([0.0, 2.0, -1.0], rrs) == 0.0


def test_gate_threshold_is_strict():
    assert decide_gate(0.84, 0.85).open
    assert not decide_gate(0.85, 0.85).open


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_gate_score_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    rrs = artifact(orthonormal_basis(r.standard_normal((6, 2))))
    h = r.standard_normal(6)
    assert gate_score(c * h, rrs) == pytest.approx(gate_score(h, rrs), abs=1e-12)


# ----- directions and targets -----

def test_effective_direction_examples():
    rrs = artifact([[1.0], [0.0]])
    np.testing.assert_allclose(effective_direction(artifact([[0.6], [0.8]], "unlearn_qa"), rrs), [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(effective_direction(artifact([[0.0], [1.0]], "unlearn_qa"), rrs), [0.0, 1.0])
    with pytest.raises(DegenerateDirection):
        effective_direction(artifact([[1.0], [0.0]], "unlearn_qa"), rrs)
    np.testing.assert_allclose(effective_direction(artifact([[0.6], [0.8]], "unlearn_qa"), None), [0.6, 0.8])


def test_ot_target_examples():
    z, theta, k = ot_target(np.array([1.0, 0.0]), protos([0.0, 1.0], [R2, R2]))
    np.testing.assert_allclose(z, [R2, R2])
    assert theta == pytest.approx(math.pi / 4) and k == 1
    _, theta, _ = ot_target(np.array([R2, R2]), protos([0.0, 1.0], [R2, R2]))
    assert theta == pytest.approx(0.0, abs=1e-7)
    _, _, k = ot_target(np.array([1.0, 0.0]), protos([0.0, 1.0], [0.0, -1.0]))
    assert k == 0
    with pytest.raises(EmptyPrototypes):
        ot_target(np.array([1.0, 0.0]), None)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_ot_target_is_nearest_by_brute_force(seed, k):
    r = np.random.default_rng(seed)
    dirs = r.standard_normal((k, 5))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    h = r.standard_normal(5)
    h /= np.linalg.norm(h)
    _, theta, idx = ot_target(h, protos(*dirs))
    dists = [math.acos(max(-1.0, min(1.0, float(d @ h)))) ** 2 for d in dirs]
    assert idx == int(np.argmin(dists))
    assert theta == pytest.approx(math.sqrt(min(dists)), abs=1e-12)


# ----- updates -----

def test_acs_full_rotation():
    h_new, out = acs_step(np.array([2.0, 0.0]), np.array([0.0, 1.0]), protos([0.0, 1.0]))
    assert out.lam == 1.0
    np.testing.assert_allclose(h_new, [0.0, 2.0], atol=1e-15)


def test_acs_half_rotation_hits_target():
    h_new, out = acs_step(np.array([3.0, 0.0]), np.array([0.0, 1.0]), protos([R2, R2]))
    assert out.lam == pytest.approx(0.5)
    np.testing.assert_allclose(h_new / 3.0, [R2, R2], atol=1e-15)
    assert out.norm_after == pytest.approx(out.norm_before)


def test_acs_zero_target_angle_is_identity():
    h = np.array([1.0, 2.0])
    h_new, out = acs_step(h, np.array([0.0, 1.0]), protos(h / np.linalg.norm(h)))
    assert out.lam == 0.0
    np.testing.assert_allclose(h_new, h, atol=1e-12)


def test_additive_step_examples():
    assert np.array_equal(additive_step([1.0, 0.0], [0.0, 1.0], 0.0), [1.0, 0.0])
    assert np.array_equal(additive_step([1.0, 0.0], [0.0, 1.0], 1.5), [1.0, 1.5])
    assert np.array_equal(additive_step([1.0, 0.0], [0.0, 1.0]), [1.0, 1.5])


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_add_renormalize_matches_slerp(seed, lam):
    r = np.random.default_rng(seed)
    h = r.standard_normal(7) * 3
    v = r.standard_normal(7)
    v /= np.linalg.norm(v)
    hhat = h / np.linalg.norm(h)
    theta = math.acos(float(np.clip(hhat @ v, -1, 1)))
    if lam * theta >= math.pi / 2 - 1e-3:
        return
    expected = np.linalg.norm(h) * slerp(hhat, v, lam)
    np.testing.assert_allclose(add_renormalize_step(h, v, lam), expected, atol=1e-9)


def test_update_operator_examples():
    un = artifact([[0.0], [1.0], [0.0]], "unlearn_qa")
    rrs = artifact([[1.0], [0.0], [0.0]])
    h = np.array([1.0, 2.0, 3.0])
    assert not np.any(update_operator(h, GateDecision(0.9, False), rrs, un))
    assert not np.any(update_operator(np.array([5.0, 0.0, 1.0]), GateDecision(0.1, True), rrs, un))
    np.testing.assert_allclose(update_operator(h, GateDecision(0.1, True), rrs, un), [0.0, 2.0, 0.0])


def test_update_operator_removes_retain_component():
    un = artifact([[R2], [R2]], "unlearn_qa")
    rrs = artifact([[1.0], [0.0]])
    dh = update_operator(np.array([1.0, 1.0]), GateDecision(0.0, True), rrs, un)
    np.testing.assert_allclose(dh, [0.0, 1.0])
    assert steering_energy(np.array([1.0, 1.0]), rrs, un) == pytest.approx(1.0)


# ----- sessions -----

def session_fixture(mode="acs", tau=0.85, use_rrs=True):
    arts = {
        ("unlearn_qa", 1): artifact([[0.0], [1.0], [0.0]], "unlearn_qa", 1),
        ("retain", 1): artifact([[1.0], [0.0], [0.0]], "retain", 1),
    }
    prototypes = {("qa", 1): protos([0.0, 1.0, 0.0], layer=1)}
    policy = SteeringPolicy(tau=tau, steering_layers=(1,), scoring_layer=1, mode=mode, use_rrs=use_rrs)
    return SteeringSession(policy, arts, prototypes, query_id="q")


def test_session_off_is_identity():
    s = session_fixture(mode="off")
    s.open_gate(np.array([0.0, 0.0, 1.0]))
    h = np.array([0.3, 0.2, 0.9])
    assert s.hook(1, 0, h) is h
    assert not s.log


def test_session_closed_gate_is_identity():
    s = session_fixture(tau=0.5)
    assert not s.open_gate(np.array([1.0, 0.0, 0.1])).open
    h = np.array([0.3, 0.2, 0.9])
    assert s.hook(1, 0, h) is h


def test_session_open_gate_steers_and_logs():
    s = session_fixture()
    assert s.open_gate(np.array([0.1, 0.0, 1.0])).open
    h = np.array([0.0, 0.0, 2.0])
    out = s.hook(1, 4, h)
    np.testing.assert_allclose(out, [0.0, 2.0, 0.0], atol=1e-12)
    assert s.hook(0, 4, h) is h
    (rec,) = s.log
    assert (rec.query_id, rec.step, rec.layer, rec.applied) == ("q", 4, 1, True)
    assert '"lam": 1.0' in rec.to_json()


def test_session_antipodal_falls_back_to_additive():
    s = session_fixture()
    s.open_gate(np.array([0.0, 0.0, 1.0]))
    out = s.hook(1, 0, np.array([0.0, -2.0, 0.0]))
    assert np.linalg.norm(out) == pytest.approx(2.0)
    assert s.log[0].lam == 1.0


def test_session_without_rrs_always_open():
    s = session_fixture(use_rrs=False)
    assert s.open_gate(np.array([1.0, 0.0, 0.0])).open


def test_session_missing_artifacts():
    policy = SteeringPolicy(steering_layers=(2,), scoring_layer=2)
    with pytest.raises(MissingArtifact):
        SteeringSession(policy, {}, {})

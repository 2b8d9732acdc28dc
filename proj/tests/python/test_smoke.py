"""Smoke tests for the python surface of the native module."""

import math

import numpy as np
import pytest

import cqfuse as cq


def test_bandwidth_arithmetic():
    assert cq.bandwidth_bits(50, 256, 1) == 416_000
    assert cq.format_megabits(cq.bandwidth_bits(50, 256, 1)) == "0.416"
    assert cq.bandwidth_bits(120, 256, 1) == 998_400
    assert cq.format_megabits(998_400) == "0.998"
    assert cq.bandwidth_bits(0, 256, 1) == 0


def test_bev_iou_analytic_cases():
    a = cq.BBox3D(0, 0, 0, 1, 1, 1, 0.0)
    assert cq.bev_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert cq.bev_iou(a, cq.BBox3D(0.5, 0, 0, 1, 1, 1, 0.0)) == pytest.approx(1 / 3, abs=1e-12)
    assert cq.bev_iou(a, cq.BBox3D(50, 50, 0, 1, 1, 1, 0.3)) == 0.0


def test_transform_round_trip():
    cav = cq.Pose.from_yaw(0.7, 5.0, -2.0)
    ego = cq.Pose.from_yaw(-0.1, 1.0, 1.0)
    to_ego = cq.relative_transform(cav, ego)
    back = cq.compose(cq.invert(to_ego), to_ego)
    p = back.apply(3.0, 4.0, 0.5)
    assert p == pytest.approx((3.0, 4.0, 0.5), abs=1e-12)
    assert np.allclose(cq.Transform().matrix(), np.eye(4))


def test_wire_round_trip_and_top_k():
    rng = np.random.default_rng(3)
    features = rng.normal(size=(6, 8))
    centers = rng.normal(size=(6, 3)) * 10
    scores = np.array([[0.1], [0.9], [0.4], [0.9], [0.2], [0.6]])

    p = cq.top_k_select(features, centers, scores, k=3)
    assert p.k == 3 and p.d == 8 and p.c == 1
    # Highest scores win; the tie at 0.9 resolves to the lower row index.
    np.testing.assert_array_equal(
        p.scores().ravel(), np.float32([0.9, 0.9, 0.6])
    )
    np.testing.assert_array_equal(p.features(), features[[1, 3, 5]].astype(np.float32))

    frame = cq.serialize(p)
    assert isinstance(frame, bytes)
    assert len(frame) == 16 + 64 + 4 * (3 * 8 + 3 * 3 + 3 * 1)
    assert cq.deserialize(frame) == p


def test_interaction_gates():
    centers = np.zeros((4, 3))
    centers[3, 0] = 25.0  # far slot
    scores = np.array([[0.9], [0.05], [0.9], [0.9]])
    valid = [True, True, True, False]

    qsm = cq.build_qsm(valid)
    assert qsm[0, 3] == 1 and qsm[3, 0] == 1 and qsm[0, 1] == 0

    pcm = cq.build_pcm(centers, tau=10.0)
    assert pcm[0, 3] == 1 and pcm[0, 1] == 0

    ssm = cq.build_ssm(scores, theta=0.2)
    assert ssm[0, 1] == 1 and ssm[0, 2] == 0

    combined = cq.build_combined(centers, scores, valid, tau=10.0, theta=0.2)
    assert combined[0, 1] == 1 and combined[0, 3] == 1 and combined[0, 2] == 0
    assert np.all(np.diag(combined) == 0), "every query keeps itself"

    # A fully open row degenerates to a plain softmax.
    logits = np.array([[0.0, math.log(3.0)]])
    open_mask = np.zeros((1, 2))
    w = cq.softmax_masked(logits, open_mask)
    assert w[0, 1] == pytest.approx(0.75, abs=1e-12)


def test_eval_ap_hand_case():
    gts = [cq.BBox3D(0, 0, 0, 4, 2, 1.5, 0.0), cq.BBox3D(10, 0, 0, 4, 2, 1.5, 0.0)]
    dets = [
        cq.Detection(cq.BBox3D(0.1, 0, 0, 4, 2, 1.5, 0.0), 0.9),
        cq.Detection(cq.BBox3D(20, 5, 0, 4, 2, 1.5, 0.0), 0.8),
        cq.Detection(cq.BBox3D(10.1, 0, 0, 4, 2, 1.5, 0.0), 0.7),
    ]
    assert cq.eval_ap(dets, gts, 0.5) == pytest.approx(0.8333333333, abs=1e-6)
    assert cq.eval_ap([], gts, 0.5) == 0.0
    assert cq.eval_ap([], [], 0.5) == 1.0


def test_scenario_and_pipeline_smoke():
    scn = cq.gen_scenario(7)
    assert scn.seed == 7
    assert scn.n_agents == 4
    assert 3 <= scn.n_objects <= 7
    assert len(scn.object_boxes()) == scn.n_objects
    # Deterministic regeneration.
    again = cq.gen_scenario(7)
    boxes_a = [(b.center.x, b.center.y, b.yaw) for b in scn.object_boxes()]
    boxes_b = [(b.center.x, b.center.y, b.yaw) for b in again.object_boxes()]
    assert boxes_a == boxes_b

    out = cq.run_pipeline(7)
    assert out["bandwidth_bits"] == 3 * cq.bandwidth_bits(8, 32, 1)
    assert 0.0 <= out["ap50"] <= 1.0
    rerun = cq.run_pipeline(7)
    assert rerun == out

    solo = cq.run_pipeline(7, agents=1)
    assert solo["bandwidth_bits"] == 0

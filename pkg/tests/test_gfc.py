"""Clustering block: aggregation, fusion, hard assignment, dispatch, FFN."""

import dataclasses
import math

import numpy as np
import pytest

from cluenet import gfc
from cluenet import tensor as T
from cluenet.errors import ConfigError

F64 = np.float64
SIGMOID_1 = 0.7310585786300049  # frozen: 1/(1+exp(-1))


def param(name, value):
    return T.Parameter(name, np.asarray(value, dtype=F64))


def toy_block(rng, d=8, dp=8, heads=2, grid=(2, 2), flags=gfc.BlockFlags(),
              owns=True, scale=10.0):
    """Block params in float64 with inflated weight scale so that projected
    rows sit well above the cosine eps floor during finite differencing."""
    p = gfc.make_gfc_params(rng, d, dp, heads, grid, flags, owns, dtype=F64)
    for q in p.params():
        if q.value.ndim >= 2:
            q.value = q.value * scale
    return p


# ---------------------------------------------------------------------------
# init_centers
# ---------------------------------------------------------------------------

def test_centers_global_mean():
    x = np.random.default_rng(0).normal(size=(4, 4, 3))
    c, _ = gfc.init_centers(x, 1, 1)
    np.testing.assert_allclose(c, x.mean(axis=(0, 1))[None], rtol=1e-12)


def test_centers_identity_pool():
    x = np.random.default_rng(1).normal(size=(3, 5, 2))
    c, _ = gfc.init_centers(x, 3, 5)
    np.testing.assert_array_equal(c, x.reshape(15, 2))


def test_centers_quadrant_constants():
    vals = [1.0, -2.0, 3.0, 0.5]
    x = np.zeros((4, 4, 1))
    x[:2, :2], x[:2, 2:], x[2:, :2], x[2:, 2:] = vals
    c, _ = gfc.init_centers(x, 2, 2)
    np.testing.assert_array_equal(c[:, 0], vals)


def test_centers_grid_too_large():
    with pytest.raises(ConfigError):
        gfc.init_centers(np.zeros((2, 2, 1)), 3, 3)


# ---------------------------------------------------------------------------
# soft_aggregate
# ---------------------------------------------------------------------------

def test_aggregate_identical_pixels():
    v = np.array([2.0, -1.0, 0.5])
    p_sim = np.tile([1.0, 0.0, 0.0], (6, 1))
    p_val = np.tile(v, (6, 1))
    c = np.array([[0.3, 0.4, 0.5]])
    out, s_c, _ = gfc.soft_aggregate(c, p_sim, p_val, tau=1.0)
    np.testing.assert_allclose(out[0], v, rtol=1e-12)
    np.testing.assert_allclose(s_c.sum(), 1.0, rtol=1e-12)


def test_aggregate_two_pixel_closed_form():
    # cos similarities are [1, 0]; softmax([1,0]) is the frozen pair below.
    p_sim = np.array([[1.0, 0.0], [0.0, 1.0]])
    v1, v2 = np.array([3.0, -1.0]), np.array([0.0, 4.0])
    p_val = np.stack([v1, v2])
    c = np.array([[1.0, 0.0]])
    out, s_c, _ = gfc.soft_aggregate(c, p_sim, p_val, tau=1.0)
    w_hi, w_lo = 0.7310585786300049, 0.2689414213699951
    np.testing.assert_allclose(s_c[0], [w_hi, w_lo], rtol=1e-12)
    np.testing.assert_allclose(out[0], w_hi * v1 + w_lo * v2, rtol=1e-12)


def test_aggregate_high_temperature_flattens():
    rng = np.random.default_rng(2)
    out, s_c, _ = gfc.soft_aggregate(rng.normal(size=(3, 4)), rng.normal(size=(7, 4)),
                                     rng.normal(size=(7, 4)), tau=1e6)
    np.testing.assert_allclose(s_c, 1.0 / 7.0, atol=1e-4)


def test_aggregate_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(25):
        c = rng.normal(size=(4, 5))
        p = rng.normal(size=(9, 5))
        _, s_c, _ = gfc.soft_aggregate(c, p, rng.normal(size=(9, 5)),
                                       tau=float(rng.uniform(0.05, 3.0)))
        np.testing.assert_allclose(s_c.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(s_c > 0)


def test_aggregate_rejects_bad_temperature():
    z = np.zeros((1, 2))
    with pytest.raises(ConfigError):
        gfc.soft_aggregate(z, z, z, tau=0.0)


def test_aggregate_grad_matches_fd():
    rng = np.random.default_rng(4)
    tau0 = 0.7
    w = rng.normal(size=(3, 4))

    def f(inputs):
        c, p, v, tau_arr = inputs
        out, _, back = gfc.soft_aggregate(c, p, v, float(tau_arr[0]))
        d_c, d_p, d_v, d_tau = back(w)
        return (out * w).sum(), [d_c, d_p, d_v, np.array([d_tau])]

    inputs = [rng.normal(size=(3, 4)) + 1.0, rng.normal(size=(6, 4)) - 1.0,
              rng.normal(size=(6, 4)), np.array([tau0])]
    report = T.grad_check(f, inputs, tol=1e-6)
    assert report.passed, str(report)


def test_aggregate_dot_grad_matches_fd():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(2, 4))

    def f(inputs):
        c, p, v = inputs
        out, _, back = gfc.soft_aggregate_dot(c, p, v, scale=0.5)
        d_c, d_p, d_v = back(w)
        return (out * w).sum(), [d_c, d_p, d_v]

    report = T.grad_check(f, [rng.normal(size=(2, 3)), rng.normal(size=(5, 3)),
                              rng.normal(size=(5, 4))], tol=1e-6)
    assert report.passed, str(report)


def test_aggregate_unit_rows_match_dot_form():
    # On unit-norm rows, cosine at tau=sqrt(dh) equals dot-product at 1/sqrt(dh).
    rng = np.random.default_rng(6)
    dh = 4
    c = rng.normal(size=(3, dh))
    p = rng.normal(size=(8, dh))
    c /= np.linalg.norm(c, axis=-1, keepdims=True)
    p /= np.linalg.norm(p, axis=-1, keepdims=True)
    v = rng.normal(size=(8, dh))
    out_cos, _, _ = gfc.soft_aggregate(c, p, v, tau=math.sqrt(dh))
    out_dot, _, _ = gfc.soft_aggregate_dot(c, p, v, scale=1.0 / math.sqrt(dh))
    np.testing.assert_allclose(out_cos, out_dot, rtol=1e-9)


# ---------------------------------------------------------------------------
# streaming aggregation
# ---------------------------------------------------------------------------

def test_streaming_matches_dense():
    rng = np.random.default_rng(7)
    for n, chunk in [(17, 5), (64, 64), (100, 7), (256, 32)]:
        c = rng.normal(size=(5, 6)).astype(np.float32)
        p = rng.normal(size=(n, 6)).astype(np.float32)
        v = rng.normal(size=(n, 6)).astype(np.float32)
        tau = float(rng.uniform(0.1, 2.0))
        dense, _, _ = gfc.soft_aggregate(c, p, v, tau)
        stream = gfc.soft_aggregate_streaming(c, p, v, tau, chunk=chunk)
        assert np.max(np.abs(dense - stream)) < 1e-5


def test_streaming_large_n():
    rng = np.random.default_rng(8)
    c = rng.normal(size=(4, 8)).astype(np.float32)
    p = rng.normal(size=(4096, 8)).astype(np.float32)
    v = rng.normal(size=(4096, 8)).astype(np.float32)
    dense, _, _ = gfc.soft_aggregate(c, p, v, 0.5)
    stream = gfc.soft_aggregate_streaming(c, p, v, 0.5, chunk=300)
    assert np.max(np.abs(dense - stream)) < 1e-5


# ---------------------------------------------------------------------------
# gated_fuse
# ---------------------------------------------------------------------------

def _zero_gate(dp, dtype=F64):
    return T.Mlp2Params(param("w1", np.zeros((dp, 2 * dp))), param("b1", np.zeros(dp)),
                        param("w2", np.zeros((1, dp))), param("b2", np.zeros(1)))


def test_fuse_zero_gate_is_half_blend():
    rng = np.random.default_rng(9)
    cv, ca = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out, _ = gfc.gated_fuse(cv, ca, _zero_gate(3))
    np.testing.assert_allclose(out, 0.5 * cv + 0.5 * ca, rtol=1e-15)


def test_fuse_equal_operands_fixed_point():
    rng = np.random.default_rng(10)
    cv = rng.normal(size=(5, 4))
    gate = _zero_gate(4)
    for q in gate.params():
        q.value = rng.normal(size=q.value.shape)
    out, _ = gfc.gated_fuse(cv, cv.copy(), gate)
    np.testing.assert_allclose(out, cv, rtol=1e-12)


def test_fuse_saturated_gate_selects_cv():
    rng = np.random.default_rng(11)
    cv, ca = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    gate = _zero_gate(4)
    gate.b2.value = np.array([30.0])
    out, _ = gfc.gated_fuse(cv, ca, gate)
    np.testing.assert_allclose(out, cv, atol=1e-4)


def test_fuse_output_between_operands():
    rng = np.random.default_rng(12)
    for _ in range(20):
        cv, ca = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        gate = _zero_gate(5)
        for q in gate.params():
            q.value = rng.normal(size=q.value.shape)
        out, _ = gfc.gated_fuse(cv, ca, gate)
        lo, hi = np.minimum(cv, ca), np.maximum(cv, ca)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_fuse_grad_matches_fd():
    rng = np.random.default_rng(13)
    gate = _zero_gate(3)
    for q in gate.params():
        q.value = rng.normal(size=q.value.shape)
    w = rng.normal(size=(4, 3))

    def f(inputs):
        cv, ca = inputs[0], inputs[1]
        for q, v in zip(gate.params(), inputs[2:]):
            q.value = v
            q.grad = None
        out, back = gfc.gated_fuse(cv, ca, gate)
        d_cv, d_ca = back(w)
        return (out * w).sum(), [d_cv, d_ca] + [q.grad for q in gate.params()]

    inputs = ([rng.normal(size=(4, 3)), rng.normal(size=(4, 3))]
              + [q.value.copy() for q in gate.params()])
    report = T.grad_check(f, inputs, tol=1e-6)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# project_queries / compute_assignment
# ---------------------------------------------------------------------------

def test_queries_identity_single_head():
    c = np.random.default_rng(14).normal(size=(4, 6))
    q, _ = gfc.project_queries(c, param("wq", np.eye(6)), heads=1)
    np.testing.assert_array_equal(q[0], c)


def test_queries_identity_two_heads_split():
    c = np.random.default_rng(15).normal(size=(4, 6))
    q, _ = gfc.project_queries(c, param("wq", np.eye(6)), heads=2)
    np.testing.assert_array_equal(q[0], c[:, :3])
    np.testing.assert_array_equal(q[1], c[:, 3:])


def test_queries_zero_projection():
    q, _ = gfc.project_queries(np.ones((3, 4)), param("wq", np.zeros((4, 4))), heads=2)
    np.testing.assert_array_equal(q, np.zeros((2, 3, 2)))


def test_queries_indivisible_heads():
    with pytest.raises(ConfigError):
        gfc.split_heads(np.ones((3, 5)), 2)


def test_assignment_keeps_row_max():
    rng = np.random.default_rng(16)
    for _ in range(50):
        p_s = rng.normal(size=(10, 4))
        q = rng.normal(size=(3, 4))
        alpha, beta = float(rng.uniform(0.2, 2.0)), float(rng.normal())
        assign, _ = gfc.compute_assignment(p_s, q, alpha, beta)
        # independent dense recomputation
        pn = p_s / np.linalg.norm(p_s, axis=-1, keepdims=True)
        qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
        dense = 1.0 / (1.0 + np.exp(-(alpha * pn @ qn.T + beta)))
        np.testing.assert_array_equal(assign.cols, dense.argmax(axis=-1))
        np.testing.assert_allclose(assign.weights, dense.max(axis=-1), rtol=1e-10)
        assert np.all(assign.weights > 0) and np.all(assign.weights < 1)


def test_assignment_orthogonal_case():
    # pixel 0 parallel to query 0 and orthogonal to query 1: kept weight sigmoid(1).
    p_s = np.array([[2.0, 0.0]])
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    assign, _ = gfc.compute_assignment(p_s, q, alpha=1.0, beta=0.0)
    assert assign.cols[0] == 0
    np.testing.assert_allclose(assign.weights[0], SIGMOID_1, rtol=1e-12)


def test_assignment_alpha_zero_tie_breaks_low():
    rng = np.random.default_rng(17)
    assign, _ = gfc.compute_assignment(rng.normal(size=(6, 3)), rng.normal(size=(4, 3)),
                                       alpha=0.0, beta=0.3)
    np.testing.assert_array_equal(assign.cols, np.zeros(6, dtype=np.int32))
    np.testing.assert_allclose(assign.weights, 1.0 / (1.0 + math.exp(-0.3)), rtol=1e-12)


def test_assignment_scale_invariance():
    rng = np.random.default_rng(18)
    p_s = rng.normal(size=(8, 5))
    q = rng.normal(size=(3, 5))
    a0, _ = gfc.compute_assignment(p_s, q, 1.3, -0.2)
    a1, _ = gfc.compute_assignment(7.5 * p_s, q, 1.3, -0.2)
    np.testing.assert_array_equal(a0.cols, a1.cols)
    np.testing.assert_allclose(a0.weights, a1.weights, rtol=1e-10)


def test_assignment_grad_matches_fd():
    rng = np.random.default_rng(19)
    w = rng.normal(size=6)

    def f(inputs):
        p_s, q, ab = inputs
        assign, back = gfc.compute_assignment(p_s, q, float(ab[0]), float(ab[1]))
        d_ps, d_q, d_a, d_b = back(w)
        return (assign.weights * w).sum(), [d_ps, d_q, np.array([d_a, d_b])]

    inputs = [rng.normal(size=(6, 4)) + 0.5, rng.normal(size=(3, 4)) - 0.5,
              np.array([1.1, -0.2])]
    report = T.grad_check(f, inputs, tol=1e-6)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _toy_assignment(cols, weights):
    cols = np.asarray(cols, dtype=np.int32)
    return gfc.HardAssignment(cols, np.asarray(weights, dtype=F64), m=int(cols.max()) + 1)


def test_dispatch_zero_projection_is_identity():
    rng = np.random.default_rng(20)
    p = rng.normal(size=(1, 5, 3))
    centers = rng.normal(size=(1, 1, 2, 4))
    assign = _toy_assignment(rng.integers(0, 2, size=(1, 1, 5)), rng.uniform(0.1, 0.9, (1, 1, 5)))
    out, _ = gfc.dispatch(p, assign, centers, param("fc", np.zeros((3, 4))),
                          param("b", np.zeros(3)))
    np.testing.assert_array_equal(out, p)


def test_dispatch_unit_weight_adds_center():
    c0 = np.array([1.0, -2.0, 0.5])
    centers = np.zeros((1, 1, 2, 3))
    centers[0, 0, 1] = c0
    p = np.zeros((1, 2, 3))
    assign = _toy_assignment([[[1, 0]]], [[[1.0, 1.0]]])
    out, _ = gfc.dispatch(p, assign, centers, param("fc", np.eye(3)), param("b", np.zeros(3)))
    np.testing.assert_array_equal(out[0, 0], c0)
    np.testing.assert_array_equal(out[0, 1], np.zeros(3))


def test_dispatch_shared_center_equal_increments():
    rng = np.random.default_rng(21)
    p = rng.normal(size=(1, 4, 3))
    centers = rng.normal(size=(1, 1, 3, 3))
    assign = _toy_assignment([[[2, 2, 0, 1]]], [[[0.6, 0.6, 0.3, 0.9]]])
    out, _ = gfc.dispatch(p, assign, centers, param("fc", rng.normal(size=(3, 3))),
                          param("b", rng.normal(size=3)))
    inc = out - p
    np.testing.assert_allclose(inc[0, 0], inc[0, 1], rtol=1e-12)


def test_dispatch_dangling_index():
    with pytest.raises(RuntimeError):
        gfc.dispatch(np.zeros((1, 2, 3)), _toy_assignment([[[5, 0]]], [[[0.5, 0.5]]]),
                     np.zeros((1, 1, 2, 4)), param("fc", np.zeros((3, 4))),
                     param("b", np.zeros(3)))


def test_dispatch_grad_matches_fd():
    rng = np.random.default_rng(22)
    fc = param("fc", rng.normal(size=(3, 4)))
    b = param("b", rng.normal(size=3))
    cols = rng.integers(0, 2, size=(1, 2, 5)).astype(np.int32)
    w = rng.normal(size=(1, 5, 3))

    def f(inputs):
        p, centers, weights, fcv, bv = inputs
        fc.value, b.value = fcv, bv
        fc.grad = b.grad = None
        assign = gfc.HardAssignment(cols, weights, m=2)
        out, back = gfc.dispatch(p, assign, centers, fc, b)
        d_p, d_w, d_c = back(w)
        return (out * w).sum(), [d_p, d_c, d_w, fc.grad, b.grad]

    inputs = [rng.normal(size=(1, 5, 3)), rng.normal(size=(1, 2, 2, 2)),
              rng.uniform(0.2, 0.8, size=(1, 2, 5)), fc.value.copy(), b.value.copy()]
    report = T.grad_check(f, inputs, tol=1e-6)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# full block
# ---------------------------------------------------------------------------

def test_block_identity_at_init():
    rng = np.random.default_rng(23)
    p = gfc.make_gfc_params(rng, d=8, dp=8, heads=2, grid_hw=(2, 2), dtype=F64)
    x = rng.normal(size=(2, 4, 4, 8))
    y, state, _ = gfc.gfc_block_forward(x, p)
    np.testing.assert_array_equal(y, x)
    assert state.assignment.cols.shape == (2, 2, 16)


def test_block_sharing_bit_identical():
    rng = np.random.default_rng(24)
    p1 = toy_block(rng)
    p2 = toy_block(rng, owns=False)
    x = rng.normal(size=(1, 4, 4, 8))
    y1, st1, _ = gfc.gfc_block_forward(x, p1)
    _, st2, _ = gfc.gfc_block_forward(y1, p2, shared=st1.assignment)
    assert st2.assignment is st1.assignment
    np.testing.assert_array_equal(st2.assignment.cols, st1.assignment.cols)


def test_block_shared_shape_mismatch():
    rng = np.random.default_rng(25)
    p1 = toy_block(rng)
    p2 = toy_block(rng, owns=False)
    x = rng.normal(size=(1, 4, 4, 8))
    _, st1, _ = gfc.gfc_block_forward(x, p1)
    bad = gfc.HardAssignment(st1.assignment.cols[..., :8], st1.assignment.weights[..., :8],
                             st1.assignment.m)
    with pytest.raises(ConfigError):
        gfc.gfc_block_forward(x, p2, shared=bad)


def test_block_consumer_without_assignment():
    rng = np.random.default_rng(26)
    p2 = toy_block(rng, owns=False)
    with pytest.raises(ConfigError):
        gfc.gfc_block_forward(rng.normal(size=(1, 4, 4, 8)), p2)


def test_block_single_vs_dual_head_duplication():
    """An M=2 block built by duplicating every channel of an M=1 block picks
    identical argmax columns in both heads."""
    rng = np.random.default_rng(27)
    dh = 4
    p1 = toy_block(rng, d=6, dp=dh, heads=1, grid=(2, 2))
    x = rng.normal(size=(1, 4, 4, 6))

    p2 = toy_block(rng, d=6, dp=2 * dh, heads=2, grid=(2, 2))
    dup = lambda w: np.concatenate([w, w], axis=0)          # duplicate output rows
    p2.w_s.value = dup(p1.w_s.value)
    p2.b_s.value = dup(p1.b_s.value)
    p2.w_v.value = dup(p1.w_v.value)
    p2.b_v.value = dup(p1.b_v.value)
    p2.tau_raw.value = p1.tau_raw.value.copy()
    a, b = p1.gate.w1.value[:, :dh], p1.gate.w1.value[:, dh:]
    half_row = 0.5 * np.concatenate([a, a, b, b], axis=1)   # acts on [cv,cv,agg,agg]
    p2.gate.w1.value = np.concatenate([half_row, half_row], axis=0)
    p2.gate.b1.value = dup(p1.gate.b1.value)
    p2.gate.w2.value = 0.5 * np.concatenate([p1.gate.w2.value, p1.gate.w2.value], axis=1)
    p2.gate.b2.value = p1.gate.b2.value.copy()
    wq = p1.w_q.value
    p2.w_q.value = 0.5 * np.block([[wq, wq], [wq, wq]])
    p2.alpha.value = p1.alpha.value.copy()
    p2.beta.value = p1.beta.value.copy()

    _, st1, _ = gfc.gfc_block_forward(x, p1)
    _, st2, _ = gfc.gfc_block_forward(x, p2)
    np.testing.assert_array_equal(st2.assignment.cols[0, 0], st1.assignment.cols[0, 0])
    np.testing.assert_array_equal(st2.assignment.cols[0, 1], st1.assignment.cols[0, 0])


def test_block_gate_off_equals_zeroed_gate():
    rng = np.random.default_rng(28)
    p_on = toy_block(rng)
    for q in p_on.gate.params():
        q.value = np.zeros_like(q.value)
    p_off = dataclasses.replace(p_on, flags=gfc.BlockFlags(gate=False), gate=None)
    x = rng.normal(size=(1, 4, 4, 8))
    y_on, _, _ = gfc.gfc_block_forward(x, p_on)
    y_off, _, _ = gfc.gfc_block_forward(x, p_off)
    np.testing.assert_array_equal(y_on, y_off)


def test_block_pos_off_equals_zero_kernel():
    rng = np.random.default_rng(29)
    p_on = toy_block(rng)
    p_on.ffn_dw.value = np.zeros_like(p_on.ffn_dw.value)
    p_off = dataclasses.replace(p_on, flags=gfc.BlockFlags(pos=False), ffn_dw=None)
    x = rng.normal(size=(1, 4, 4, 8))
    y_on, _, _ = gfc.gfc_block_forward(x, p_on)
    y_off, _, _ = gfc.gfc_block_forward(x, p_off)
    np.testing.assert_array_equal(y_on, y_off)


def test_block_fa_off_equals_saturated_gate():
    rng = np.random.default_rng(30)
    p_on = toy_block(rng)
    for q in p_on.gate.params():
        q.value = np.zeros_like(q.value)
    p_on.gate.b2.value = np.array([40.0])   # g -> 1: fused centers -> pooled centers
    p_off = dataclasses.replace(p_on, flags=gfc.BlockFlags(fa=False),
                                tau_raw=None, gate=None)
    x = rng.normal(size=(1, 4, 4, 8))
    y_on, st_on, _ = gfc.gfc_block_forward(x, p_on)
    y_off, st_off, _ = gfc.gfc_block_forward(x, p_off)
    np.testing.assert_allclose(y_on, y_off, atol=1e-10)
    assert st_off.soft_sim is None and st_on.soft_sim is not None


def _block_fd(p, x0, tol=1e-4, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=x0.shape[:1] + x0.shape[1:])

    plist = p.params()

    def f(inputs):
        x = inputs[0]
        for q, v in zip(plist, inputs[1:]):
            q.value = v
            q.grad = None
        y, _, back = gfc.gfc_block_forward(x, p)
        dx = back(w)
        return (y * w).sum(), [dx] + [q.grad for q in plist]

    report = T.grad_check(f, [x0] + [q.value.copy() for q in plist], tol=tol)
    assert report.passed, str(report)


def test_block_grad_matches_fd_all_flags():
    rng = np.random.default_rng(31)
    p = toy_block(rng, d=4, dp=4, heads=2, grid=(2, 2))
    _block_fd(p, rng.normal(size=(1, 3, 3, 4)))


def test_block_grad_matches_fd_reduced_flags():
    rng = np.random.default_rng(32)
    flags = gfc.BlockFlags(fa=True, tcos=False, gate=False, pos=False)
    p = toy_block(rng, d=4, dp=4, heads=1, grid=(2, 2), flags=flags)
    _block_fd(p, rng.normal(size=(1, 3, 3, 4)))


def test_two_block_sharing_grad_matches_fd():
    """Finite differences across a two-block stage with a shared assignment:
    the consumer's weight gradient must flow back into the owner's query
    parameters and activations."""
    rng = np.random.default_rng(33)
    p1 = toy_block(rng, d=4, dp=4, heads=2, grid=(2, 2))
    p2 = toy_block(rng, d=4, dp=4, heads=2, grid=(2, 2), owns=False)
    plist = p1.params() + p2.params()
    w = rng.normal(size=(1, 3, 3, 4))

    def f(inputs):
        x = inputs[0]
        for q, v in zip(plist, inputs[1:]):
            q.value = v
            q.grad = None
        y1, st1, back1 = gfc.gfc_block_forward(x, p1)
        y2, _, back2 = gfc.gfc_block_forward(y1, p2, shared=st1.assignment)
        d_y1, d_shared = back2(w)
        dx = back1(d_y1, d_shared=d_shared)
        return (y2 * w).sum(), [dx] + [q.grad for q in plist]

    report = T.grad_check(f, [w * 0 + rng.normal(size=w.shape)]
                          + [q.value.copy() for q in plist], tol=1e-4)
    assert report.passed, str(report)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def test_macs_double_n_doubles_cost():
    prev = gfc.block_macs(n=1024, m=49, d=64, dp=64, heads=2)
    for n in (2048, 4096, 8192):
        cur = gfc.block_macs(n=n, m=49, d=64, dp=64, heads=2)
        assert abs(cur / prev - 2.0) < 0.05 * 2.0
        prev = cur


def test_macs_flags_reduce_cost():
    full = gfc.block_macs(n=256, m=16, d=32, dp=32, heads=2)
    no_fa = gfc.block_macs(n=256, m=16, d=32, dp=32, heads=2,
                           flags=gfc.BlockFlags(fa=False))
    assert no_fa < full

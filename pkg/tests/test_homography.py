"""Homography solve/warp/Jaccard tests against independent oracles.

The DLT oracle below uses the homogeneous 9-parameter SVD formulation,
a different algorithm from the module's inhomogeneous 8x8 solve, under the
same conventions: corners TL, TR, BR, BL; offsets (dcol, drow); H acting
on (row, col, 1).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cade.autograd import Tape, grad_check
from cade.homography import (HomographyError, jaccard_loss, jaccard_values,
                             sdm_predict, solve_homography, solve_values,
                             source_corners, warp, warp_values)

RNG = np.random.default_rng(8261)


def dlt_oracle(offsets: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """SVD-based direct linear transform, normalized to h33 = 1."""
    src = source_corners(rows, cols)
    dest = src.copy()
    dest[:, 0] += offsets[:, 1]
    dest[:, 1] += offsets[:, 0]
    M = []
    for (u, v), (up, vp) in zip(src, dest):
        M.append([u, v, 1, 0, 0, 0, -u * up, -v * up, -up])
        M.append([0, 0, 0, u, v, 1, -u * vp, -v * vp, -vp])
    _, _, vt = np.linalg.svd(np.array(M))
    h = vt[-1]
    return (h / h[8]).reshape(3, 3)


def apply_h(H, points_rc):
    p = H @ np.concatenate([points_rc.T, np.ones((1, len(points_rc)))], axis=0)
    return (p[:2] / p[2]).T


# ---- solve ------------------------------------------------------------------


def test_identity_offsets_exact_identity():
    H = solve_values(np.zeros((1, 4, 2)), 5, 5)[0]
    assert np.array_equal(H, np.eye(3))


def test_uniform_offsets_exact_translation():
    # All corners displaced by (dcol=2, drow=0): contents move two columns,
    # h13 = 0 and h23 = 2 under the (row, col) convention.
    off = np.tile([2.0, 0.0], (4, 1))
    H = solve_values(off[None], 5, 5)[0]
    expected = np.eye(3)
    expected[1, 2] = 2.0
    assert np.array_equal(H, expected)
    assert H[0, 2] == 0.0 and H[1, 2] == 2.0


def test_solve_matches_dlt_oracle_on_random_quads():
    for _ in range(100):
        off = RNG.uniform(-0.8, 0.8, size=(4, 2))
        H = solve_values(off[None], 5, 5)[0]
        np.testing.assert_allclose(H, dlt_oracle(off, 5, 5), atol=1e-8)


def test_solve_maps_corners_to_displaced_corners():
    off = RNG.uniform(-1.0, 1.0, size=(4, 2))
    H = solve_values(off[None], 16, 16)[0]
    src = source_corners(16, 16)
    dest = src + off[:, ::-1]
    np.testing.assert_allclose(apply_h(H, src), dest, atol=1e-9)


def test_solve_batched_matches_loop():
    offs = RNG.uniform(-0.5, 0.5, size=(7, 4, 2))
    batched = solve_values(offs, 5, 5)
    for i in range(7):
        np.testing.assert_array_equal(batched[i], solve_values(offs[i:i + 1], 5, 5)[0])


def test_degenerate_quad_raises_with_condition():
    # Collapse all destination corners onto one point.
    src = source_corners(5, 5)
    off = np.empty((4, 2))
    off[:, 1] = 2.0 - src[:, 0]
    off[:, 0] = 2.0 - src[:, 1]
    with pytest.raises(HomographyError, match="cond"):
        solve_values(off[None], 5, 5)


def test_analytic_and_fd_solve_gradients_agree():
    off = RNG.uniform(-0.7, 0.7, size=(4, 2))
    weights = RNG.normal(size=(3, 3))

    grads = {}
    for mode in ("analytic", "fd"):
        tape = Tape()
        t = tape.leaf(off, requires_grad=True)
        loss = (solve_homography(t, 5, 5, backward=mode) * tape.const(weights)).sum()
        tape.backward(loss)
        grads[mode] = t.grad.copy()
    np.testing.assert_allclose(grads["analytic"], grads["fd"], atol=1e-5)


def test_solve_gradcheck():
    weights = RNG.normal(size=(3, 3))

    def f(x):
        return (solve_homography(x, 5, 5) * x.tape.const(weights)).sum()

    for _ in range(5):
        assert grad_check(f, RNG.uniform(-0.6, 0.6, size=(4, 2))) < 1e-6


# ---- warp -------------------------------------------------------------------


def test_warp_identity_bit_exact():
    grid = RNG.uniform(0, 1, size=(5, 5))
    out = warp_values(grid, np.eye(3))
    assert np.array_equal(out, grid)


@pytest.mark.parametrize("dcol,drow", [(1, 0), (-1, 0), (0, 1), (0, -1), (2, -1)])
def test_warp_integer_translation_exact_index_shift(dcol, drow):
    grid = RNG.uniform(0, 1, size=(6, 7))
    off = np.tile([float(dcol), float(drow)], (4, 1))
    H = solve_values(off[None], 6, 7)[0]
    out, mask = warp_values(grid, H, return_mask=True)
    expected = np.full_like(grid, 0.5)
    exp_mask = np.zeros_like(grid, dtype=bool)
    for r in range(6):
        for c in range(7):
            sr, sc = r - drow, c - dcol
            if 0 <= sr < 6 and 0 <= sc < 7:
                expected[r, c] = grid[sr, sc]
                exp_mask[r, c] = True
    assert np.array_equal(out, expected)
    assert np.array_equal(mask, exp_mask)


def test_warp_all_out_of_range_gives_fill():
    grid = RNG.uniform(0, 1, size=(5, 5))
    off = np.tile([50.0, 50.0], (4, 1))
    H = solve_values(off[None], 5, 5)[0]
    out = warp_values(grid, H)
    assert np.all(out == 0.5)


def test_warp_values_stay_in_unit_interval():
    for _ in range(20):
        grid = RNG.uniform(0, 1, size=(5, 5))
        off = RNG.uniform(-2, 2, size=(1, 4, 2))
        out = warp_values(grid, solve_values(off, 5, 5)[0])
        assert np.all(out >= 0.0) and np.all(out <= 1.0)


def test_warp_gradcheck_grid_and_h():
    base_off = RNG.uniform(-0.4, 0.4, size=(1, 4, 2))
    H = solve_values(base_off, 5, 5)[0]
    grid = RNG.uniform(0.1, 0.9, size=(5, 5))
    weights = RNG.normal(size=(5, 5))

    def f_grid(x):
        return (warp(x, x.tape.const(H)) * x.tape.const(weights)).sum()

    assert grad_check(f_grid, grid) < 1e-6

    def f_h(x):
        return (warp(x.tape.const(grid), x) * x.tape.const(weights)).sum()

    assert grad_check(f_h, H) < 1e-5


def test_warp_composition_close_to_composed_homography():
    # warp(warp(g, H1), H2) ~ warp(g, H2 H1) away from fill-ins; resampling
    # is lossy, so probe with a smooth field where the bilinear error is
    # second order in the cell spacing.
    rr, cc = np.meshgrid(np.arange(16.0), np.arange(16.0), indexing="ij")
    g = 0.5 + 0.4 * np.sin(2 * np.pi * rr / 16) * np.cos(2 * np.pi * cc / 16)
    o1 = RNG.uniform(-0.3, 0.3, size=(1, 4, 2))
    o2 = RNG.uniform(-0.3, 0.3, size=(1, 4, 2))
    H1 = solve_values(o1, 16, 16)[0]
    H2 = solve_values(o2, 16, 16)[0]
    two, m2 = warp_values(warp_values(g, H1), H2, return_mask=True)
    one, m1 = warp_values(g, H2 @ H1, return_mask=True)
    both = m1 & m2
    # interior cells only; border cells mix with fill under the two-step path
    np.testing.assert_allclose(two[2:-2, 2:-2][both[2:-2, 2:-2]],
                               one[2:-2, 2:-2][both[2:-2, 2:-2]], atol=0.06)


# ---- jaccard ----------------------------------------------------------------


def test_jaccard_frozen_example():
    # pred identically 0.5 on 256 cells, truth has 64 ones:
    # inter = 32, denom = 128 + 64 - 32 = 160, loss = 1 - 0.2 = 0.8.
    tape = Tape()
    pred = tape.const(np.full((16, 16), 0.5))
    truth = np.zeros((16, 16))
    truth.ravel()[:64] = 1.0
    loss = jaccard_loss(pred, tape.const(truth))
    assert abs(loss.item() - 0.8) < 1e-12


def test_jaccard_identical_grids_zero_loss():
    tape = Tape()
    g = (RNG.uniform(0, 1, size=(5, 5)) > 0.6).astype(float)
    assert jaccard_loss(tape.const(g), tape.const(g)).item() == pytest.approx(0.0, abs=1e-12)


def test_jaccard_both_empty_is_zero():
    tape = Tape()
    z = tape.const(np.zeros((5, 5)))
    assert jaccard_loss(z, z).item() == 0.0
    vals = jaccard_values(np.zeros((2, 25)), np.zeros((2, 25)))
    assert np.array_equal(vals, [0.0, 0.0])


def test_jaccard_batch_mean_and_empty_pair_gradient():
    tape = Tape()
    pred = tape.leaf(np.stack([np.full((2, 2), 0.5), np.zeros((2, 2))]),
                     requires_grad=True)
    truth = tape.const(np.stack([np.ones((2, 2)), np.zeros((2, 2))]))
    loss = jaccard_loss(pred, truth)
    # first pair: inter 2, denom 2 + 4 - 2 = 4, loss 0.5; second pair: 0.
    assert loss.item() == pytest.approx(0.25, abs=1e-12)
    tape.backward(loss)
    assert np.all(pred.grad[1] == 0.0)
    assert np.any(pred.grad[0] != 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 25 - 1), st.integers(0, 2 ** 25 - 1))
def test_jaccard_range_on_binary_grids(a_bits, b_bits):
    a = np.array([(a_bits >> i) & 1 for i in range(25)], dtype=float)
    b = np.array([(b_bits >> i) & 1 for i in range(25)], dtype=float)
    tape = Tape()
    loss = jaccard_loss(tape.const(a.reshape(5, 5)), tape.const(b.reshape(5, 5))).item()
    assert 0.0 <= loss <= 1.0


def test_jaccard_gradcheck_through_chain():
    truth = (RNG.uniform(0, 1, size=(5, 5)) > 0.5).astype(float)
    grid = RNG.uniform(0.1, 0.9, size=(5, 5))

    def f(x):
        tape = x.tape
        H = solve_homography(x, 5, 5)
        return jaccard_loss(warp(tape.const(grid), H), tape.const(truth))

    for _ in range(5):
        assert grad_check(f, RNG.uniform(-0.5, 0.5, size=(4, 2))) < 1e-5


# ---- sdm_predict ------------------------------------------------------------


def test_zero_offsets_net_predicts_identity():
    grid = (RNG.uniform(0, 1, size=(5, 5)) > 0.7).astype(float)
    zero_net = lambda x: np.zeros((x.shape[0], 8))
    out = sdm_predict(zero_net, grid, np.eye(5)[2])
    assert np.array_equal(out, grid)


def test_sdm_predict_constant_shift_net():
    # A net that always reports a one-column shift regardless of input.
    grid = RNG.uniform(0, 1, size=(5, 5))
    shift_net = lambda x: np.tile([1.0, 0.0], (x.shape[0], 4)).reshape(x.shape[0], 8)
    out, mask = sdm_predict(shift_net, grid, np.eye(5)[1], return_mask=True)
    assert np.array_equal(out[:, 1:], grid[:, :-1])
    assert np.all(out[:, 0] == 0.5)
    assert not mask[:, 0].any() and mask[:, 1:].all()


def test_sdm_predict_multistep_feeds_back():
    grid = RNG.uniform(0, 1, size=(5, 5))
    shift_net = lambda x: np.tile([1.0, 0.0], (x.shape[0], 4)).reshape(x.shape[0], 8)
    onehots = np.tile(np.eye(5)[1], (2, 1))
    out = sdm_predict(shift_net, grid, onehots)
    assert np.array_equal(out[:, 2:], grid[:, :-2])
    assert np.all(out[:, :2] == 0.5)

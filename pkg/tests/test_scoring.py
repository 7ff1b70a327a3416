import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from activedet import kernels
from activedet.model import FormatError, ProbabilityStack
from activedet.scoring import (
    LN2,
    Border,
    Method,
    ScoreConfig,
    binary_entropy,
    pixel_score_entropy,
    pixel_score_mc_dropout,
    pixel_score_proposed,
    proposed_branch_scores,
    score_many,
    score_stack,
    spatial_mean,
    window_mean,
)

from oracles import mc_dropout_loop, proposed_direct, proposed_pixel_loop, proposed_stack_direct

STAIR = [[0, 0, 1], [0, 1, 1], [0, 1, 1]]
# H(5/9), evaluated to 30 digits with mpmath
H_5_9 = 0.686961576597323


def test_binary_entropy_values():
    assert binary_entropy(0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(5 / 9) == pytest.approx(H_5_9, abs=1e-12)
    assert binary_entropy(0.9) == pytest.approx(0.325082973391448, abs=1e-12)


def test_binary_entropy_rejects_out_of_range():
    with pytest.raises(ValueError):
        binary_entropy(1.5)
    with pytest.raises(ValueError):
        binary_entropy(-0.01)


@given(st.floats(0, 1))
def test_binary_entropy_bounded_and_symmetric(z):
    h = binary_entropy(z)
    assert 0.0 <= h <= LN2 + 1e-15
    assert h == pytest.approx(binary_entropy(1.0 - z), abs=1e-12)


def test_spatial_mean_examples():
    assert spatial_mean(np.full((5, 6), 0.3), 0, 0, 2) == pytest.approx(0.3)
    a = np.arange(12).reshape(3, 4) / 12
    assert spatial_mean(a, 1, 2, 0) == a[1, 2]
    assert spatial_mean(STAIR, 1, 1, 1) == pytest.approx(5 / 9)


def test_spatial_mean_fixed_denominator_corner():
    # corner window of r=1 holds 4 of 9 pixels
    assert spatial_mean(np.ones((3, 3)), 0, 0, 1, Border.FIXED_DENOMINATOR) == pytest.approx(4 / 9)
    assert spatial_mean(np.ones((3, 3)), 0, 0, 1, Border.ACTUAL_COUNT) == 1.0


@pytest.mark.parametrize("fixed", [False, True])
def test_window_mean_matches_spatial_mean(backend, rng, fixed):
    a = rng.random((7, 11))
    border = Border.FIXED_DENOMINATOR if fixed else Border.ACTUAL_COUNT
    got = backend.box_mean(a, 2, fixed)
    want = np.array([[spatial_mean(a, i, j, 2, border) for j in range(11)] for i in range(7)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_window_mean_dispatches_to_active_backend(rng):
    a = rng.random((4, 5))
    np.testing.assert_allclose(window_mean(a, 1), kernels.box_mean(a, 1, False))


def test_proposed_constant_stack_zero():
    for c in (0.0, 0.3, 1.0, 1e-7):
        smap = pixel_score_proposed(ProbabilityStack("c", np.full((3, 20, 17), c)), ScoreConfig(radius=3))
        assert np.all(smap.values == 0.0)


def test_proposed_stair_center():
    stack = ProbabilityStack("s", np.array([STAIR], dtype=float))
    smap = pixel_score_proposed(stack, ScoreConfig(radius=1))
    assert smap.values[1, 1] == pytest.approx(H_5_9, abs=1e-9)
    assert proposed_pixel_loop(STAIR, 1, 1, 1) == pytest.approx(H_5_9, abs=1e-12)


def test_proposed_two_equal_branches_add():
    stack = ProbabilityStack("s", np.array([STAIR, STAIR], dtype=float))
    smap = pixel_score_proposed(stack, ScoreConfig(radius=1))
    assert smap.values[1, 1] == pytest.approx(2 * H_5_9, abs=1e-9)


@pytest.mark.parametrize("r", [0, 1, 2, 4])
@pytest.mark.parametrize("fixed", [False, True])
def test_kernel_matches_pixel_loop(backend, rng, r, fixed):
    p = rng.random((9, 13))
    p[rng.random(p.shape) < 0.2] = 0.0
    got = backend.proposed_branch(p.astype(np.float32), r, fixed)
    pl = p.astype(np.float32).astype(float).tolist()
    want = np.array([[proposed_pixel_loop(pl, i, j, r, fixed) for j in range(13)] for i in range(9)])
    np.testing.assert_allclose(got, want, atol=1e-10)


@pytest.mark.parametrize("r", [0, 1, 3, 9])
def test_backends_match_direct_oracle(backend, rng, r):
    p = rng.random((40, 57)).astype(np.float32)
    np.testing.assert_allclose(backend.proposed_branch(p, r), proposed_direct(p, r), atol=1e-9)


def test_backends_agree(rng):
    mods = kernels.available()
    if len(mods) < 2:
        pytest.skip("compiled backend not built")
    p = rng.random((64, 80)).astype(np.float32)
    for r in (1, 9):
        np.testing.assert_allclose(mods[0].proposed_branch(p, r), mods[1].proposed_branch(p, r), atol=1e-12)
        np.testing.assert_allclose(mods[0].box_mean(p, r, True), mods[1].box_mean(p, r, True), atol=1e-12)
    np.testing.assert_allclose(mods[0].entropy(p), mods[1].entropy(p), atol=1e-14)


def test_fixed_denominator_is_nonnegative(rng):
    p = rng.random((30, 30))
    s = proposed_branch_scores(p, 4, Border.FIXED_DENOMINATOR, clamp=False)
    assert s.min() >= -1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), r=st.sampled_from([1, 2, 5]))
def test_branch_additivity_exact(seed, r):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 16, 21))
    cfg = ScoreConfig(radius=r)
    both = pixel_score_proposed(ProbabilityStack("x", np.stack([a, b])), cfg).values
    one = pixel_score_proposed(ProbabilityStack("x", a[None]), cfg).values
    two = pixel_score_proposed(ProbabilityStack("x", b[None]), cfg).values
    assert np.array_equal(both, one + two)


def test_log_base_does_not_change_ranking(rng):
    stack = ProbabilityStack("x", rng.random((2, 25, 25)))
    nats = pixel_score_proposed(stack, ScoreConfig(radius=2)).values.ravel()
    bits = nats / math.log(2)
    assert np.array_equal(np.argsort(nats, kind="stable"), np.argsort(bits, kind="stable"))


def test_proposed_upper_bound(rng):
    data = (rng.random((5, 50, 50)) < 0.5).astype(float)
    smap = pixel_score_proposed(ProbabilityStack("x", data), ScoreConfig(radius=1))
    assert smap.values.max() <= 5 * LN2 + 1e-6
    assert smap.values.min() >= 0.0


def test_proposed_uses_sample_mean_for_mc_stacks(rng):
    data = rng.random((2, 3, 10, 10))
    got = pixel_score_proposed(ProbabilityStack("x", data), ScoreConfig(radius=1)).values
    mean = data.astype(np.float32).astype(np.float64).mean(axis=1)
    np.testing.assert_allclose(got, proposed_stack_direct(mean, 1), atol=1e-9)


def test_mirror_average_flag(rng):
    data = rng.random((1, 12, 15))
    stack = ProbabilityStack("x", data)
    sym = 0.5 * (stack.data[0, 0].astype(float) + stack.data[0, 0, :, ::-1])
    got = pixel_score_proposed(stack, ScoreConfig(radius=2, mirror_average=True)).values
    np.testing.assert_allclose(got, proposed_stack_direct(sym[None], 2), atol=1e-9)
    # the mirrored average is symmetric, so is its score
    np.testing.assert_allclose(got, got[:, ::-1], atol=1e-12)


def test_entropy_score_examples():
    half = pixel_score_entropy(ProbabilityStack("x", np.full((5, 4, 4), 0.5)))
    np.testing.assert_allclose(half.values, 5 * LN2)
    assert pixel_score_entropy(ProbabilityStack("x", np.array([[[0.0, 1.0], [1.0, 0.0]]]))).values.max() == 0.0
    single = pixel_score_entropy(ProbabilityStack("x", np.full((1, 1, 1), 0.9)))
    assert single.values[0, 0] == pytest.approx(0.325082973391448, abs=1e-7)


def test_mc_dropout_examples():
    same = np.repeat(np.random.default_rng(0).random((2, 1, 6, 6)), 4, axis=1)
    assert pixel_score_mc_dropout(ProbabilityStack("x", same)).values.max() == 0.0
    flip = np.array([[[[0.0]], [[1.0]]]])
    assert pixel_score_mc_dropout(ProbabilityStack("x", flip)).values[0, 0] == pytest.approx(LN2)


def test_mc_dropout_matches_loop_oracle():
    rng = np.random.default_rng(30)
    data = rng.random((2, 30, 12, 9)).astype(np.float32)
    got = pixel_score_mc_dropout(ProbabilityStack("x", data)).values
    want = sum(np.maximum(mc_dropout_loop(data[k]), 0) for k in range(2))
    np.testing.assert_allclose(got, want, atol=1e-6)
    assert got.min() >= 0 and got.max() <= 2 * LN2 + 1e-9


def test_mc_dropout_needs_samples():
    with pytest.raises(FormatError):
        pixel_score_mc_dropout(ProbabilityStack("x", np.full((1, 3, 3), 0.5)))


def test_score_config_validation():
    with pytest.raises(ValueError):
        ScoreConfig(radius=-1)
    assert ScoreConfig("entropy").method is Method.ENTROPY


def test_score_many_independent_of_workers(rng):
    stacks = [ProbabilityStack(str(i), rng.random((2, 20, 24))) for i in range(12)]
    one = score_many(stacks, ScoreConfig(radius=3), workers=1)
    four = score_many(stacks, ScoreConfig(radius=3), workers=4)
    assert [m.frame_id for m in four] == [str(i) for i in range(12)]
    for a, b in zip(one, four):
        assert np.array_equal(a.values, b.values)


def test_score_stack_dispatch(rng):
    stack = ProbabilityStack("x", rng.random((1, 2, 5, 5)))
    assert np.array_equal(score_stack(stack, ScoreConfig("mc_dropout")).values,
                          pixel_score_mc_dropout(stack).values)

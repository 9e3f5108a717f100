import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roimae.errors import DimensionError, ParameterError
from roimae.masking import MaskStrategy, apply_mask, make_mask, mask_batch, round_half_up, sample_ratio
from roimae.rng import Rng

SWEEP = [(t, r, q) for t in (8, 64) for r in (4, 116) for q in (0.25, 0.5)]


def expected_count(strategy, T, R, ratio):
    if strategy is MaskStrategy.ROI:
        return T * round_half_up(ratio * R)
    if strategy is MaskStrategy.TIME:
        return R * round_half_up(ratio * T)
    return round_half_up(ratio * T) * round_half_up(ratio * R)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49, 29.0)] == [1, 2, 3, 2, 29]


def test_parse_tokens():
    assert MaskStrategy.parse("mask_roi") is MaskStrategy.ROI
    assert MaskStrategy.parse("NONE") is MaskStrategy.NONE
    with pytest.raises(ParameterError):
        MaskStrategy.parse("mask_block")


def test_mask_roi_116_half():
    m = make_mask("mask_roi", 64, 116, 0.5, Rng(0)).mask
    full_cols = m.all(axis=0)
    assert full_cols.sum() == 58
    assert not m[:, ~full_cols].any()


def test_mask_time_quarter():
    m = make_mask("mask_time", 64, 116, 0.25, Rng(0)).mask
    rows = m.all(axis=1)
    assert rows.sum() == 16
    assert not m[~rows].any()


@pytest.mark.parametrize("s", ["mask_roi", "mask_time", "mask_random", "none"])
def test_zero_ratio_masks_nothing(s):
    assert not make_mask(s, 10, 7, 0.0, Rng(1)).mask.any()


def test_ratio_out_of_range():
    with pytest.raises(ParameterError):
        make_mask("mask_roi", 8, 4, 1.0, Rng(0))
    with pytest.raises(ParameterError):
        make_mask("mask_roi", 8, 4, -0.1, Rng(0))


@pytest.mark.parametrize("T,R,ratio", SWEEP)
@pytest.mark.parametrize("strategy", [MaskStrategy.ROI, MaskStrategy.TIME, MaskStrategy.RANDOM])
def test_exact_counts_and_structure(strategy, T, R, ratio):
    for seed in range(5):
        m = make_mask(strategy, T, R, ratio, Rng(seed)).mask
        assert m.shape == (T, R)
        assert m.sum() == expected_count(strategy, T, R, ratio)
        if strategy is MaskStrategy.ROI:
            cols = m.any(axis=0)
            assert m[:, cols].all()
        elif strategy is MaskStrategy.TIME:
            rows = m.any(axis=1)
            assert m[rows].all()
        else:
            per_row = m.sum(axis=1)
            touched = per_row > 0
            assert touched.sum() == round_half_up(ratio * T)
            assert np.all(per_row[touched] == round_half_up(ratio * R))


@pytest.mark.parametrize("strategy,axis,n", [("mask_roi", 0, 20), ("mask_time", 1, 16)])
def test_selection_frequency(strategy, axis, n):
    counts = np.zeros(n)
    trials = 4000
    rng = Rng(42)
    for _ in range(trials):
        m = make_mask(strategy, 16, 20, 0.25, rng).mask
        counts += m.all(axis=axis)
    # each unit selected with probability round(0.25 n)/n ~ 0.25
    expected = round_half_up(0.25 * n) / n
    np.testing.assert_allclose(counts / trials, expected, atol=0.02)


def test_sample_ratio():
    assert all(sample_ratio(Rng(0), {0.5}) == 0.5 for _ in range(10))
    rng = Rng(123)
    draws = np.array([sample_ratio(rng, (0.25, 0.5)) for _ in range(100_000)])
    assert abs(np.mean(draws == 0.25) - 0.5) < 0.01
    a = [sample_ratio(Rng(9)) for _ in range(1)] + [sample_ratio(Rng(9))]
    assert a[0] == a[1]
    seq1 = [sample_ratio(r) for r in [Rng(5)] for _ in range(20)]
    r = Rng(5)
    assert seq1 == [sample_ratio(r) for _ in range(20)]
    with pytest.raises(ParameterError):
        sample_ratio(Rng(0), ())


def test_apply_mask_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    none = make_mask("mask_roi", 2, 2, 0.0, Rng(0))
    assert np.array_equal(apply_mask(x, none), x)
    spec = make_mask("mask_time", 2, 2, 0.5, Rng(0))
    spec.mask[:] = [[True, True], [False, False]]
    out = apply_mask(x, spec)
    assert out.tolist() == [[0.0, 0.0], [3.0, 4.0]]
    assert x.tolist() == [[1.0, 2.0], [3.0, 4.0]]  # not modified in place
    spec.mask[:] = True
    assert not apply_mask(x, spec).any()
    with pytest.raises(DimensionError):
        apply_mask(np.zeros((3, 2)), spec)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["mask_roi", "mask_time", "mask_random"]), st.integers(1, 30), st.integers(1, 30),
       st.sampled_from([0.25, 0.5]), st.integers(0, 2**32))
def test_apply_mask_idempotent(strategy, T, R, ratio, seed):
    spec = make_mask(strategy, T, R, ratio, Rng(seed))
    x = Rng(seed + 1).normal((T, R))
    once = apply_mask(x, spec)
    assert np.array_equal(apply_mask(once, spec), once)
    assert np.array_equal(once[~spec.mask], x[~spec.mask])


def test_mask_batch_per_sample_ratio():
    w = np.ones((200, 8, 8))
    masked, masks = mask_batch(w, "mask_roi", (0.25, 0.5), Rng(3))
    counts = set(masks.sum(axis=(1, 2)).tolist())
    assert counts == {16, 32}
    assert np.array_equal(masked == 0, masks)

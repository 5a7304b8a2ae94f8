"""Property tests for the invariants that hold for arbitrary inputs."""

import numpy as np
from hypothesis import given, settings, strategies as st

from trajdiff import data, distribution, inference
from trajdiff import numerics as nm

finite = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False,
                   width=32)


@st.composite
def positions(draw, max_peds=5, frames=20):
    n = draw(st.integers(min_value=1, max_value=max_peds))
    vals = draw(st.lists(finite, min_size=n * frames * 2,
                         max_size=n * frames * 2))
    return np.array(vals, dtype=np.float64).reshape(n, frames, 2)


@given(positions())
@settings(max_examples=25, deadline=None)
def test_window_round_trip_and_neighbor_symmetry(pos):
    n, frames, _ = pos.shape
    tracks = [data.RawTrack("s", i, np.arange(frames) * 10, pos[i])
              for i in range(n)]
    for w in data.window_scenes(tracks, stride=4):
        recon_obs = w.absolute_observed()
        recon_fut = w.absolute_future()
        start = w.start_frame // 10
        np.testing.assert_allclose(recon_obs, pos[:, start:start + 8], atol=1e-6)
        np.testing.assert_allclose(recon_fut, pos[:, start + 8:start + 20],
                                   atol=1e-6)
        np.testing.assert_array_equal(w.neighbor_mask, w.neighbor_mask.T)
        assert not np.diag(w.neighbor_mask).any()


@given(st.lists(finite, min_size=10, max_size=10),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_concat_slice_inverse(values, split_seed):
    arr = np.array(values, dtype=np.float32).reshape(2, 5)
    cut = 1 + split_seed % 4
    left = nm.constant(arr[:, :cut])
    right = nm.constant(arr[:, cut:])
    joined = nm.concat([left, right], axis=1)
    np.testing.assert_array_equal(joined.data, arr)
    np.testing.assert_array_equal(
        nm.slice_(joined, (slice(None), slice(0, cut))).data, left.data)
    np.testing.assert_array_equal(
        nm.slice_(joined, (slice(None), slice(cut, 5))).data, right.data)


@given(st.lists(finite, min_size=12, max_size=12))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_are_distributions(values):
    x = nm.constant(np.array(values, dtype=np.float32).reshape(3, 4))
    s = nm.softmax(x, axis=-1).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(3), atol=1e-5)


@given(st.lists(finite, min_size=15, max_size=15),
       st.lists(st.floats(min_value=0.125, max_value=10.0, width=32),
                min_size=5, max_size=5))
@settings(max_examples=50, deadline=None)
def test_normalization_round_trip(raw_values, scales):
    raw = np.array(raw_values, dtype=np.float64).reshape(1, 3, 5)
    stats = distribution.NormStats(np.zeros(5), np.array(scales, dtype=np.float64))
    back = distribution.denormalize_stats(
        distribution.normalize_stats(raw, stats), stats)
    np.testing.assert_allclose(back, raw, atol=1e-9)


@given(st.lists(finite, min_size=30, max_size=30))
@settings(max_examples=50, deadline=None)
def test_constrained_stats_always_valid(raw_values):
    raw = np.array(raw_values, dtype=np.float64).reshape(2, 3, 5)
    field = distribution.StatsField(raw)
    assert (field.sigmas > 0).all()
    assert (np.abs(field.rhos) <= distribution.RHO_CAP).all()
    det = (field.sigmas[..., 0] * field.sigmas[..., 1]) ** 2 * (1 - field.rhos ** 2)
    assert (det > 0).all()


@given(st.lists(finite, min_size=24, max_size=24),
       st.lists(finite, min_size=24, max_size=24))
@settings(max_examples=50, deadline=None)
def test_metrics_nonnegative_and_bounded(pred_vals, gt_vals):
    pred = np.array(pred_vals, dtype=np.float64).reshape(12, 2)
    gt = np.array(gt_vals, dtype=np.float64).reshape(12, 2)
    a = inference.ade(pred, gt)
    f = inference.fde(pred, gt)
    assert a >= 0 and f >= 0
    per_step = np.linalg.norm(pred - gt, axis=-1)
    assert a <= per_step.max() + 1e-9
    assert abs(f - per_step[-1]) < 1e-9

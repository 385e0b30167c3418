import numpy as np
from hypothesis import given, strategies as st

from fedconflict.plotting import plot_curves, smooth


def series(n, offset=0.0):
    acc = np.full(n, np.nan)
    acc[9::10] = np.linspace(0.3, 0.9, acc[9::10].size)
    return {"round": np.arange(1, n + 1), "reward": np.arange(n) + offset,
            "conflicts": np.ones(n) * offset, "accuracy": acc}


def test_smooth_window_one_is_identity():
    x = np.array([1.0, np.nan, 3.0])
    np.testing.assert_array_equal(smooth(x, 1), x)


def test_smooth_trailing_mean_skips_nan():
    got = smooth(np.array([1.0, 3.0, np.nan, 5.0]), 2)
    np.testing.assert_allclose(got, [1.0, 2.0, 3.0, 5.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.integers(1, 10))
def test_smooth_stays_within_data_range(values, window):
    x = np.array(values)
    y = smooth(x, window)
    assert np.all(y >= x.min() - 1e-9) and np.all(y <= x.max() + 1e-9)


def test_plot_writes_stable_svgs(tmp_path):
    data = {"a": series(50), "b": series(50, 1.0)}
    first = plot_curves(data, tmp_path / "1", smooth_window=5)
    second = plot_curves(data, tmp_path / "2", smooth_window=5)
    assert [p.name for p in first] == ["reward.svg", "conflicts.svg", "accuracy.svg"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text().lstrip().startswith("<?xml")


def test_plot_with_no_series(tmp_path):
    assert len(plot_curves({}, tmp_path)) == 3

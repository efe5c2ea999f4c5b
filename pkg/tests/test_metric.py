import itertools

import numpy as np
import pytest

from kserver.metric import FiniteMetric, MetricError, aspect_ratio, ball, build_metric, normalize


def test_uniform_distances():
    m = build_metric("uniform", 3)
    for i, j in itertools.permutations(range(3), 2):
        assert m.d(i, j) == 1.0
    assert m.d(1, 1) == 0.0


def test_line_normalization_endpoints():
    m = build_metric("line", 3)
    assert m.d(0, 2) == 1.0
    assert m.d(0, 1) == 0.5


def test_invalid_size():
    with pytest.raises(MetricError):
        build_metric("uniform", 1)


def test_expander_triangle_exhaustive():
    m = build_metric("expander", 64, seed=5, degree=4)
    d = m.dist
    for i, j, k in itertools.combinations(range(64), 3):
        assert d[i, k] <= d[i, j] + d[j, k]
        assert d[i, j] <= d[i, k] + d[j, k]
        assert d[j, k] <= d[j, i] + d[i, k]


def test_normalization_idempotent_bit_exact():
    m = build_metric("random", 17, seed=3)
    once = m.dist
    twice = normalize(once)
    assert np.array_equal(once, twice)


def test_ball_trivial():
    m = build_metric("line", 5)
    assert ball(m, 2, 0.0) == frozenset({2})
    assert ball(m, 2, 1.0) == frozenset(range(5))


def test_ball_line_scan():
    # line n=5 has points at 0, .25, .5, .75, 1; ball around .25 of radius .25
    m = build_metric("line", 5)
    assert ball(m, 1, 0.25) == frozenset({0, 1, 2})


@pytest.mark.parametrize(
    "kind,n,expect",
    [("uniform", 4, 1.0), ("line", 3, 2.0), ("line", 5, 4.0)],
)
def test_aspect_ratio(kind, n, expect):
    assert aspect_ratio(build_metric(kind, n)) == pytest.approx(expect)


def test_json_roundtrip():
    m = build_metric("circle", 8)
    m2 = FiniteMetric.from_json(m.to_json())
    assert np.array_equal(m.dist, m2.dist)


def test_random_metric_valid():
    m = build_metric("random", 40, seed=11)
    assert m.dist.max() == 1.0
    assert m.min_positive() > 0

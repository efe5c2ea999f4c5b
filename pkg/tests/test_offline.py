import random

import pytest

from kserver.adversary import AdversaryError, make_adversary
from kserver.metric import build_metric
from kserver.offline import dp_opt, offline_opt_mcf


def test_opt_zero_when_covered():
    m = build_metric("line", 5)
    cost, traj = offline_opt_mcf(m, [0, 0, 0], 2, [0, 4])
    assert cost == 0.0
    assert traj[0] == {0: 1, 4: 1}
    assert all(step == traj[0] for step in traj)


def test_opt_line_single_server():
    m = build_metric("line", 2)
    cost, traj = offline_opt_mcf(m, [0, 1, 0], 1, [0])
    assert cost == pytest.approx(2.0)
    assert traj[1] == {0: 1}
    assert traj[2] == {1: 1}
    assert traj[3] == {0: 1}


def test_opt_empty_requests():
    m = build_metric("line", 4)
    cost, traj = offline_opt_mcf(m, [], 2, [0, 3])
    assert cost == 0.0 and len(traj) == 1


def test_trajectory_is_lazy_and_services():
    m = build_metric("random", 6, seed=4)
    rng = random.Random(1)
    reqs = [rng.randrange(6) for _ in range(12)]
    cost, traj = offline_opt_mcf(m, reqs, 2, [0, 1])
    assert len(traj) == 13
    for t, sigma in enumerate(reqs, start=1):
        assert traj[t].get(sigma, 0) >= 1
        # at most one server moved
        prev, cur = traj[t - 1], traj[t]
        diff = 0
        for x in set(prev) | set(cur):
            diff += abs(prev.get(x, 0) - cur.get(x, 0))
        assert diff <= 2


def test_mcf_matches_dp_on_random_tiny_instances():
    rng = random.Random(7)
    for trial in range(40):
        n = rng.randint(2, 5)
        k = rng.randint(1, min(3, n - 1))
        T = rng.randint(1, 8)
        m = build_metric("random", n, seed=100 + trial) if n > 2 else build_metric("line", 2)
        reqs = [rng.randrange(n) for _ in range(T)]
        init = [rng.randrange(n) for _ in range(k)]
        a = offline_opt_mcf(m, reqs, k, init)[0]
        b = dp_opt(m, reqs, k, init)
        assert a == pytest.approx(b, abs=1e-9)


def test_circle_sweep_example():
    m = build_metric("circle", 4)
    adv = make_adversary("circle_sweep", m, 1, 0)
    assert [adv.request(t) for t in range(1, 7)] == [1, 2, 3, 0, 1, 2]


def test_random_adversary_replay():
    m = build_metric("line", 8)
    a = make_adversary("random", m, 2, seed=5)
    b = make_adversary("random", m, 2, seed=5)
    s1 = [a.request(t) for t in range(1, 30)]
    s2 = [b.request(t) for t in range(1, 30)]
    assert s1 == s2


def test_paging_cruel_validation_and_probe():
    m = build_metric("uniform", 4)
    adv = make_adversary("paging_cruel", m, 3, 0)
    masses = {0: 2, 1: 1, 2: 1}
    assert adv.request(1, probe=lambda: masses) == 3
    with pytest.raises(AdversaryError):
        make_adversary("paging_cruel", build_metric("line", 4), 3, 0)
    with pytest.raises(AdversaryError):
        adv.request(1)

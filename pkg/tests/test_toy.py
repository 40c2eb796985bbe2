import csv

import numpy as np
import pytest

from checks import gradient_check, window_means
from hieragent.grpo import GrpoConfig
from hieragent.protocol import Terminal
from hieragent.toy import (
    BAD_TOKEN,
    TargetStringTask,
    log_softmax,
    sample,
    sequence_logprobs,
    toy_policy_train,
)

TASK = TargetStringTask()


def test_rewards():
    v = TASK.vocab.index
    assert TASK.reward(0, [v("paris"), v("capital"), v("france")]) == 1.0
    assert TASK.reward(0, [v("rome"), v("capital"), v("italy")]) == pytest.approx(1 / 3)
    bad = [v("paris"), v(BAD_TOKEN), v("france")]
    assert TASK.decode(bad).terminal is Terminal.MALFORMED_OUTPUT
    assert TASK.reward(0, bad) == -2.0


def test_logprobs_normalized():
    theta = np.random.default_rng(0).normal(size=(3, 9))
    assert np.allclose(np.exp(log_softmax(theta)).sum(axis=-1), 1.0)
    seqs = sample(theta, 5, np.random.default_rng(1))
    lp = sequence_logprobs(theta, seqs)
    assert lp.shape == (5, 3) and np.all(lp <= 0)


def test_gradient_matches_finite_differences():
    assert gradient_check(draws=3, seed=11) < 1e-4


def test_gradient_without_kl():
    assert gradient_check(draws=2, seed=5, beta=0.0) < 1e-4


def test_learning_curve():
    res = toy_policy_train(steps=200, seed=3)
    r = res.mean_rewards
    assert len(r) == 200
    assert r[-1] > r[0]
    w = window_means(r)
    assert np.all(np.diff(w) >= 0)


def test_strong_kl_anchors_parameters():
    # Plain gradient ascent is stiff for large beta, so a small step size is used.
    anchored = toy_policy_train(cfg=GrpoConfig(kl_beta=1e3), steps=200, seed=0, lr=0.05)
    free = toy_policy_train(cfg=GrpoConfig(kl_beta=0.0), steps=200, seed=0, lr=0.05)
    assert np.abs(anchored.theta - anchored.theta_init).max() < 1e-2
    assert np.abs(free.theta - free.theta_init).max() > 1e-2


def test_curve_csv(tmp_path):
    res = toy_policy_train(steps=5, seed=0)
    res.write_csv(tmp_path / "c.csv")
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert [int(r["step"]) for r in rows] == list(range(5))


def test_reproducible():
    a = toy_policy_train(steps=20, seed=4)
    b = toy_policy_train(steps=20, seed=4)
    assert np.array_equal(a.theta, b.theta) and a.curve == b.curve

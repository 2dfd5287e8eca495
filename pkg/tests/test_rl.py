import numpy as np
import pytest

from alert_ects.classifier import ALERT_STAR, StateEncoder, fit_bins
from alert_ects.core import CostModel, EpisodeOutcome, InputError, default_checkpoints, episode_loss
from alert_ects.rl import (TRIGGER, WAIT, Adam, AlertPolicy, QNetwork, TrainConfig, TransitionSet,
                           alert_decide, decision_surface, delay_increments, extract_transitions,
                           tabular_q_values, td_loss_and_grads, td_targets, soft_update, train_alert,
                           write_surface_csv)
from alert_ects.triggers import evaluate_policy, load_policy, run_policy, save_policy


def relative_error(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else np.linalg.norm(a - b) / denom


def numeric_grad(net, X, actions, targets, eps=1e-6):
    base = net.flat()
    g = np.zeros_like(base)
    for i in range(len(base)):
        for sign in (1, -1):
            v = base.copy()
            v[i] += sign * eps
            net.set_flat(v)
            loss, _ = td_loss_and_grads(net, X, actions, targets)
            g[i] += sign * loss / (2 * eps)
    net.set_flat(base)
    return g


def test_gradient_check_small(rng):
    net = QNetwork(4, 6, rng)
    net.params["ln_gain"] = rng.normal(1, 0.3, 6)
    X = rng.normal(size=(9, 4))
    a = rng.integers(0, 2, 9)
    t = rng.normal(size=9)
    _, g = td_loss_and_grads(net, X, a, t)
    flat = np.concatenate([g[k].ravel() for k in ("W1", "b1", "ln_gain", "ln_bias", "W2", "b2")])
    assert relative_error(flat, numeric_grad(net, X, a, t)) < 1e-6


def test_flat_round_trip(rng):
    net = QNetwork(3, 4, rng)
    v = net.flat()
    net2 = QNetwork.zeros(3, 4)
    net2.set_flat(v)
    np.testing.assert_array_equal(net2.forward(np.ones(3)), net.forward(np.ones(3)))
    assert net.n_params == len(v) == 3 * 4 + 4 * 3 + 4 * 2 + 2


def test_forward_dimension_check(rng):
    with pytest.raises(InputError):
        QNetwork(3, 4, rng).forward(np.ones((2, 5)))


def test_save_load(tmp_path, rng):
    net = QNetwork(5, 8, rng)
    net.save(tmp_path / "q.txt")
    back = QNetwork.load(tmp_path / "q.txt")
    X = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(back.forward(X), net.forward(X))


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(p, lr=0.1)
    opt.step(p, {"w": np.array([3.0, -0.01, 0.0])})
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.5], atol=1e-6)


def test_soft_update_endpoints(rng):
    a, b = QNetwork(3, 4, rng), QNetwork(3, 4, rng)
    c = a.copy()
    soft_update(c, b, 1.0)
    np.testing.assert_array_equal(c.flat(), b.flat())
    c = a.copy()
    soft_update(c, b, 0.25)
    np.testing.assert_allclose(c.flat(), 0.75 * a.flat() + 0.25 * b.flat())


def test_double_dqn_targets_use_online_argmax_and_target_value():
    online = QNetwork.zeros(1, 2)
    online.params["b2"] = np.array([0.0, 1.0])  # online prefers trigger
    target = QNetwork.zeros(1, 2)
    target.params["b2"] = np.array([5.0, -3.0])  # target would prefer wait
    batch = TransitionSet(np.zeros((2, 1)), np.array([WAIT, WAIT]), np.array([-1.0, -2.0]),
                          np.zeros((2, 1)), np.array([False, True]))
    np.testing.assert_allclose(td_targets(online, target, batch, 1.0), [-4.0, -2.0])


def test_alert_ties_trigger():
    assert alert_decide([1.0, 1.0])
    assert not alert_decide([1.0, 0.5])


def _encoder_and_data(rng, n=30, K=5, T=20):
    P = rng.dirichlet([1, 1], size=(n, K))
    y = rng.integers(0, 2, n)
    cps = default_checkpoints(T, K)
    return P, y, StateEncoder(cps, T, fit_bins(P.max(axis=2), 3))


def test_transitions_layout_and_telescoping(rng):
    P, y, enc = _encoder_and_data(rng)
    costs = CostModel.standard(2, 1, 20, alpha=0.35)
    ts = extract_transitions(P, y, enc, costs)
    n, K = P.shape[:2]
    assert len(ts) == n * (K - 1) + n * K
    assert not np.any((ts.actions == WAIT) & (ts.checkpoint == K - 1))
    # waiting until k then triggering pays exactly the episode loss
    for i in range(n):
        for k in range(K):
            waits = ts.rewards[(ts.series == i) & (ts.actions == WAIT) & (ts.checkpoint < k)].sum()
            trig = ts.rewards[(ts.series == i) & (ts.actions == TRIGGER) & (ts.checkpoint == k)]
            o = EpisodeOutcome(int(np.argmax(P[i, k])), int(y[i]), int(enc.checkpoints[k]))
            assert waits + trig[0] == pytest.approx(-episode_loss(o, costs), abs=1e-9)


def test_delayed_rewards(rng):
    P, y, enc = _encoder_and_data(rng)
    costs = CostModel.standard(2, 1, 20, alpha=0.6)
    ts = extract_transitions(P, y, enc, costs, mode="delayed")
    assert np.all(ts.rewards[ts.actions == WAIT] == 0)
    with pytest.raises(InputError):
        extract_transitions(P, y, enc, costs, mode="bogus")


def test_delay_increments():
    np.testing.assert_allclose(delay_increments(np.array([1.0, 3.0, 7.0])), [1.0, 2.0, 4.0])


def test_tabular_backward_induction_chain():
    # states 0 -> 1 -> 2 (last); trigger rewards -3, -1, -5; waiting costs 0.5
    s = np.array([0, 1, 0, 1, 2])
    a = np.array([WAIT, WAIT, TRIGGER, TRIGGER, TRIGGER])
    r = np.array([-0.5, -0.5, -3.0, -1.0, -5.0])
    s2 = np.array([1, 2, 0, 0, 0])
    term = np.array([False, False, True, True, True])
    Q = tabular_q_values(s, a, r, s2, term, 3)
    np.testing.assert_allclose(Q[:, TRIGGER], [-3, -1, -5])
    np.testing.assert_allclose(Q[:2, WAIT], [-1.5, -5.5])
    assert Q[2, WAIT] == -np.inf


def test_training_selects_single_snapshot_and_is_deterministic(rng):
    P, y, enc = _encoder_and_data(rng, n=40)
    costs = CostModel.standard(2, 1, 20, alpha=0.7)
    folds = [(np.arange(0, 30), np.arange(30, 40)), (np.arange(10, 40), np.arange(0, 10))]
    cfg = TrainConfig(max_epochs=5, validate_every=5, batch_size=32, seed=3)
    a = train_alert(P, y, folds, enc, costs, cfg)
    b = train_alert(P, y, folds, enc, costs, cfg)
    assert a.log.selected_epoch == 5
    assert a.log.validation.shape == (2, 1)
    assert a.log.selected_fold == int(np.argmin(a.log.validation[:, 0]))
    np.testing.assert_array_equal(a.network.flat(), b.network.flat())


def test_policy_sequential_matches_vectorised_and_round_trips(rng, tmp_path):
    P, y, enc = _encoder_and_data(rng, n=40)
    costs = CostModel.standard(2, 1, 20, alpha=0.7)
    folds = [(np.arange(0, 30), np.arange(30, 40))]
    pol = train_alert(P, y, folds, enc, costs, TrainConfig(max_epochs=10, batch_size=32))
    _, idx, _ = evaluate_policy(pol, P, y, enc, costs)
    for i in range(len(y)):
        assert run_policy(pol, P[i], int(y[i]), enc).trigger_time == enc.checkpoints[idx[i]]
    save_policy(pol, tmp_path / "alert.txt")
    back = load_policy(tmp_path / "alert.txt")
    assert isinstance(back, AlertPolicy) and back.features == ALERT_STAR
    np.testing.assert_array_equal(back.trigger_mask(P, enc), pol.trigger_mask(P, enc))


def test_decision_surface(rng, tmp_path):
    P, y, enc = _encoder_and_data(rng, n=40)
    net = QNetwork.zeros(enc.feature_dim(ALERT_STAR, 2))
    net.params["b2"] = np.array([0.0, 1.0])
    pol = AlertPolicy(net, ALERT_STAR, enc)
    probs, times, dec = decision_surface(pol, enc, n_time=5, n_prob=4)
    assert dec.shape == (4, 5) and dec.all()
    assert probs[0] == 0.5 and times[-1] == 1.0
    write_surface_csv(tmp_path / "s.csv", probs, times, dec)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[1].endswith("1,1,1,1,1")

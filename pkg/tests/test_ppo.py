"""Optimizer numerics: advantages, clipped surrogate, gradients, sampling."""
from __future__ import annotations

import math

import numpy as np
import pytest

from railsched.ppo import (
    AdamState, CHECKPOINT_VERSION, PpoConfig, entropy_of, gae, greedy_action,
    init_params, load_checkpoint, loss_and_grads, make_policy_fn,
    params_shape, policy_forward, ppo_update, sample_action, save_checkpoint,
    softmax, train, _forward, _log_softmax,
)
from railsched.storage import load_npz, save_npz


def rng_of(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def tiny_params(seed: int = 0, obs_dim: int = 5, n_points: int = 3,
                n_actions: int = 4, hidden: int = 8) -> dict:
    return init_params(rng_of(seed), obs_dim, n_points, n_actions, hidden)


def random_batch(params: dict, n: int, seed: int = 1) -> dict:
    obs_dim, n_points, n_actions, _ = params_shape(params)
    rng = rng_of(seed)
    X = rng.normal(size=(n, obs_dim))
    logits, V, _, _ = _forward(params, X)
    acts = np.stack([sample_action(logits[i], rng)[0] for i in range(n)])
    logp_all = _log_softmax(logits)
    rows = np.arange(n)[:, None]
    heads = np.arange(n_points)[None, :]
    logp = logp_all[rows, heads, acts].sum(axis=1)
    adv = rng.normal(size=n)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return {
        "obs": X,
        "actions": acts,
        "logp_old": logp + rng.normal(scale=0.1, size=n),
        "advantages": adv,
        "returns": V + rng.normal(size=n),
    }


# -- generalized advantage estimation ----------------------------------------


def gae_bruteforce(rewards, values, dones, boot, gamma, lam):
    """O(T^2) definition: decayed sum of one-step TD errors, truncated at
    episode boundaries."""
    T = len(rewards)
    v_next = list(values[1:]) + [boot]
    adv = np.zeros(T)
    for t in range(T):
        acc = 0.0
        w = 1.0
        for k in range(t, T):
            cont = 0.0 if dones[k] else 1.0
            delta = rewards[k] + gamma * v_next[k] * cont - values[k]
            acc += w * delta
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


def test_gae_single_step():
    adv, ret = gae([2.0], [0.5], [False], 1.0, 0.9, 0.8)
    assert adv[0] == pytest.approx(2.0 + 0.9 * 1.0 - 0.5)
    assert ret[0] == pytest.approx(adv[0] + 0.5)
    adv_done, _ = gae([2.0], [0.5], [True], 1.0, 0.9, 0.8)
    assert adv_done[0] == pytest.approx(2.0 - 0.5)


def test_gae_telescopes_undiscounted():
    """With gamma = lam = 1 and no terminations the advantage telescopes to
    (sum of future rewards + bootstrap - value)."""
    rng = rng_of(3)
    r = rng.normal(size=20)
    v = rng.normal(size=20)
    boot = 0.7
    adv, _ = gae(r, v, [False] * 20, boot, 1.0, 1.0)
    for t in range(20):
        assert adv[t] == pytest.approx(r[t:].sum() + boot - v[t], abs=1e-12)


def test_gae_matches_bruteforce():
    rng = rng_of(4)
    for seed in range(5):
        T = 40
        r = rng.normal(size=T)
        v = rng.normal(size=T)
        d = rng.random(T) < 0.1
        boot = float(rng.normal())
        fast, rets = gae(r, v, d, boot, 0.99, 0.95)
        slow = gae_bruteforce(r, v, d, boot, 0.99, 0.95)
        assert np.max(np.abs(fast - slow)) < 1e-10
        assert np.allclose(rets, fast + v)


def test_gae_rejects_misaligned_inputs():
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0], [False], 0.0, 0.9, 0.9)


# -- clipped surrogate -------------------------------------------------------


def surrogate_cfg(**kw) -> PpoConfig:
    base = dict(value_coef=0.0, entropy_coef=0.0, clip_eps=0.2)
    base.update(kw)
    return PpoConfig(**base)


def single_sample_batch(params: dict, ratio: float, advantage: float) -> dict:
    obs_dim, n_points, _, _ = params_shape(params)
    X = np.zeros((1, obs_dim))
    logits, _, _, _ = _forward(params, X)
    acts = greedy_action(logits[0])[None, :]
    logp_all = _log_softmax(logits)
    logp_new = logp_all[0, np.arange(n_points), acts[0]].sum()
    return {
        "obs": X,
        "actions": acts,
        "logp_old": np.array([logp_new - math.log(ratio)]),
        "advantages": np.array([advantage]),
        "returns": np.array([0.0]),
    }


def test_clip_caps_positive_advantage():
    params = tiny_params()
    batch = single_sample_batch(params, ratio=1.5, advantage=1.0)
    loss, _, parts = loss_and_grads(params, batch, surrogate_cfg())
    assert loss == pytest.approx(-1.2)      # min(1.5, 1.2) * A
    assert parts["clip_frac"] == 1.0


def test_clip_keeps_unclipped_branch():
    params = tiny_params()
    batch = single_sample_batch(params, ratio=1.1, advantage=1.0)
    loss, _, parts = loss_and_grads(params, batch, surrogate_cfg())
    assert loss == pytest.approx(-1.1)
    assert parts["clip_frac"] == 0.0


def test_clip_floors_negative_advantage():
    params = tiny_params()
    batch = single_sample_batch(params, ratio=0.5, advantage=-1.0)
    loss, _, parts = loss_and_grads(params, batch, surrogate_cfg())
    # min(0.5 * -1, 0.8 * -1) = -0.8 -> loss 0.8
    assert loss == pytest.approx(0.8)


def test_ratio_one_gives_mean_advantage():
    params = tiny_params()
    batch = single_sample_batch(params, ratio=1.0, advantage=0.7)
    loss, _, _ = loss_and_grads(params, batch, surrogate_cfg())
    assert loss == pytest.approx(-0.7)


# -- analytic gradients vs finite differences --------------------------------


def test_gradients_match_finite_differences():
    params = tiny_params()
    batch = random_batch(params, n=24)
    cfg = PpoConfig(value_coef=0.5, entropy_coef=0.01, clip_eps=0.2)
    _, grads, _ = loss_and_grads(params, batch, cfg)
    h = 1e-5
    worst = 0.0
    rng = rng_of(9)
    for key in ("w1", "b1", "w2", "b2", "wp", "bp", "wv", "bv"):
        flat = params[key].reshape(-1) if params[key].ndim else params[key].reshape(1)
        n_probe = min(10, flat.size)
        for idx in rng.choice(flat.size, size=n_probe, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up, _, _ = loss_and_grads(params, batch, cfg)
            flat[idx] = orig - h
            dn, _, _ = loss_and_grads(params, batch, cfg)
            flat[idx] = orig
            numeric = (up - dn) / (2 * h)
            analytic = grads[key].reshape(-1)[idx] if grads[key].ndim else float(grads[key])
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
    assert worst < 1e-4


# -- softmax sampling --------------------------------------------------------


def test_uniform_logits_logp():
    K = 8
    logits = np.zeros((3, K))
    acts, logp = sample_action(logits, rng_of(0))
    assert acts.shape == (3,)
    assert logp == pytest.approx(3 * -math.log(K))


def test_dominant_logit_always_wins():
    logits = np.zeros((2, 8))
    logits[0, 3] = 50.0
    logits[1, 5] = 50.0
    for seed in range(20):
        acts, _ = sample_action(logits, rng_of(seed))
        assert acts[0] == 3 and acts[1] == 5
    assert list(greedy_action(logits)) == [3, 5]


def test_entropy_bounds():
    K = 8
    assert entropy_of(np.zeros((1, K))) == pytest.approx(math.log(K))
    peaked = np.full((1, K), -100.0)
    peaked[0, 0] = 100.0
    assert entropy_of(peaked) == pytest.approx(0.0, abs=1e-12)
    assert entropy_of(np.zeros((4, K))) == pytest.approx(4 * math.log(K))


def test_sample_frequencies_follow_softmax():
    logits = np.array([[0.3, -0.2, 1.1, 0.0]])
    probs = softmax(logits)[0]
    rng = rng_of(123)
    n = 20_000
    counts = np.zeros(4)
    for _ in range(n):
        a, _ = sample_action(logits, rng)
        counts[a[0]] += 1
    for k in range(4):
        sigma = math.sqrt(n * probs[k] * (1 - probs[k]))
        assert abs(counts[k] - n * probs[k]) <= 4 * sigma


# -- optimizer and update loop -----------------------------------------------


def test_adam_zero_grads_leave_params():
    params = tiny_params()
    opt = AdamState(params)
    zeros = {k: np.zeros_like(v) for k, v in params.items() if k != "shape"}
    stepped = opt.step(params, zeros, lr=0.1)
    for k in params:
        assert np.array_equal(stepped[k], params[k])


def test_adam_descends_a_quadratic():
    params = {"x": np.array([5.0]), "shape": np.array([1, 1, 1, 1])}
    opt = AdamState(params)
    for _ in range(600):
        params = opt.step(params, {"x": 2 * params["x"]}, lr=0.05)
    assert abs(params["x"][0]) < 0.05


def test_ppo_update_moves_toward_advantaged_actions():
    params = tiny_params()
    batch = random_batch(params, n=64)
    cfg = PpoConfig(minibatch=32, epochs=4, lr=1e-3)
    new_params, diag = ppo_update(params, batch, cfg, rng_of(0), AdamState(params))
    assert diag["aborted"] == 0.0
    changed = any(not np.array_equal(new_params[k], params[k])
                  for k in params if k != "shape")
    assert changed


def test_ppo_update_rejects_empty_batch():
    params = tiny_params()
    empty = {"obs": np.zeros((0, 5)), "actions": np.zeros((0, 3), dtype=int),
             "logp_old": np.zeros(0), "advantages": np.zeros(0),
             "returns": np.zeros(0)}
    with pytest.raises(ValueError, match="empty"):
        ppo_update(params, empty, PpoConfig())


def test_policy_forward_validates_shape():
    params = tiny_params()
    with pytest.raises(ValueError, match="observation shape"):
        policy_forward(params, np.zeros(7))


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    params = tiny_params()
    path = str(tmp_path / "ck.npz")
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k], params[k])


def test_checkpoint_version_mismatch_rejected(tmp_path):
    params = tiny_params()
    path = str(tmp_path / "ck.npz")
    save_checkpoint(path, params)
    arrays = load_npz(path)
    arrays["version"] = np.array([CHECKPOINT_VERSION + 1], dtype=np.int64)
    save_npz(path, arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


# -- config validation -------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        PpoConfig(clip_eps=0.0)
    with pytest.raises(ValueError):
        PpoConfig(reward_scale=0.0)


def test_greedy_policy_fn_is_deterministic():
    params = tiny_params()
    fn = make_policy_fn(params, greedy=True)
    obs = np.ones(5)
    a1, logp1, v1 = fn(obs, rng_of(0))
    a2, logp2, v2 = fn(obs, rng_of(99))
    assert np.array_equal(a1, a2) and logp1 == logp2 and v1 == v2

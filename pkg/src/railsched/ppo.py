"""Proximal policy optimization, self-contained.

A small tanh MLP (shared trunk, one categorical head per decision point, a
scalar value head) trained with the clipped surrogate objective and
generalized advantage estimation.  Gradients are written out by hand as
exact reverse-mode passes over the fixed topology; everything runs in
float64 numpy so training is bit-reproducible given seeds.

Parameters live in a plain dict of arrays:

    w1 [D,H]  b1 [H]      trunk layer 1
    w2 [H,H]  b2 [H]      trunk layer 2
    wp [H,P*K]  bp [P*K]  policy heads, P heads of K logits each
    wv [H]      bv []     value head
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .storage import dumps_jsonl, load_npz, save_npz, write_atomic

Params = Dict[str, np.ndarray]

CHECKPOINT_VERSION = 1


@dataclass
class PpoConfig:
    """Clipped-surrogate update and advantage-estimation settings."""
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 3e-4
    minibatch: int = 256
    epochs: int = 4
    iterations: int = 50
    n_envs: int = 8
    hidden: int = 64
    seed: int = 0
    max_decisions: Optional[int] = None
    parallel_rollouts: bool = True
    reward_scale: float = 1.0
    """Trainer-side positive rescaling of rewards before advantage and value
    targets; a monotone transform, so the optimal policy is unchanged, but it
    keeps value targets in a range the critic can actually reach.  Reported
    returns stay unscaled."""

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")


# -- parameters and forward pass ---------------------------------------------


def init_params(rng: np.random.Generator, obs_dim: int, n_points: int,
                n_actions: int, hidden: int = 64) -> Params:
    """Scaled-normal trunk, near-zero policy heads so the initial policy is
    almost uniform, zero biases."""
    def dense(fan_in, shape, scale=1.0):
        return rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)

    return {
        "w1": dense(obs_dim, (obs_dim, hidden)),
        "b1": np.zeros(hidden),
        "w2": dense(hidden, (hidden, hidden)),
        "b2": np.zeros(hidden),
        "wp": dense(hidden, (hidden, n_points * n_actions), scale=0.01),
        "bp": np.zeros(n_points * n_actions),
        "wv": dense(hidden, (hidden,)),
        "bv": np.zeros(()),
        "shape": np.array([obs_dim, n_points, n_actions, hidden], dtype=np.int64),
    }


def params_shape(params: Params) -> Tuple[int, int, int, int]:
    return tuple(int(x) for x in params["shape"])


def _forward(params: Params, X: np.ndarray):
    """Batched trunk + heads; returns (logits [N,P,K], values [N], h1, h2)."""
    _, n_points, n_actions, _ = params_shape(params)
    h1 = np.tanh(X @ params["w1"] + params["b1"])
    h2 = np.tanh(h1 @ params["w2"] + params["b2"])
    logits = (h2 @ params["wp"] + params["bp"]).reshape(len(X), n_points, n_actions)
    values = h2 @ params["wv"] + params["bv"]
    return logits, values, h1, h2


def policy_forward(params: Params, obs: np.ndarray) -> Tuple[np.ndarray, float]:
    """(per-head logits [P,K], value) for one observation."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (params_shape(params)[0],):
        raise ValueError(f"observation shape {obs.shape} does not match params")
    logits, values, _, _ = _forward(params, obs[None, :])
    return logits[0], float(values[0])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Sample each head from its softmax; joint log-prob is the sum."""
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    probs = np.exp(logp)
    actions = np.empty(len(probs), dtype=np.int64)
    total = 0.0
    for p in range(len(probs)):
        r = rng.random()
        a = int(np.searchsorted(np.cumsum(probs[p]), r, side="right"))
        a = min(a, probs.shape[1] - 1)
        actions[p] = a
        total += logp[p, a]
    return actions, float(total)


def greedy_action(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=-1).astype(np.int64)


def entropy_of(logits: np.ndarray) -> float:
    """Summed entropy of the factored heads, in nats."""
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-(np.exp(logp) * logp).sum())


# -- advantage estimation ----------------------------------------------------


def gae(rewards: Sequence[float], values: Sequence[float], dones: Sequence[bool],
        bootstrap_value: float, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns.

    delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t, with V after the last
    step taken from ``bootstrap_value``; the decayed sum truncates at
    episode boundaries.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if not (len(r) == len(v) == len(d)):
        raise ValueError("rewards, values and dones must align")
    adv = np.zeros(len(r))
    nxt = bootstrap_value
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        cont = 0.0 if d[t] else 1.0
        delta = r[t] + gamma * nxt * cont - v[t]
        acc = delta + gamma * lam * cont * acc
        adv[t] = acc
        nxt = v[t]
    return adv, adv + v


# -- loss and exact gradients ------------------------------------------------


def loss_and_grads(params: Params, batch: Dict[str, np.ndarray],
                   cfg: PpoConfig) -> Tuple[float, Params, Dict[str, float]]:
    """Clipped-surrogate + value + entropy loss with hand-derived gradients.

    ``batch`` holds obs [N,D], actions [N,P], logp_old [N], advantages [N]
    (already normalized by the caller), returns [N].
    """
    X = batch["obs"]
    A = batch["advantages"]
    R = batch["returns"]
    logp_old = batch["logp_old"]
    acts = batch["actions"]
    N, P = acts.shape
    eps = cfg.clip_eps

    logits, V, h1, h2 = _forward(params, X)
    logp_all = _log_softmax(logits)                      # [N,P,K]
    probs = np.exp(logp_all)
    rows = np.arange(N)[:, None]
    heads = np.arange(P)[None, :]
    logp_new = logp_all[rows, heads, acts].sum(axis=1)   # [N]

    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr = np.minimum(ratio * A, clipped * A)
    pg_loss = -surr.mean()

    v_err = V - R
    v_loss = cfg.value_coef * np.mean(v_err ** 2)

    head_ent = -(probs * logp_all).sum(axis=2)           # [N,P]
    entropy = head_ent.sum(axis=1).mean()
    loss = pg_loss + v_loss - cfg.entropy_coef * entropy

    # d(loss)/d(logp_new): only where the unclipped branch is the minimum.
    active = (ratio * A <= clipped * A)
    g_logp = -(A * ratio * active) / N                   # [N]

    # d(logp_new)/d(logits) = onehot - probs, per head.
    g_logits = -probs * g_logp[:, None, None]
    g_logits[rows, heads, acts] += g_logp[:, None]
    # entropy term: dH/dz_k = -p_k (logp_k + H)
    g_logits += (cfg.entropy_coef / N) * probs * (logp_all + head_ent[:, :, None])
    g_flat = g_logits.reshape(N, -1)

    g_v = 2.0 * cfg.value_coef * v_err / N               # [N]

    g_h2 = g_flat @ params["wp"].T + g_v[:, None] * params["wv"][None, :]
    g_a2 = g_h2 * (1.0 - h2 ** 2)
    g_h1 = g_a2 @ params["w2"].T
    g_a1 = g_h1 * (1.0 - h1 ** 2)

    grads: Params = {
        "w1": X.T @ g_a1, "b1": g_a1.sum(axis=0),
        "w2": h1.T @ g_a2, "b2": g_a2.sum(axis=0),
        "wp": h2.T @ g_flat, "bp": g_flat.sum(axis=0),
        "wv": h2.T @ g_v, "bv": np.asarray(g_v.sum()),
    }
    parts = {
        "policy_loss": float(pg_loss),
        "value_loss": float(v_loss),
        "entropy": float(entropy),
        "clip_frac": float(np.mean(~active)),
        "approx_kl": float(np.mean(logp_old - logp_new)),
    }
    return float(loss), grads, parts


class AdamState:
    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items() if k != "shape"}
        self.v = {k: np.zeros_like(v) for k, v in params.items() if k != "shape"}

    def step(self, params: Params, grads: Params, lr: float) -> Params:
        self.t += 1
        out = dict(params)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def ppo_update(params: Params, batch: Dict[str, np.ndarray], cfg: PpoConfig,
               rng: Optional[np.random.Generator] = None,
               opt: Optional[AdamState] = None) -> Tuple[Params, Dict[str, float]]:
    """Minibatch-epoch pass over one rollout batch.

    Advantages are normalized here (zero mean, unit variance over the batch);
    a non-finite loss aborts the update and returns the incoming parameters.
    """
    if len(batch["obs"]) == 0:
        raise ValueError("empty batch")
    rng = rng or np.random.Generator(np.random.PCG64(cfg.seed))
    opt = opt or AdamState(params)
    adv = batch["advantages"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    batch = dict(batch, advantages=adv)

    N = len(adv)
    diag: Dict[str, float] = {}
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for lo in range(0, N, cfg.minibatch):
            idx = order[lo:lo + cfg.minibatch]
            mini = {k: batch[k][idx] for k in
                    ("obs", "actions", "logp_old", "advantages", "returns")}
            loss, grads, parts = loss_and_grads(params, mini, cfg)
            if not np.isfinite(loss):
                diag.update(parts, loss=loss, aborted=1.0)
                return params, diag
            params = opt.step(params, grads, cfg.lr)
            diag.update(parts, loss=loss, aborted=0.0)
    return params, diag


# -- training loop -----------------------------------------------------------


def make_policy_fn(params: Params, greedy: bool = False) -> Callable:
    """Closure mapping (obs, rng) -> (actions, joint logp, value)."""
    def policy(obs: np.ndarray, rng: np.random.Generator):
        logits, value = policy_forward(params, obs)
        if greedy:
            actions = greedy_action(logits)
            logp = float(_log_softmax(logits)[np.arange(len(actions)), actions].sum())
        else:
            actions, logp = sample_action(logits, rng)
        return actions, logp, value
    return policy


def train(cfg: PpoConfig, make_env: Callable,
          checkpoint_path: Optional[str] = None,
          curve_path: Optional[str] = None,
          log: Optional[Callable[[str], None]] = None) -> Tuple[Params, List[dict]]:
    """Alternate vectorized rollouts and clipped-surrogate updates.

    Returns the final parameters and the per-iteration learning curve; both
    are also written to the given paths.  Fully deterministic per cfg.seed.
    """
    from .rl_env import vector_rollout

    probe = make_env()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = init_params(rng, probe.obs_dim, probe.n_points, probe.n_actions,
                         cfg.hidden)
    opt = AdamState(params)
    envs = [make_env() for _ in range(cfg.n_envs)]
    curve: List[dict] = []
    steps_done = 0
    t0 = time.monotonic()

    for it in range(cfg.iterations):
        policy = make_policy_fn(params)
        seeds = [cfg.seed + 100_000 + it * cfg.n_envs + i
                 for i in range(cfg.n_envs)]
        trajs = vector_rollout(None, policy, seeds,
                               max_decisions=cfg.max_decisions,
                               parallel=cfg.parallel_rollouts, envs=envs)
        obs, acts, logp, advs, rets = [], [], [], [], []
        returns_per_ep = []
        for tr in trajs:
            boot = policy_forward(params, tr["final_obs"])[1]
            a, r = gae(tr["rewards"] * cfg.reward_scale, tr["values"],
                       tr["dones"], boot, cfg.gamma, cfg.lam)
            obs.append(tr["obs"])
            acts.append(tr["actions"])
            logp.append(tr["logp"])
            advs.append(a)
            rets.append(r)
            returns_per_ep.append(float(tr["rewards"].sum()))
            steps_done += len(tr["rewards"])
        batch = {
            "obs": np.concatenate(obs),
            "actions": np.concatenate(acts),
            "logp_old": np.concatenate(logp),
            "advantages": np.concatenate(advs),
            "returns": np.concatenate(rets),
        }
        params, diag = ppo_update(params, batch, cfg, rng, opt)
        rec = {
            "iteration": it,
            "steps": steps_done,
            "mean_return": float(np.mean(returns_per_ep)),
            "policy_loss": diag.get("policy_loss", 0.0),
            "value_loss": diag.get("value_loss", 0.0),
            "entropy": diag.get("entropy", 0.0),
            "clip_frac": diag.get("clip_frac", 0.0),
        }
        curve.append(rec)
        if log is not None:
            log(f"iter {it:3d}  steps {steps_done:7d}  "
                f"return {rec['mean_return']:10.2f}  "
                f"ent {rec['entropy']:6.3f}  "
                f"[{time.monotonic() - t0:6.1f}s]")
        if curve_path is not None:
            write_atomic(curve_path, dumps_jsonl(curve))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
    return params, curve


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str, params: Params) -> None:
    arrays = dict(params)
    arrays["version"] = np.array([CHECKPOINT_VERSION], dtype=np.int64)
    save_npz(path, arrays)


def load_checkpoint(path: str) -> Params:
    arrays = load_npz(path)
    version = arrays.pop("version", None)
    if version is None or int(version[0]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    return arrays

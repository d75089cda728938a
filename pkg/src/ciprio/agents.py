"""Trainable ranking agents: a small feedforward approximator with manual
backprop, a DQN for discrete actions, and an n-step actor-critic with
categorical and Gaussian heads.

Everything is plain float64 numpy. Gradients are computed analytically in
the head loss functions below; the test suite checks every head against
central finite differences, so keep loss code and gradient code together.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass, replace

import numpy as np

from .envs import EpisodeOutcome

CHECKPOINT_VERSION = 1

HEADS = ("q_values", "categorical", "gaussian_scalar", "scalar_value")


class CheckpointError(Exception):
    """A checkpoint file is missing, corrupt, or incompatible."""


@dataclass(frozen=True)
class ApproximatorConfig:
    """Shape and optimizer settings for one feedforward approximator."""

    input_dim: int
    head: str
    n_actions: int = 0
    hidden_layers: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.head in ("q_values", "categorical") and self.n_actions < 1:
            raise ValueError(f"head {self.head!r} needs n_actions >= 1")
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be tanh or relu, got {self.activation!r}")
        # 0 is allowed so a frozen agent can be expressed as lr=0.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    @property
    def output_dim(self) -> int:
        return self.n_actions if self.head in ("q_values", "categorical") else 1


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: int | float
    reward: float
    next_obs: np.ndarray
    done: bool


class Mlp:
    """Feedforward net with a linear output layer and analytic backprop."""

    def __init__(self, config: ApproximatorConfig, rng: np.random.Generator):
        self.config = config
        sizes = [config.input_dim, *config.hidden_layers, config.output_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        gain = 2.0 if config.activation == "relu" else 1.0
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            scale = np.sqrt(gain / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = params[2 * i].copy()
            self.biases[i] = params[2 * i + 1].copy()

    def _act(self, z):
        return np.tanh(z) if self.config.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z, a):
        if self.config.activation == "tanh":
            return 1.0 - a * a
        return (z > 0).astype(np.float64)

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Batch forward; ``x`` is (B, input_dim) or a single observation."""
        squeeze = x.ndim == 1
        a = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if a.shape[1] != self.config.input_dim:
            raise ValueError(
                f"observation dim {a.shape[1]} != input_dim {self.config.input_dim}"
            )
        pre, post = [], [a]
        n_hidden = len(self.weights) - 1
        for i in range(n_hidden):
            z = a @ self.weights[i].T + self.biases[i]
            a = self._act(z)
            pre.append(z)
            post.append(a)
        y = a @ self.weights[-1].T + self.biases[-1]
        if squeeze:
            y = y[0]
        if want_cache:
            return y, (pre, post)
        return y

    def backward(self, cache, dy: np.ndarray) -> list[np.ndarray]:
        """Gradients of a scalar loss given dloss/doutput, matching params()."""
        pre, post = cache
        dz = np.atleast_2d(dy)
        grads: list[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(dz.sum(axis=0))          # bias
            grads.append(dz.T @ post[i])          # weight
            if i > 0:
                da = dz @ self.weights[i]
                dz = da * self._act_grad(pre[i - 1], post[i])
        grads.reverse()
        return grads

    def clone(self) -> "Mlp":
        twin = Mlp.__new__(Mlp)
        twin.config = self.config
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin


class Adam:
    """Adaptive-moment gradient descent over a fixed list of parameters."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


# ---------------------------------------------------------------------------
# Head losses with analytic gradients
# ---------------------------------------------------------------------------

def q_value_loss(net: Mlp, obs, actions, targets):
    """Mean squared TD error on the chosen actions."""
    obs = np.atleast_2d(obs)
    actions = np.asarray(actions, dtype=int)
    targets = np.asarray(targets, dtype=np.float64)
    b = obs.shape[0]
    q, cache = net.forward(obs, want_cache=True)
    q_sel = q[np.arange(b), actions]
    err = q_sel - targets
    loss = float(np.mean(err * err))
    dy = np.zeros_like(q)
    dy[np.arange(b), actions] = 2.0 * err / b
    return loss, net.backward(cache, dy)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def categorical_policy_loss(net: Mlp, obs, actions, advantages, entropy_coef: float):
    """Policy-gradient loss -log pi(a) * A minus an entropy bonus."""
    obs = np.atleast_2d(obs)
    actions = np.asarray(actions, dtype=int)
    adv = np.asarray(advantages, dtype=np.float64)
    b = obs.shape[0]
    logits, cache = net.forward(obs, want_cache=True)
    probs = softmax(logits)
    logp = np.log(probs[np.arange(b), actions])
    entropy = -np.sum(probs * np.log(probs + 1e-12), axis=1)
    loss = float(np.mean(-logp * adv) - entropy_coef * np.mean(entropy))

    one_hot = np.zeros_like(probs)
    one_hot[np.arange(b), actions] = 1.0
    dlogits = (probs - one_hot) * adv[:, None]
    dlogits += entropy_coef * probs * (np.log(probs + 1e-12) + entropy[:, None])
    return loss, net.backward(cache, dlogits / b)


def gaussian_policy_loss(net: Mlp, log_std: float, obs, actions, advantages,
                         entropy_coef: float):
    """Gaussian policy loss; the mean is the sigmoid-squashed net output.

    Returns (loss, net gradients, dloss/dlog_std). Entropy of a Gaussian
    depends only on log_std.
    """
    obs = np.atleast_2d(obs)
    acts = np.asarray(actions, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    b = obs.shape[0]
    raw, cache = net.forward(obs, want_cache=True)
    raw = raw[:, 0]
    mean = 1.0 / (1.0 + np.exp(-raw))
    var = np.exp(2.0 * log_std)
    z2 = (acts - mean) ** 2 / var
    logp = -0.5 * z2 - log_std - 0.5 * np.log(2.0 * np.pi)
    entropy = log_std + 0.5 * np.log(2.0 * np.pi * np.e)
    loss = float(np.mean(-logp * adv) - entropy_coef * entropy)

    dmean = -adv * (acts - mean) / var
    draw = dmean * mean * (1.0 - mean)
    grads = net.backward(cache, (draw / b)[:, None])
    dlog_std = float(np.mean(-adv * (z2 - 1.0)) - entropy_coef)
    return loss, grads, dlog_std


def value_mse_loss(net: Mlp, obs, returns):
    """Mean squared error of the scalar value head against returns."""
    obs = np.atleast_2d(obs)
    ret = np.asarray(returns, dtype=np.float64)
    b = obs.shape[0]
    v, cache = net.forward(obs, want_cache=True)
    err = v[:, 0] - ret
    loss = float(np.mean(err * err))
    return loss, net.backward(cache, (2.0 * err / b)[:, None])


# ---------------------------------------------------------------------------
# Replay buffer and exploration schedule
# ---------------------------------------------------------------------------

class RunningNorm:
    """Per-dimension running standardization of observations (Welford).

    Stats are updated from training observations only; prediction uses the
    frozen stats, so evaluating a cycle cannot feed information back into
    the features it is ranked with.
    """

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, obs: np.ndarray) -> None:
        self.count += 1
        delta = obs - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (obs - self.mean)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return np.asarray(obs, dtype=np.float64)
        std = np.sqrt(self.m2 / self.count)
        return (obs - self.mean) / np.maximum(std, 1e-6)


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform minibatch sampling."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._items) < batch_size:
            raise ValueError(
                f"buffer holds {len(self._items)} transitions, need {batch_size}"
            )
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]

    def snapshot(self) -> list[Transition]:
        return list(self._items)


def epsilon_schedule(step: int, budget: int, start: float = 1.0,
                     end: float = 0.05, fraction: float = 0.2) -> float:
    """Linear decay from start to end over the first ``fraction`` of budget."""
    if budget <= 0:
        return end
    progress = min(1.0, step / (fraction * budget))
    return start + (end - start) * progress


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

def _batch_arrays(batch: Sequence[Transition]):
    obs = np.stack([t.obs for t in batch])
    actions = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    next_obs = np.stack([t.next_obs for t in batch])
    dones = np.array([t.done for t in batch], dtype=np.float64)
    return obs, actions, rewards, next_obs, dones


class DqnAgent:
    """Value-based agent for discrete action spaces.

    One gradient step per observed transition once the buffer can fill a
    minibatch; the target network is synchronized every ``target_sync``
    gradient steps. Exploration is epsilon-greedy with a linear schedule
    restarted at each training instance.
    """

    kind = "dqn"

    def __init__(self, config: ApproximatorConfig, *, gamma: float = 0.99,
                 buffer_capacity: int = 50_000, batch_size: int = 32,
                 target_sync: int = 500, epsilon_start: float = 1.0,
                 epsilon_min: float = 0.05, epsilon_fraction: float = 0.2,
                 seed: int | None = 0):
        if config.head != "q_values":
            raise ValueError("DQN requires the q_values head (discrete actions only)")
        self.config = config
        self.gamma = gamma
        self.batch_size = batch_size
        self.target_sync = target_sync
        self.epsilon_start = epsilon_start
        self.epsilon_min = epsilon_min
        self.epsilon_fraction = epsilon_fraction
        self.rng = np.random.default_rng(seed)
        self.online = Mlp(config, self.rng)
        self.target = self.online.clone()
        self.optimizer = Adam(self.online.params(), config.learning_rate)
        self.buffer = ReplayBuffer(buffer_capacity)
        self.norm = RunningNorm(config.input_dim)
        self.updates_run = 0
        self.total_env_steps = 0
        self._instance_step = 0
        self._instance_budget = 0

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    def begin_training_instance(self, budget: int) -> None:
        self._instance_budget = budget
        self._instance_step = 0

    def epsilon(self) -> float:
        return epsilon_schedule(
            self._instance_step, self._instance_budget,
            self.epsilon_start, self.epsilon_min, self.epsilon_fraction,
        )

    def predict(self, obs, explore: bool, mask: np.ndarray | None = None):
        q = self.online.forward(self.norm.normalize(np.asarray(obs, dtype=np.float64)))
        if mask is not None:
            q = np.where(mask, q, -np.inf)
        if explore and self.rng.random() < self.epsilon():
            choices = np.flatnonzero(mask) if mask is not None else np.arange(self.n_actions)
            return int(self.rng.choice(choices))
        return int(np.argmax(q))

    def observe(self, transition: Transition) -> None:
        self.total_env_steps += 1
        self._instance_step += 1
        self.norm.update(np.asarray(transition.obs, dtype=np.float64))
        self.buffer.push(transition)
        if len(self.buffer) >= self.batch_size:
            self.update(self.buffer.sample(self.batch_size, self.rng))

    def update(self, batch: Sequence[Transition]) -> float:
        """One gradient step on the TD error of a transition batch."""
        obs, actions, rewards, next_obs, dones = _batch_arrays(batch)
        obs = self.norm.normalize(obs)
        next_obs = self.norm.normalize(next_obs)
        next_q = self.target.forward(next_obs).max(axis=1)
        targets = rewards + self.gamma * (1.0 - dones) * next_q
        loss, grads = q_value_loss(self.online, obs, actions.astype(int), targets)
        params = self.online.params()
        self.optimizer.step(params, grads)
        self.online.set_params(params)
        self.updates_run += 1
        if self.updates_run % self.target_sync == 0:
            self.target = self.online.clone()
        return loss

    def finish_episode(self) -> None:
        pass

    # -- checkpoint plumbing --

    def _meta(self) -> dict:
        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "gamma": self.gamma,
            "buffer_capacity": self.buffer.capacity,
            "batch_size": self.batch_size,
            "target_sync": self.target_sync,
            "epsilon_start": self.epsilon_start,
            "epsilon_min": self.epsilon_min,
            "epsilon_fraction": self.epsilon_fraction,
            "updates_run": self.updates_run,
            "total_env_steps": self.total_env_steps,
            "instance_step": self._instance_step,
            "instance_budget": self._instance_budget,
            "rng_state": self.rng.bit_generator.state,
            "buffer_len": len(self.buffer),
            "buffer_next": self.buffer._next,
            "adam_t": self.optimizer.t,
            "norm_count": self.norm.count,
        }

    def _arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.online.params()):
            out[f"online_{i}"] = p
        for i, p in enumerate(self.target.params()):
            out[f"target_{i}"] = p
        for i, m in enumerate(self.optimizer.m):
            out[f"adam_m_{i}"] = m
        for i, v in enumerate(self.optimizer.v):
            out[f"adam_v_{i}"] = v
        out["norm_mean"] = self.norm.mean
        out["norm_m2"] = self.norm.m2
        items = self.buffer.snapshot()
        if items:
            obs, actions, rewards, next_obs, dones = _batch_arrays(items)
            out.update(
                buf_obs=obs, buf_actions=actions.astype(np.float64),
                buf_rewards=rewards, buf_next_obs=next_obs, buf_dones=dones,
            )
        return out

    @classmethod
    def _restore(cls, meta: dict, arrays) -> "DqnAgent":
        config = ApproximatorConfig(**{
            **meta["config"], "hidden_layers": tuple(meta["config"]["hidden_layers"]),
        })
        agent = cls(
            config, gamma=meta["gamma"], buffer_capacity=meta["buffer_capacity"],
            batch_size=meta["batch_size"], target_sync=meta["target_sync"],
            epsilon_start=meta["epsilon_start"], epsilon_min=meta["epsilon_min"],
            epsilon_fraction=meta["epsilon_fraction"],
        )
        n = len(agent.online.params())
        agent.online.set_params([arrays[f"online_{i}"] for i in range(n)])
        agent.target.set_params([arrays[f"target_{i}"] for i in range(n)])
        agent.optimizer.m = [arrays[f"adam_m_{i}"].copy() for i in range(n)]
        agent.optimizer.v = [arrays[f"adam_v_{i}"].copy() for i in range(n)]
        agent.optimizer.t = meta["adam_t"]
        agent.norm.count = meta["norm_count"]
        agent.norm.mean = arrays["norm_mean"].copy()
        agent.norm.m2 = arrays["norm_m2"].copy()
        agent.updates_run = meta["updates_run"]
        agent.total_env_steps = meta["total_env_steps"]
        agent._instance_step = meta["instance_step"]
        agent._instance_budget = meta["instance_budget"]
        agent.rng.bit_generator.state = meta["rng_state"]
        if meta["buffer_len"]:
            discrete = config.head in ("q_values", "categorical")
            for i in range(meta["buffer_len"]):
                action = arrays["buf_actions"][i]
                agent.buffer.push(Transition(
                    obs=arrays["buf_obs"][i],
                    action=int(action) if discrete else float(action),
                    reward=float(arrays["buf_rewards"][i]),
                    next_obs=arrays["buf_next_obs"][i],
                    done=bool(arrays["buf_dones"][i]),
                ))
            agent.buffer._next = meta["buffer_next"]
        return agent


class ActorCriticAgent:
    """n-step advantage actor-critic for discrete or continuous actions.

    The policy head is categorical for discrete spaces and a squashed
    Gaussian with a learned state-independent log std for the continuous
    (0, 1] space. The critic is a separate value network of the same shape.
    """

    kind = "actor_critic"

    def __init__(self, policy_config: ApproximatorConfig, *, gamma: float = 0.99,
                 n_step: int = 5, entropy_coef: float = 0.01,
                 seed: int | None = 0):
        if policy_config.head not in ("categorical", "gaussian_scalar"):
            raise ValueError("actor-critic needs a categorical or gaussian_scalar head")
        self.config = policy_config
        self.gamma = gamma
        self.n_step = n_step
        self.entropy_coef = entropy_coef
        self.rng = np.random.default_rng(seed)
        self.policy = Mlp(policy_config, self.rng)
        value_config = replace(policy_config, head="scalar_value", n_actions=0)
        self.value = Mlp(value_config, self.rng)
        self.log_std = np.array(-1.0) if policy_config.head == "gaussian_scalar" else None
        policy_params = self.policy.params()
        if self.log_std is not None:
            policy_params = policy_params + [self.log_std]
        self.policy_opt = Adam(policy_params, policy_config.learning_rate)
        self.value_opt = Adam(self.value.params(), policy_config.learning_rate)
        self.norm = RunningNorm(policy_config.input_dim)
        self.updates_run = 0
        self.total_env_steps = 0
        self._segment: list[Transition] = []
        self._instance_step = 0
        self._instance_budget = 0

    @property
    def continuous(self) -> bool:
        return self.config.head == "gaussian_scalar"

    def begin_training_instance(self, budget: int) -> None:
        self._instance_budget = budget
        self._instance_step = 0
        self._segment = []

    def predict(self, obs, explore: bool, mask: np.ndarray | None = None):
        obs = self.norm.normalize(np.asarray(obs, dtype=np.float64))
        out = self.policy.forward(obs)
        if self.continuous:
            mean = 1.0 / (1.0 + np.exp(-out[0]))
            if explore:
                action = self.rng.normal(mean, np.exp(self.log_std))
            else:
                action = mean
            return float(min(1.0, max(action, 1e-12)))
        probs = softmax(out)
        if mask is not None:
            probs = np.where(mask, probs, 0.0)
            total = probs.sum()
            if total <= 0.0:
                probs = mask / mask.sum()
            else:
                probs = probs / total
        if explore:
            return int(self.rng.choice(len(probs), p=probs))
        return int(np.argmax(probs))

    def observe(self, transition: Transition) -> None:
        self.total_env_steps += 1
        self._instance_step += 1
        self.norm.update(np.asarray(transition.obs, dtype=np.float64))
        self._segment.append(transition)
        if len(self._segment) >= self.n_step or transition.done:
            self.update(self._segment)
            self._segment = []

    def update(self, segment: Sequence[Transition]) -> tuple[float, float]:
        """One policy and one value gradient step on an n-step segment."""
        if not segment:
            raise ValueError("empty trajectory segment")
        obs, actions, rewards, _, _ = _batch_arrays(segment)
        obs = self.norm.normalize(obs)
        last = segment[-1]
        bootstrap = 0.0
        if not last.done:
            bootstrap = float(self.value.forward(self.norm.normalize(last.next_obs))[0])
        returns = np.empty(len(segment))
        acc = bootstrap
        for i in range(len(segment) - 1, -1, -1):
            acc = rewards[i] + self.gamma * acc
            returns[i] = acc
        values = self.value.forward(obs)[:, 0]
        advantages = returns - values

        if self.continuous:
            ploss, grads, dlog_std = gaussian_policy_loss(
                self.policy, float(self.log_std), obs, actions, advantages,
                self.entropy_coef,
            )
            params = self.policy.params() + [self.log_std]
            self.policy_opt.step(params, grads + [np.array(dlog_std)])
            self.policy.set_params(params[:-1])
            self.log_std = params[-1]
        else:
            ploss, grads = categorical_policy_loss(
                self.policy, obs, actions.astype(int), advantages, self.entropy_coef,
            )
            params = self.policy.params()
            self.policy_opt.step(params, grads)
            self.policy.set_params(params)

        vloss, vgrads = value_mse_loss(self.value, obs, returns)
        vparams = self.value.params()
        self.value_opt.step(vparams, vgrads)
        self.value.set_params(vparams)
        self.updates_run += 1
        return ploss, vloss

    def finish_episode(self) -> None:
        if self._segment:
            self.update(self._segment)
            self._segment = []

    # -- checkpoint plumbing --

    def _meta(self) -> dict:
        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "gamma": self.gamma,
            "n_step": self.n_step,
            "entropy_coef": self.entropy_coef,
            "updates_run": self.updates_run,
            "total_env_steps": self.total_env_steps,
            "instance_step": self._instance_step,
            "instance_budget": self._instance_budget,
            "rng_state": self.rng.bit_generator.state,
            "segment_len": len(self._segment),
            "policy_adam_t": self.policy_opt.t,
            "value_adam_t": self.value_opt.t,
            "norm_count": self.norm.count,
        }

    def _arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.policy.params()):
            out[f"policy_{i}"] = p
        for i, p in enumerate(self.value.params()):
            out[f"value_{i}"] = p
        if self.log_std is not None:
            out["log_std"] = self.log_std
        for name, opt in (("popt", self.policy_opt), ("vopt", self.value_opt)):
            for i, m in enumerate(opt.m):
                out[f"{name}_m_{i}"] = m
            for i, v in enumerate(opt.v):
                out[f"{name}_v_{i}"] = v
        out["norm_mean"] = self.norm.mean
        out["norm_m2"] = self.norm.m2
        if self._segment:
            obs, actions, rewards, next_obs, dones = _batch_arrays(self._segment)
            out.update(
                seg_obs=obs, seg_actions=actions.astype(np.float64),
                seg_rewards=rewards, seg_next_obs=next_obs, seg_dones=dones,
            )
        return out

    @classmethod
    def _restore(cls, meta: dict, arrays) -> "ActorCriticAgent":
        config = ApproximatorConfig(**{
            **meta["config"], "hidden_layers": tuple(meta["config"]["hidden_layers"]),
        })
        agent = cls(
            config, gamma=meta["gamma"], n_step=meta["n_step"],
            entropy_coef=meta["entropy_coef"],
        )
        n_p = len(agent.policy.params())
        n_v = len(agent.value.params())
        agent.policy.set_params([arrays[f"policy_{i}"] for i in range(n_p)])
        agent.value.set_params([arrays[f"value_{i}"] for i in range(n_v)])
        if agent.log_std is not None:
            agent.log_std = arrays["log_std"].copy()
        for name, opt in (("popt", agent.policy_opt), ("vopt", agent.value_opt)):
            opt.m = [arrays[f"{name}_m_{i}"].copy() for i in range(len(opt.m))]
            opt.v = [arrays[f"{name}_v_{i}"].copy() for i in range(len(opt.v))]
        agent.policy_opt.t = meta["policy_adam_t"]
        agent.value_opt.t = meta["value_adam_t"]
        agent.norm.count = meta["norm_count"]
        agent.norm.mean = arrays["norm_mean"].copy()
        agent.norm.m2 = arrays["norm_m2"].copy()
        agent.updates_run = meta["updates_run"]
        agent.total_env_steps = meta["total_env_steps"]
        agent._instance_step = meta["instance_step"]
        agent._instance_budget = meta["instance_budget"]
        agent.rng.bit_generator.state = meta["rng_state"]
        for i in range(meta["segment_len"]):
            action = arrays["seg_actions"][i]
            agent._segment.append(Transition(
                obs=arrays["seg_obs"][i],
                action=float(action) if agent.continuous else int(action),
                reward=float(arrays["seg_rewards"][i]),
                next_obs=arrays["seg_next_obs"][i],
                done=bool(arrays["seg_dones"][i]),
            ))
        return agent


AGENT_KINDS = {"dqn": DqnAgent, "actor_critic": ActorCriticAgent}


def run_training_episode(agent, env) -> EpisodeOutcome:
    """Drive one full predict/step/observe episode and return its outcome."""
    obs = env.reset()
    while not env.done:
        action = agent.predict(obs, explore=True)
        step = env.step(action)
        agent.observe(Transition(obs, action, step.reward, step.obs, step.done))
        obs = step.obs
    agent.finish_episode()
    return env.outcome()


def save_checkpoint(agent, path) -> None:
    """Write a versioned, lossless snapshot of the agent's training state."""
    meta = agent._meta()
    meta["version"] = CHECKPOINT_VERSION
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **agent._arrays())


def load_checkpoint(path):
    """Reconstruct an agent from ``save_checkpoint`` output."""
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata record")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    kind = meta.get("kind")
    if kind not in AGENT_KINDS:
        raise CheckpointError(f"unknown agent kind {kind!r} in checkpoint")
    return AGENT_KINDS[kind]._restore(meta, arrays)

"""Dueling deep Q-network: training on exhaustively enumerated transitions
and greedy evaluation with a forced terminal classification.

There is no exploration schedule: the buffer enumerates every action at
every training state once, so learning reduces to fitting Bellman targets
over a fixed, shuffled transition set.  Q-values aggregate a scalar state
value and mean-centred action advantages.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from eegraph.env import Episode, RewardConfig, step
from eegraph.tensor import (
    AdamState,
    Tensor,
    TrainingDivergedError,
    adam_step,
    glorot_uniform,
    linear,
    linear_backward,
    relu,
    relu_backward,
)


@dataclass(frozen=True)
class DuelingConfig:
    """Network widths; the paper-scale head is 512 -> 1024 -> 2048 with
    64-wide value/advantage streams over 5 actions."""

    input_dim: int = 512
    trunk: tuple[int, ...] = (1024, 2048)
    head_hidden: int = 64
    n_actions: int = 5

    @classmethod
    def paper(cls) -> "DuelingConfig":
        return cls()


def dueling_aggregate(value: np.ndarray, advantages: np.ndarray) -> np.ndarray:
    """Q = V + (A - mean_a A); value (B, 1), advantages (B, n_actions)."""
    return value + advantages - advantages.mean(axis=-1, keepdims=True)


class DuelingNet:
    """MLP trunk splitting into value and advantage streams.

    ReLU follows every layer except the two stream outputs, which must stay
    unbounded to represent negative returns.
    """

    def __init__(self, config: DuelingConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)

        def make(n_in, n_out, tag):
            w = Tensor(glorot_uniform(rng, n_in, n_out, (n_in, n_out)), name=f"{tag}.w")
            b = Tensor(np.zeros(n_out), name=f"{tag}.b")
            return w, b

        self.trunk: list[tuple[Tensor, Tensor]] = []
        d = config.input_dim
        for i, width in enumerate(config.trunk):
            self.trunk.append(make(d, width, f"trunk{i + 1}"))
            d = width
        self.val_hidden = make(d, config.head_hidden, "value_hidden")
        self.val_out = make(config.head_hidden, 1, "value_out")
        self.adv_hidden = make(d, config.head_hidden, "adv_hidden")
        self.adv_out = make(config.head_hidden, config.n_actions, "adv_out")

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in [*self.trunk, self.val_hidden, self.val_out,
                     self.adv_hidden, self.adv_out]:
            params.extend([w, b])
        return params

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=np.float64)

    def clone(self) -> "DuelingNet":
        other = DuelingNet(self.config)
        other.load_state(self.state_dict())
        return other

    def forward(self, s: np.ndarray):
        """Q-values for a batch (B, input_dim); returns (q, cache)."""
        h = s
        trunk_cache = []
        for w, b in self.trunk:
            z = linear(h, w, b)
            trunk_cache.append((h, z))
            h = relu(z)
        zv1 = linear(h, *self.val_hidden)
        hv = relu(zv1)
        v = linear(hv, *self.val_out)
        za1 = linear(h, *self.adv_hidden)
        ha = relu(za1)
        adv = linear(ha, *self.adv_out)
        q = dueling_aggregate(v, adv)
        cache = (trunk_cache, h, zv1, hv, za1, ha, adv)
        return q, cache

    def backward(self, grad_q: np.ndarray, cache) -> None:
        trunk_cache, h, zv1, hv, za1, ha, adv = cache
        # Q = V + A - mean(A): dV = sum_a dQ, dA_b = dQ_b - (1/n) sum_a dQ_a
        dv = grad_q.sum(axis=-1, keepdims=True)
        dadv = grad_q - grad_q.sum(axis=-1, keepdims=True) / self.config.n_actions
        dhv = linear_backward(dv, hv, *self.val_out)
        dzv1 = relu_backward(dhv, zv1)
        dh_v = linear_backward(dzv1, h, *self.val_hidden)
        dha = linear_backward(dadv, ha, *self.adv_out)
        dza1 = relu_backward(dha, za1)
        dh_a = linear_backward(dza1, h, *self.adv_hidden)
        g = dh_v + dh_a
        for (w, b), (h_in, z) in zip(reversed(self.trunk), reversed(trunk_cache)):
            g = relu_backward(g, z)
            g = linear_backward(g, h_in, w, b)

    def q_values(self, s: np.ndarray) -> np.ndarray:
        """Q-values for a single state vector (input_dim,)."""
        q, _ = self.forward(np.asarray(s, dtype=np.float64)[None])
        return q[0]


# ---------------------------------------------------------------------------
# transitions and targets


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray | None   # None marks Terminal

    @property
    def terminal(self) -> bool:
        return self.s_next is None


def build_buffer(train_episodes: list[Episode], cfg: RewardConfig,
                 seed: int = 0) -> list[Transition]:
    """Enumerate all 5 actions at every state of every training episode.

    Yields 5 x (episode count) x horizon transitions, shuffled by ``seed``.
    Skipping at the last state of an episode transitions to Terminal.
    """
    if not train_episodes:
        raise ValueError("no training episodes")
    transitions: list[Transition] = []
    for ep in train_episodes:
        y = ep.label
        for t, state in enumerate(ep.states):
            nxt = ep.states[t + 1] if t + 1 < ep.horizon else None
            for a in range(5):
                res = step(state, a, y, cfg, next_state=nxt)
                transitions.append(Transition(
                    s=state.features, a=a, r=res.reward,
                    s_next=None if res.terminal else res.next_state.features))
    order = np.random.default_rng(seed).permutation(len(transitions))
    return [transitions[i] for i in order]


def bellman_target(t: Transition, target_net: DuelingNet, gamma: float) -> float:
    """r for terminal transitions, else r + gamma * max_a Q_target(s')."""
    if t.terminal:
        return t.r
    return t.r + gamma * float(np.max(target_net.q_values(t.s_next)))


def _batch_targets(batch: list[Transition], target_net: DuelingNet,
                   gamma: float) -> np.ndarray:
    targets = np.array([t.r for t in batch])
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if live:
        nxt = np.stack([batch[i].s_next for i in live])
        q, _ = target_net.forward(nxt)
        targets[live] += gamma * q.max(axis=1)
    return targets


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    epochs: int = 150
    batch_size: int = 63
    target_update_every: int = 50   # counted in parameter updates
    lr: float = 1e-4
    l2_lambda: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma", "epochs", "batch_size", "target_update_every", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def train_dqn(buffer: list[Transition], cfg: TrainerConfig,
              net: DuelingNet | None = None,
              config: DuelingConfig | None = None,
              verbose: bool = False) -> DuelingNet:
    """Fit Bellman targets over the fixed transition set.

    The loss per batch is the mean squared error between targets and the
    online Q-value of the taken action only.  The target network is a hard
    copy of the online net refreshed every ``target_update_every`` parameter
    updates.  L2 weight decay applies on the gradient side via Adam.
    """
    if not buffer:
        raise ValueError("empty transition buffer")
    if net is None:
        dim = buffer[0].s.shape[0]
        net = DuelingNet(config or DuelingConfig(input_dim=dim), seed=cfg.seed)
    target_net = net.clone()
    params = net.parameters()
    opt = AdamState.for_params(params, lr=cfg.lr, l2_lambda=cfg.l2_lambda)

    batches = [buffer[i:i + cfg.batch_size] for i in range(0, len(buffer), cfg.batch_size)]
    updates = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for batch in batches:
            targets = _batch_targets(batch, target_net, cfg.gamma)
            s = np.stack([t.s for t in batch])
            acts = np.array([t.a for t in batch])
            q, cache = net.forward(s)
            taken = q[np.arange(len(batch)), acts]
            err = taken - targets
            loss = float(np.mean(err ** 2))
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            grad_q = np.zeros_like(q)
            grad_q[np.arange(len(batch)), acts] = 2.0 * err / len(batch)
            net.zero_grads()
            net.backward(grad_q, cache)
            adam_step(params, None, opt)
            updates += 1
            if updates % cfg.target_update_every == 0:
                target_net.load_state(net.state_dict())
            epoch_loss += loss * len(batch)
        if verbose:
            print(f"epoch {epoch:4d}  loss {epoch_loss / len(buffer):.6f}")
    return net


def save_agent_checkpoint(path, net: DuelingNet, trainer_cfg: TrainerConfig,
                          reward_cfg: RewardConfig, extra_meta: dict | None = None) -> None:
    """Same container format as the classifier checkpoints."""
    from eegraph.checkpoint import save_checkpoint

    meta = {
        "config": {
            "input_dim": net.config.input_dim,
            "trunk": list(net.config.trunk),
            "head_hidden": net.config.head_hidden,
            "n_actions": net.config.n_actions,
        },
        "trainer": {
            "gamma": trainer_cfg.gamma, "epochs": trainer_cfg.epochs,
            "batch_size": trainer_cfg.batch_size,
            "target_update_every": trainer_cfg.target_update_every,
            "lr": trainer_cfg.lr, "l2_lambda": trainer_cfg.l2_lambda,
            "seed": trainer_cfg.seed,
        },
        "reward": {
            "r_right": reward_cfg.r_right, "r_wrong": reward_cfg.r_wrong,
            "r_skip": reward_cfg.r_skip, "horizon": reward_cfg.horizon,
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, "dqn", net.state_dict(), meta)


def load_agent_checkpoint(path) -> tuple[DuelingNet, dict]:
    from eegraph.checkpoint import load_checkpoint

    _, arrays, meta = load_checkpoint(path, expect_kind="dqn")
    raw = dict(meta["config"])
    raw["trunk"] = tuple(raw["trunk"])
    net = DuelingNet(DuelingConfig(**raw))
    net.load_state(arrays)
    return net, meta


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    label: int
    predicted: int
    correct: bool
    classification_time: int   # 1-based: deciding at the first state gives 1
    cumulative_reward: float


def evaluate(net, episode: Episode, cfg: RewardConfig) -> EvalResult:
    """Greedy rollout; at t = H-1 the argmax is restricted to classes 1..4.

    ``net`` needs only a ``q_values(features) -> (5,)`` method, so hand-built
    policies can stand in for a trained network.
    """
    horizon = episode.horizon
    r_sum = 0.0
    for t, state in enumerate(episode.states):
        q = np.asarray(net.q_values(state.features))
        if t < horizon - 1:
            action = int(np.argmax(q))
        else:
            action = 1 + int(np.argmax(q[1:]))
        nxt = episode.states[t + 1] if t + 1 < horizon else None
        res = step(state, action, episode.label, cfg, next_state=nxt)
        r_sum += res.reward
        if action >= 1:
            return EvalResult(label=episode.label, predicted=action,
                              correct=action == episode.label,
                              classification_time=t + 1, cumulative_reward=r_sum)
    raise AssertionError("unreachable: the final step forces a classification")


@dataclass
class MetricsSummary:
    accuracy: float
    macro_precision: float
    macro_sensitivity: float
    macro_f1: float
    mean_classification_time: float
    confusion: np.ndarray
    n_episodes: int
    per_class_f1: dict[int, float] = field(default_factory=dict)


def precision_sensitivity_f1(confusion: np.ndarray):
    """Per-class precision/sensitivity/F1 from a square confusion matrix.

    ``confusion[i, j]`` counts episodes of true class i predicted as class j
    (0-based here).  Classes absent from both axes are returned as None and
    excluded upstream from macro averages.
    """
    k = confusion.shape[0]
    out = []
    for c in range(k):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        if tp + fp + fn == 0:
            out.append(None)
            continue
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        sensitivity = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision + sensitivity == 0.0:
            f1 = 0.0
        else:
            f1 = 2.0 * precision * sensitivity / (precision + sensitivity)
        out.append((float(precision), float(sensitivity), float(f1)))
    return out


def compute_metrics(results: list[EvalResult], n_classes: int = 4) -> MetricsSummary:
    """Accuracy, macro precision/sensitivity/F1 and mean classification time."""
    if not results:
        raise ValueError("no evaluation results")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for r in results:
        confusion[r.label - 1, r.predicted - 1] += 1
    stats = precision_sensitivity_f1(confusion)
    absent = [c + 1 for c, s in enumerate(stats) if s is None]
    if absent:
        warnings.warn(f"class(es) {absent} absent from labels and predictions; "
                      "excluded from macro averages", RuntimeWarning, stacklevel=2)
    present = [s for s in stats if s is not None]
    return MetricsSummary(
        accuracy=float(np.mean([r.correct for r in results])),
        macro_precision=float(np.mean([s[0] for s in present])),
        macro_sensitivity=float(np.mean([s[1] for s in present])),
        macro_f1=float(np.mean([s[2] for s in present])),
        mean_classification_time=float(np.mean([r.classification_time for r in results])),
        confusion=confusion,
        n_episodes=len(results),
        per_class_f1={c + 1: s[2] for c, s in enumerate(stats) if s is not None},
    )

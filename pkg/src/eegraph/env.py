"""Episode construction and the skip-or-classify environment step.

States are feature vectors of consecutive time points sharing one task
label; an episode is a fixed-horizon run of them.  Action 0 skips to the
next state at a small penalty, actions 1..4 classify and terminate the
episode with a right/wrong reward.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np


class EpisodeWarning(RuntimeWarning):
    """Trials too short to yield a full episode."""


@dataclass(frozen=True)
class RewardConfig:
    r_right: float = 10.0
    r_wrong: float = -10.0
    r_skip: float = -0.1
    horizon: int = 20

    def __post_init__(self):
        if not (self.r_right > 0.0 > self.r_skip):
            raise ValueError("need r_right > 0 > r_skip")
        if self.r_wrong >= 0.0:
            raise ValueError("r_wrong must be negative")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class State:
    features: np.ndarray
    label: int            # task label in 1..4
    index_in_episode: int

    def __post_init__(self):
        if not 1 <= self.label:
            raise ValueError(f"task labels are 1-based, got {self.label}")


@dataclass(frozen=True)
class Episode:
    states: tuple[State, ...]
    horizon: int

    def __post_init__(self):
        if len(self.states) != self.horizon:
            raise ValueError(f"episode has {len(self.states)} states, horizon {self.horizon}")
        labels = {s.label for s in self.states}
        if len(labels) != 1:
            raise ValueError("all states in an episode must share one label")

    @property
    def label(self) -> int:
        return self.states[0].label


@dataclass(frozen=True)
class StepResult:
    next_state: State | None   # None marks Terminal
    reward: float

    @property
    def terminal(self) -> bool:
        return self.next_state is None


def step(s: State, a: int, y: int, cfg: RewardConfig,
         next_state: State | None = None) -> StepResult:
    """One environment transition.

    a == 0: skip; reward r_skip and move to ``next_state`` (Terminal when the
    state is the episode's last).  a in 1..4: classify; Terminal with r_right
    on a == y else r_wrong.  Pure: identical inputs give identical results.
    """
    if a not in (0, 1, 2, 3, 4):
        raise ValueError(f"action must be in 0..4, got {a}")
    if y not in (1, 2, 3, 4):
        raise ValueError(f"label must be in 1..4, got {y}")
    if a == 0:
        return StepResult(next_state=next_state, reward=cfg.r_skip)
    return StepResult(next_state=None, reward=cfg.r_right if a == y else cfg.r_wrong)


def build_episodes(trial_features: list[np.ndarray], trial_labels: list[int],
                   horizon: int) -> list[Episode]:
    """Chop per-trial feature streams into consecutive non-overlapping episodes.

    Each trial of T points yields floor(T / horizon) episodes; leftover tail
    points are discarded.  Trials shorter than the horizon are skipped with an
    :class:`EpisodeWarning`.
    """
    if len(trial_features) != len(trial_labels):
        raise ValueError("trial_features and trial_labels lengths differ")
    episodes: list[Episode] = []
    short = 0
    for feats, label in zip(trial_features, trial_labels):
        feats = np.asarray(feats, dtype=np.float64)
        n_full = len(feats) // horizon
        if n_full == 0:
            short += 1
            continue
        for e in range(n_full):
            block = feats[e * horizon:(e + 1) * horizon]
            states = tuple(State(features=block[t], label=int(label), index_in_episode=t)
                           for t in range(horizon))
            episodes.append(Episode(states=states, horizon=horizon))
    if short:
        warnings.warn(f"skipped {short} trial(s) shorter than horizon {horizon}",
                      EpisodeWarning, stacklevel=2)
    return episodes


def split_episodes(episodes: list[Episode], seed: int
                   ) -> tuple[list[Episode], list[Episode], list[Episode]]:
    """Deterministic 80/10/10 split; floor-sized val/test, remainder to train."""
    n = len(episodes)
    if n < 10:
        raise ValueError(f"need at least 10 episodes to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    train = [episodes[i] for i in order[:n_train]]
    val = [episodes[i] for i in order[n_train:n_train + n_val]]
    test = [episodes[i] for i in order[n_train + n_val:]]
    return train, val, test


# ---------------------------------------------------------------------------
# episode cache file

_CACHE_MAGIC = b"EEGE"
_CACHE_VERSION = 1


def save_episode_cache(path, episodes: list[Episode]) -> None:
    """Binary cache: header (version, H, feature dim, count), packed float64
    feature records, then one label byte per episode."""
    if not episodes:
        raise ValueError("no episodes to save")
    horizon = episodes[0].horizon
    dim = episodes[0].states[0].features.shape[0]
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IIII", _CACHE_VERSION, horizon, dim, len(episodes)))
        for ep in episodes:
            if ep.horizon != horizon:
                raise ValueError("episodes in one cache must share a horizon")
            block = np.stack([s.features for s in ep.states]).astype("<f8")
            fh.write(block.tobytes())
        fh.write(bytes(ep.label for ep in episodes))


def load_episode_cache(path) -> list[Episode]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"not an episode cache (magic {magic!r})")
        version, horizon, dim, count = struct.unpack("<IIII", fh.read(16))
        if version != _CACHE_VERSION:
            raise ValueError(f"unsupported episode cache version {version}")
        raw = fh.read(count * horizon * dim * 8)
        if len(raw) != count * horizon * dim * 8:
            raise ValueError("truncated episode cache")
        blocks = np.frombuffer(raw, dtype="<f8").reshape(count, horizon, dim)
        labels = fh.read(count)
        if len(labels) != count:
            raise ValueError("truncated episode cache label array")
    episodes = []
    for i in range(count):
        states = tuple(State(features=blocks[i, t].copy(), label=labels[i],
                             index_in_episode=t) for t in range(horizon))
        episodes.append(Episode(states=states, horizon=horizon))
    return episodes

"""DQN training with lambda-returns, a target network and episodic replay."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .agents import AgentModel, select_actions
from .envs import MultiAgentEnv
from .mixers import Mixer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qgnn-checkpoint/1"


class NonFiniteLossError(RuntimeError):
    """Raised when the TD loss is NaN or infinite."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    buffer_size: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    gamma: float = 0.99
    lam: float = 0.6
    epsilon_start: float = 1.0
    epsilon_finish: float = 0.05
    epsilon_anneal_steps: int = 100_000
    target_update_interval: int = 200
    grad_clip: float = 10.0


def anneal_epsilon(env_steps: int, start: float = 1.0, finish: float = 0.05,
                   anneal_steps: int = 100_000) -> float:
    if env_steps < 0:
        raise ValueError("env_steps must be non-negative")
    if anneal_steps <= 0 or env_steps >= anneal_steps:
        return finish
    return start + (finish - start) * env_steps / anneal_steps


# ----------------------------------------------------------------------------
# Episode storage
# ----------------------------------------------------------------------------

@dataclass
class EpisodeBatch:
    """A batch of fixed-length episodes.

    obs ``[B, T, n, d]``, actions ``[B, T, n]``, reward ``[B, T]``,
    terminated ``[B, T]``, adjacency ``[B, n, n]`` (diagonal set).
    ``local_rewards`` and ``q_taken`` are diagnostics and never reach the loss.
    """

    obs: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    adjacency: np.ndarray
    local_rewards: Optional[np.ndarray] = None
    q_taken: Optional[np.ndarray] = None

    def __len__(self):
        return self.obs.shape[0]

    @property
    def episode_length(self) -> int:
        return self.obs.shape[1]

    def tensors(self):
        return (torch.from_numpy(self.obs), torch.from_numpy(self.actions),
                torch.from_numpy(self.reward), torch.from_numpy(self.terminated),
                torch.from_numpy(self.adjacency))

    def state(self) -> Tensor:
        """Global state per step: all observations concatenated, ``[B, T, n*d]``."""
        B, T = self.obs.shape[:2]
        return torch.from_numpy(self.obs).reshape(B, T, -1)

    @staticmethod
    def concat(batches: Sequence["EpisodeBatch"]) -> "EpisodeBatch":
        def cat(name):
            vals = [getattr(b, name) for b in batches]
            return None if any(v is None for v in vals) else np.concatenate(vals)
        return EpisodeBatch(*(cat(k) for k in
                              ("obs", "actions", "reward", "terminated", "adjacency",
                               "local_rewards", "q_taken")))


class ReplayBuffer:
    """Ring buffer of whole episodes with FIFO eviction.

    Only the fields used for training are stored.
    """

    FIELDS = ("obs", "actions", "reward", "terminated", "adjacency")

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.storage: Dict[str, np.ndarray] = {}
        self.insert_count = 0

    def __len__(self):
        return min(self.insert_count, self.capacity)

    def insert(self, batch: EpisodeBatch):
        if not self.storage:
            for name in self.FIELDS:
                arr = getattr(batch, name)
                self.storage[name] = np.zeros((self.capacity, *arr.shape[1:]), dtype=arr.dtype)
        for k in range(len(batch)):
            slot = self.insert_count % self.capacity
            for name in self.FIELDS:
                self.storage[name][slot] = getattr(batch, name)[k]
            self.insert_count += 1

    def can_sample(self, batch_size: int) -> bool:
        return len(self) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> EpisodeBatch:
        if not self.can_sample(batch_size):
            raise ValueError(f"buffer holds {len(self)} episodes, need {batch_size}")
        idx = np.sort(rng.choice(len(self), size=batch_size, replace=False))
        return EpisodeBatch(*(self.storage[name][idx] for name in self.FIELDS))

    def oldest_first(self) -> np.ndarray:
        """Storage slots ordered from oldest to newest episode."""
        if self.insert_count <= self.capacity:
            return np.arange(self.insert_count)
        start = self.insert_count % self.capacity
        return (np.arange(self.capacity) + start) % self.capacity

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "insert_count": self.insert_count,
                "storage": {k: v.copy() for k, v in self.storage.items()}}

    def load_state_dict(self, state: dict):
        self.capacity = int(state["capacity"])
        self.insert_count = int(state["insert_count"])
        self.storage = {k: np.array(v) for k, v in state["storage"].items()}


# ----------------------------------------------------------------------------
# Rollouts
# ----------------------------------------------------------------------------

@torch.no_grad()
def rollout_episode(env: MultiAgentEnv, model: AgentModel, epsilon: float,
                    rng: np.random.Generator) -> EpisodeBatch:
    """Play one episode with epsilon-greedy actions and record it (B=1)."""
    spec = env.spec
    obs = env.reset(rng)
    mask = torch.from_numpy(env.graph.adjacency(include_self=True))
    h = model.init_hidden()
    prev = torch.zeros(spec.n_agents, spec.n_actions)
    T = spec.episode_limit
    rec_obs = np.zeros((T, spec.n_agents, spec.obs_dim), dtype=np.float32)
    rec_act = np.zeros((T, spec.n_agents), dtype=np.int64)
    rec_rew = np.zeros(T, dtype=np.float32)
    rec_term = np.zeros(T, dtype=np.float32)
    rec_q = np.zeros((T, spec.n_agents), dtype=np.float32)
    rec_local = np.zeros((T, spec.n_agents), dtype=np.float32) if env.has_local_rewards else None
    for t in range(T):
        rec_obs[t] = obs
        q, h = model(torch.from_numpy(obs), prev, h, mask)
        actions = select_actions(q, epsilon, rng, env.avail_actions())
        result = env.step(actions)
        rec_act[t] = actions
        rec_rew[t] = result.global_reward
        rec_q[t] = q[np.arange(spec.n_agents), actions].numpy()
        if rec_local is not None:
            rec_local[t] = result.local_rewards
        rec_term[t] = float(result.done)
        prev = F.one_hot(torch.from_numpy(actions), spec.n_actions).float()
        obs = result.observations
        if result.done:
            break
    adj = env.graph.adjacency(include_self=True)
    return EpisodeBatch(rec_obs[None], rec_act[None], rec_rew[None], rec_term[None], adj[None],
                        None if rec_local is None else rec_local[None], rec_q[None])


# ----------------------------------------------------------------------------
# Targets and loss
# ----------------------------------------------------------------------------

def lambda_returns(rewards: Tensor, terminated: Tensor, next_values: Tensor,
                   gamma: float, lam: float) -> Tensor:
    """Backward lambda-return recursion over ``[B, T]`` tensors.

    ``next_values[:, t]`` is the bootstrap value of the state reached after
    step ``t``. G_t = r_t + gamma * (1 - term_t) * ((1-lam) * V_{t+1} + lam * G_{t+1}).
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    T = rewards.shape[1]
    terminated = terminated.to(rewards.dtype)
    next_values = next_values.to(rewards.dtype)
    out = torch.zeros_like(rewards)
    g_next = torch.zeros_like(rewards[:, 0])
    for t in reversed(range(T)):
        cont = 1.0 - terminated[:, t]
        g_next = rewards[:, t] + gamma * cont * ((1 - lam) * next_values[:, t] + lam * g_next)
        out[:, t] = g_next
    return out


@torch.no_grad()
def greedy_target_values(batch: EpisodeBatch, target_model: AgentModel, target_mixer: Mixer) -> Tensor:
    """Mixed target-network Q of the target network's own greedy actions, ``[B, T]``."""
    obs, actions, _, _, adj = batch.tensors()
    q = target_model.unroll(obs, actions, adj)
    return target_mixer(q.max(dim=-1).values, batch.state())


@torch.no_grad()
def lambda_targets(batch: EpisodeBatch, target_model: AgentModel, target_mixer: Mixer,
                   gamma: float, lam: float) -> Tensor:
    _, _, reward, terminated, _ = batch.tensors()
    B, T = reward.shape
    next_values = torch.zeros_like(reward)
    if T > 1 and gamma > 0:
        values = greedy_target_values(batch, target_model, target_mixer)
        next_values[:, :-1] = values[:, 1:]
    return lambda_returns(reward, terminated, next_values, gamma, lam)


def mixed_q(batch: EpisodeBatch, model: AgentModel, mixer: Mixer) -> Tensor:
    """Online Q of the actions actually taken, ``[B, T]``."""
    obs, actions, _, _, adj = batch.tensors()
    q = model.unroll(obs.to(_dtype(model)), actions, adj)
    chosen = q.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    return mixer(chosen, batch.state().to(_dtype(model)))


def _dtype(module: torch.nn.Module):
    return next(module.parameters()).dtype


def td_loss(batch: EpisodeBatch, targets: Tensor, model: AgentModel, mixer: Mixer) -> Tensor:
    q = mixed_q(batch, model, mixer)
    loss = ((targets.detach().to(q.dtype) - q) ** 2).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite TD loss: {loss.item()}")
    return loss


# ----------------------------------------------------------------------------
# Learner state
# ----------------------------------------------------------------------------

@dataclass
class Counters:
    env_steps: int = 0
    episodes: int = 0
    train_iterations: int = 0
    target_syncs: int = 0


class TrainState:
    """Online and target networks, optimiser and counters for one run."""

    def __init__(self, model: AgentModel, mixer: Mixer, config: Optional[TrainerConfig] = None):
        self.config = config or TrainerConfig()
        self.model = model
        self.mixer = mixer
        self.target_model = copy.deepcopy(model)
        self.target_mixer = copy.deepcopy(mixer)
        for p in self.target_parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=self.config.lr)
        self.counters = Counters()

    def parameters(self) -> List[torch.nn.Parameter]:
        return list(self.model.parameters()) + list(self.mixer.parameters())

    def target_parameters(self) -> List[torch.Tensor]:
        return list(self.target_model.parameters()) + list(self.target_mixer.parameters())

    @property
    def epsilon(self) -> float:
        c = self.config
        return anneal_epsilon(self.counters.env_steps, c.epsilon_start, c.epsilon_finish,
                              c.epsilon_anneal_steps)

    def sync_target(self):
        self.target_model.load_state_dict(self.model.state_dict())
        self.target_mixer.load_state_dict(self.mixer.state_dict())
        self.counters.target_syncs += 1

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator) -> Optional[dict]:
        c = self.config
        if not buffer.can_sample(c.batch_size):
            log.debug("buffer holds %d < %d episodes; skipping update", len(buffer), c.batch_size)
            return None
        batch = buffer.sample(c.batch_size, rng)
        return self.update(batch)

    def update(self, batch: EpisodeBatch) -> dict:
        """One gradient step on ``batch``; syncs the target on schedule."""
        c = self.config
        targets = lambda_targets(batch, self.target_model, self.target_mixer, c.gamma, c.lam)
        loss = td_loss(batch, targets, self.model, self.mixer)
        self.optimizer.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.parameters(), c.grad_clip)
        self.optimizer.step()
        self.counters.train_iterations += 1
        if self.counters.train_iterations % c.target_update_interval == 0:
            self.sync_target()
        return {"loss": loss.item(), "grad_norm": float(grad_norm)}

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "mixer": self.mixer.state_dict(),
            "target_model": self.target_model.state_dict(),
            "target_mixer": self.target_mixer.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "counters": asdict(self.counters),
            "trainer_config": asdict(self.config),
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["model"])
        self.mixer.load_state_dict(state["mixer"])
        self.target_model.load_state_dict(state["target_model"])
        self.target_mixer.load_state_dict(state["target_mixer"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.counters = Counters(**state["counters"])


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

# The container is a single JSON header line followed by the raw bytes of every
# array, in header order. Dicts are stored as key/value pair lists so that
# non-string keys (optimiser state is keyed by parameter index) and insertion
# order survive, which makes save -> load -> save byte-identical.

_MAGIC = b"QGNNCKPT\n"


def _encode(obj, blobs: list):
    if isinstance(obj, torch.Tensor):
        arr = obj.detach().cpu().contiguous()
        blobs.append(arr.numpy().tobytes())
        return {"__tensor__": len(blobs) - 1, "dtype": str(arr.dtype).replace("torch.", ""),
                "shape": list(arr.shape)}
    if isinstance(obj, np.ndarray):
        arr = np.ascontiguousarray(obj)
        blobs.append(arr.tobytes())
        return {"__ndarray__": len(blobs) - 1, "dtype": arr.dtype.str, "shape": list(arr.shape)}
    if isinstance(obj, dict):
        return {"__dict__": [[_encode(k, blobs), _encode(v, blobs)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, blobs) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, blobs) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot store {type(obj).__name__} in a checkpoint")


def _decode(obj, blobs: list):
    if isinstance(obj, list):
        return [_decode(v, blobs) for v in obj]
    if not isinstance(obj, dict):
        return obj
    if "__tensor__" in obj:
        dtype = getattr(torch, obj["dtype"])
        raw = bytearray(blobs[obj["__tensor__"]])
        flat = torch.frombuffer(raw, dtype=dtype) if raw else torch.empty(0, dtype=dtype)
        return flat.reshape(obj["shape"]).clone()
    if "__ndarray__" in obj:
        return np.frombuffer(blobs[obj["__ndarray__"]], dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()
    if "__dict__" in obj:
        return {_decode(k, blobs): _decode(v, blobs) for k, v in obj["__dict__"]}
    if "__tuple__" in obj:
        return tuple(_decode(v, blobs) for v in obj["__tuple__"])
    raise ValueError(f"unrecognised entry {sorted(obj)}")


def _manifest(state: dict) -> dict:
    shapes = {}
    for group in ("model", "mixer", "target_model", "target_mixer"):
        for name, t in state[group].items():
            shapes[f"{group}.{name}"] = list(t.shape)
    return shapes


def save_checkpoint(path, train_state: TrainState, config_hash: str, extra: Optional[dict] = None) -> Path:
    """Write a self-describing checkpoint.

    The container holds the format tag, the config hash, counters, named
    parameter tensors (online and target) with their shapes, the optimiser
    state, and any ``extra`` entries (RNG states, replay buffer, loop
    bookkeeping). Identical state always produces identical bytes.
    """
    state = train_state.state_dict()
    blobs: list = []
    body = _encode({"train_state": state, "extra": extra or {}}, blobs)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "counters": state["counters"],
        "manifest": _manifest(state),
        "blob_sizes": [len(b) for b in blobs],
        "body": body,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path, expected_config_hash: Optional[str] = None) -> dict:
    """Read a checkpoint; returns ``{format, config_hash, manifest, train_state, extra}``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    try:
        end = raw.index(b"\n", len(_MAGIC))
        header = json.loads(raw[len(_MAGIC):end])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')!r}, "
                              f"expected {CHECKPOINT_FORMAT!r}")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} does not match expected {expected_config_hash}")
    sizes = header["blob_sizes"]
    if end + 1 + sum(sizes) != len(raw):
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint payload")
    blobs, offset = [], end + 1
    for size in sizes:
        blobs.append(raw[offset:offset + size])
        offset += size
    try:
        body = _decode(header["body"], blobs)
    except (ValueError, TypeError, AttributeError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint payload: {exc}") from exc
    manifest = header["manifest"]
    for group in ("model", "mixer", "target_model", "target_mixer"):
        for name, t in body["train_state"][group].items():
            if list(t.shape) != manifest.get(f"{group}.{name}"):
                raise CheckpointError(f"{path}: tensor {group}.{name} does not match its manifest shape")
    return {"format": header["format"], "config_hash": header["config_hash"], "manifest": manifest,
            "train_state": body["train_state"], "extra": body["extra"]}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Toy environment, scripted expert, expert gate, datasets and training drivers.

The interactive loop follows the usual expert-gated DAgger shape: an offline
stage trains on expert demonstrations (optionally shrinking the trainable
rank every epoch), then each online iteration rolls the learner out once,
lets the expert take over wherever the learner disagrees with it, appends
the expert-labelled steps to the dataset and trains one more epoch.

Everything random draws from a dedicated stream of a ``SeedSequence`` so
that, for instance, evaluating a checkpoint never perturbs training.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from .diffusion import (
    DiffusionPolicy,
    NetConfig,
    NoiseSchedule,
    PolicyNet,
    set_policy_rank,
    to_factored,
    to_lora,
)
from .lowrank import FactoredConv, qr_refresh
from .numerics import Adam, ContractError, backward
from .schedule import DECAY_VARIANTS, RankSchedule, scheduled_rank


class ConfigError(ValueError):
    """Inconsistent or incomplete run configuration."""


# ---------------------------------------------------------------------------
# environment and expert
# ---------------------------------------------------------------------------


class PointReach2D:
    """Point mass that must visit two waypoints in order.

    Observation: ``(x, y, wx, wy, phase0, phase1)`` where ``(wx, wy)`` is the
    waypoint currently to be reached. Action: a velocity, clipped to norm
    ``v_max``. ``pos <- clip(pos + dt * action, -1, 1)``. A waypoint counts as
    visited when the agent is within ``eps`` of it; the episode succeeds when
    the second one is visited and fails at ``max_steps``.
    """

    obs_dim = 6
    action_dim = 2

    def __init__(self, dt: float = 0.25, v_max: float = 1.0, eps: float = 0.05, max_steps: int = 60,
                 waypoint_bound: float = 0.8, start_bound: float = 0.9, min_separation: float = 0.3):
        self.dt = dt
        self.v_max = v_max
        self.eps = eps
        self.max_steps = max_steps
        self.waypoint_bound = waypoint_bound
        self.start_bound = start_bound
        self.min_separation = min_separation
        self.pos = np.zeros(2)
        self.waypoints = np.zeros((2, 2))
        self.phase = 0
        self.t = 0
        self.phase_changed = False

    @property
    def action_low(self) -> np.ndarray:
        return np.full(self.action_dim, -self.v_max)

    @property
    def action_high(self) -> np.ndarray:
        return np.full(self.action_dim, self.v_max)

    def params(self) -> dict:
        return dict(dt=self.dt, v_max=self.v_max, eps=self.eps, max_steps=self.max_steps,
                    waypoint_bound=self.waypoint_bound, start_bound=self.start_bound,
                    min_separation=self.min_separation)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.pos = rng.uniform(-self.start_bound, self.start_bound, 2)
        while True:
            wps = rng.uniform(-self.waypoint_bound, self.waypoint_bound, (2, 2))
            d0 = np.linalg.norm(wps[0] - self.pos)
            d1 = np.linalg.norm(wps[1] - wps[0])
            if min(d0, d1) >= self.min_separation:
                break
        self.waypoints = wps
        self.phase = 0
        self.t = 0
        self.phase_changed = False
        return self.observe()

    def observe(self) -> np.ndarray:
        onehot = np.array([1.0, 0.0]) if self.phase == 0 else np.array([0.0, 1.0])
        return np.concatenate([self.pos, self.waypoints[self.phase], onehot])

    def step(self, action) -> tuple[np.ndarray, bool, bool]:
        a = clip_norm(np.asarray(action, dtype=np.float64), self.v_max)
        self.pos = np.clip(self.pos + self.dt * a, -1.0, 1.0)
        self.t += 1
        success = False
        self.phase_changed = False
        if np.linalg.norm(self.pos - self.waypoints[self.phase]) <= self.eps:
            if self.phase == 0:
                self.phase = 1
                self.phase_changed = True
            else:
                success = True
        done = success or self.t >= self.max_steps
        return self.observe(), done, success


def clip_norm(a: np.ndarray, limit: float) -> np.ndarray:
    """Scale vectors (last axis) down to at most ``limit`` in Euclidean norm."""
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.where(n > limit, limit / np.maximum(n, 1e-300), 1.0)
    return a * scale


def scripted_expert(obs, gain: float = 1.0, v_max: float = 1.0) -> np.ndarray:
    """Proportional controller toward the active waypoint; works on (..., 6) arrays."""
    obs = np.asarray(obs, dtype=np.float64)
    return clip_norm(gain * (obs[..., 2:4] - obs[..., 0:2]), v_max)


def cosine_similarity(a, b, tiny: float = 1e-12) -> float:
    """Cosine of the angle between two action vectors.

    Two (numerically) zero vectors agree perfectly (1.0); a zero vector
    against a non-zero one gives 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if np.array_equal(a, b) and na >= tiny:
        return 1.0  # exact, where the division could round to 1 - ulp
    if na < tiny and nb < tiny:
        return 1.0
    if na < tiny or nb < tiny:
        return 0.0
    # rounding can push |cos| past 1 for (anti)parallel vectors
    return float(min(max(np.dot(a, b) / (na * nb), -1.0), 1.0))


@dataclass(frozen=True)
class ExpertGate:
    threshold: float

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError(f"gate threshold must lie in [-1, 1], got {self.threshold}")

    def intervene(self, learner_action, expert_action) -> bool:
        return cosine_similarity(learner_action, expert_action) < self.threshold


# ---------------------------------------------------------------------------
# trajectories and datasets
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, A) executed actions
    expert_label_mask: np.ndarray  # (T,) bool
    success: bool = False

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.expert_label_mask = np.asarray(self.expert_label_mask, dtype=bool)
        n = len(self.observations)
        if len(self.actions) != n or len(self.expert_label_mask) != n:
            raise ValueError("observations, actions and expert_label_mask must have equal lengths")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def n_labels(self) -> int:
        return int(self.expert_label_mask.sum())


def _windows(traj: Trajectory, obs_horizon: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Training samples at every labelled step of one trajectory.

    The observation history reaches back ``obs_horizon - 1`` steps, padded
    with the first observation. The action window runs forward ``horizon``
    steps but never leaves the contiguous run of expert labels it starts in;
    it is padded with the run's last action.
    """
    mask = traj.expert_label_mask
    T = len(traj)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return (np.zeros((0, obs_horizon, traj.observations.shape[1])), np.zeros((0, horizon, traj.actions.shape[1])))
    # end (exclusive) of the labelled run containing each step
    run_end = np.empty(T, dtype=np.int64)
    end = T
    for t in range(T - 1, -1, -1):
        if not mask[t]:
            end = t
        run_end[t] = end
    o_idx = np.clip(idx[:, None] + np.arange(-obs_horizon + 1, 1)[None, :], 0, None)
    a_idx = idx[:, None] + np.arange(horizon)[None, :]
    a_idx = np.minimum(a_idx, run_end[idx][:, None] - 1)
    return traj.observations[o_idx], traj.actions[a_idx]


class Dataset:
    """Append-only store of trajectories with cached training windows."""

    def __init__(self, trajectories: Sequence[Trajectory] = (), obs_horizon: int = 2, horizon: int = 8):
        self.obs_horizon = obs_horizon
        self.horizon = horizon
        self.trajectories: list[Trajectory] = []
        self._obs: list[np.ndarray] = []
        self._act: list[np.ndarray] = []
        self._cache = None
        for t in trajectories:
            self.append(t)

    def append(self, traj: Trajectory) -> None:
        self.trajectories.append(traj)
        o, a = _windows(traj, self.obs_horizon, self.horizon)
        self._obs.append(o)
        self._act.append(a)
        self._cache = None

    def extend(self, other: "Dataset") -> None:
        for t in other.trajectories:
            self.append(t)

    def copy(self) -> "Dataset":
        return Dataset(self.trajectories, self.obs_horizon, self.horizon)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_labels(self) -> int:
        return sum(t.n_labels for t in self.trajectories)

    def training_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, O, obs_dim) observation histories and (N, H, A) action windows."""
        if self._cache is None:
            if not self._obs:
                raise ContractError("dataset is empty")
            self._cache = (np.concatenate(self._obs), np.concatenate(self._act))
        return self._cache


def compute_gate_threshold(dataset: Dataset) -> float:
    """Mean cosine similarity between consecutive expert actions."""
    total = 0.0
    count = 0
    for traj in dataset.trajectories:
        m = traj.expert_label_mask
        for t in range(len(traj) - 1):
            if m[t] and m[t + 1]:
                total += cosine_similarity(traj.actions[t], traj.actions[t + 1])
                count += 1
    if count == 0:
        raise ContractError("need at least one pair of consecutive expert actions")
    return total / count


# ---------------------------------------------------------------------------
# actors and rollouts
# ---------------------------------------------------------------------------


class ExpertActor:
    """The scripted expert behind the policy interface (one-step chunks)."""

    exec_horizon = 1

    def __init__(self, gain: float = 1.0, v_max: float = 1.0):
        self.gain = gain
        self.v_max = v_max

    def act(self, obs_hist, rng) -> np.ndarray:
        return scripted_expert(np.asarray(obs_hist)[:, -1], self.gain, self.v_max)[:, None, :]


class RandomActor:
    """Uniform random velocities inside the action disc."""

    exec_horizon = 1

    def __init__(self, v_max: float = 1.0):
        self.v_max = v_max

    def act(self, obs_hist, rng) -> np.ndarray:
        B = np.asarray(obs_hist).shape[0]
        ang = rng.uniform(0.0, 2 * np.pi, B)
        rad = self.v_max * np.sqrt(rng.uniform(0.0, 1.0, B))
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)[:, None, :]


class PolicyActor:
    """Executes the first ``exec_horizon`` actions of each sampled chunk."""

    def __init__(self, policy: DiffusionPolicy):
        self.policy = policy
        self.exec_horizon = policy.exec_horizon

    def act(self, obs_hist, rng) -> np.ndarray:
        return self.policy.predict(obs_hist, rng)[:, : self.exec_horizon]


def as_actor(policy):
    if isinstance(policy, DiffusionPolicy):
        return PolicyActor(policy)
    if hasattr(policy, "act"):
        return policy
    raise TypeError(f"cannot act with {type(policy).__name__}")


class _History:
    def __init__(self, obs0: np.ndarray, length: int):
        self.buf = [obs0] * length

    def push(self, obs):
        self.buf = self.buf[1:] + [obs]

    def array(self):
        return np.stack(self.buf)


def run_episodes(actor, env_factory: Callable[[], PointReach2D], seeds: Sequence[int], rng, obs_horizon: int = 2):
    """Roll out ``actor`` on one environment per seed in lockstep.

    Environments that need a new action chunk are batched into one call.
    A chunk is dropped early when the task phase changes. Returns a list of
    (success, steps) per seed.
    """
    envs = [env_factory() for _ in seeds]
    hist = [_History(env.reset(int(s)), obs_horizon) for env, s in zip(envs, seeds)]
    queues: list[list[np.ndarray]] = [[] for _ in envs]
    active = list(range(len(envs)))
    result: list[tuple[bool, int]] = [(False, 0)] * len(envs)
    while active:
        need = [i for i in active if not queues[i]]
        if need:
            chunks = actor.act(np.stack([hist[i].array() for i in need]), rng)
            for i, chunk in zip(need, chunks):
                queues[i] = list(chunk)
        still = []
        for i in active:
            obs, done, success = envs[i].step(queues[i].pop(0))
            hist[i].push(obs)
            if envs[i].phase_changed:
                queues[i] = []
            if done:
                result[i] = (bool(success), envs[i].t)
            else:
                still.append(i)
        active = still
    return result


@dataclass
class Metrics:
    sr: float
    msd_mean: float
    msd_std: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(policy, env_factory, n_rollouts: int, seeds: Sequence[int]) -> Metrics:
    """Success rate and duration (steps, successful episodes only) over seeded rollouts.

    ``seeds`` gives the environment seed of each rollout; the sampling noise
    of the policy is drawn from a stream derived from the same list, so the
    result is a pure function of (policy, seeds).
    """
    seeds = [int(s) for s in seeds][:n_rollouts]
    if len(seeds) < n_rollouts:
        raise ValueError(f"need {n_rollouts} seeds, got {len(seeds)}")
    if n_rollouts == 0:
        return Metrics(float("nan"), float("nan"), float("nan"), 0)
    rng = np.random.default_rng(np.random.SeedSequence([s & 0xFFFFFFFF for s in seeds]))
    actor = as_actor(policy)
    obs_h = policy.cfg.obs_horizon if isinstance(policy, DiffusionPolicy) else 2
    res = run_episodes(actor, env_factory, seeds, rng, obs_h)
    succ = [steps for ok, steps in res if ok]
    sr = len(succ) / len(res)
    if succ:
        return Metrics(sr, float(np.mean(succ)), float(np.std(succ)), len(res))
    return Metrics(sr, float("nan"), float("nan"), len(res))


def expert_rollout(env: PointReach2D, seed: int, gain: float = 1.0) -> Trajectory:
    obs = env.reset(seed)
    O, A = [], []
    done = success = False
    while not done:
        a = scripted_expert(obs, gain, env.v_max)
        O.append(obs)
        A.append(a)
        obs, done, success = env.step(a)
    return Trajectory(np.array(O), np.array(A), np.ones(len(O), dtype=bool), success)


def collect_offline(env: PointReach2D, n_rollouts: int, seed: int, obs_horizon: int = 2, horizon: int = 8,
                    gain: float = 1.0) -> Dataset:
    """``n_rollouts`` fully expert-labelled episodes; episode k uses a seed derived from (seed, k)."""
    ds = Dataset(obs_horizon=obs_horizon, horizon=horizon)
    for k in range(n_rollouts):
        ds.append(expert_rollout(env, _episode_seed(seed, "offline", k), gain))
    return ds


_STREAM_IDS = {"offline": 1, "online": 2, "bc": 3, "eval": 4}


def _episode_seed(seed: int, stream: str, k: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _STREAM_IDS[stream], int(k)])
    return int(ss.generate_state(1, np.uint32)[0])


def rollout_with_gate(env: PointReach2D, learner, expert: Callable, gate: ExpertGate, seed: int, rng,
                      obs_horizon: int = 2, horizon: int = 8) -> tuple[Trajectory, Dataset]:
    """One gated episode.

    At every step the learner proposes the next action of its current
    chunk. If the gate fires, the expert's action is executed instead, the
    (observation, expert action) pair is labelled, and the rest of the
    learner's chunk is discarded. Returns the full trajectory and ``D_j``,
    the dataset of its labelled part.
    """
    actor = as_actor(learner)
    obs = env.reset(seed)
    hist = _History(obs, obs_horizon)
    queue: list[np.ndarray] = []
    O, A, M = [], [], []
    done = success = False
    while not done:
        if not queue:
            queue = list(actor.act(hist.array()[None], rng)[0])
        a_learn = queue.pop(0)
        a_exp = expert(obs)
        if gate.intervene(a_learn, a_exp):
            a, labelled = a_exp, True
            queue = []
        else:
            a, labelled = a_learn, False
        O.append(obs)
        A.append(np.asarray(a, dtype=np.float64))
        M.append(labelled)
        obs, done, success = env.step(a)
        hist.push(obs)
        if env.phase_changed:
            queue = []
    traj = Trajectory(np.array(O), np.array(A), np.array(M), success)
    dj = Dataset(obs_horizon=obs_horizon, horizon=horizon)
    if traj.n_labels:
        dj.append(traj)
    return traj, dj


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    loss: float
    batch_times: list
    n_samples: int

    @property
    def n_batches(self) -> int:
        return len(self.batch_times)

    @property
    def total_time(self) -> float:
        return float(sum(self.batch_times))


def trainable_parameters(policy: DiffusionPolicy) -> dict:
    return {k: p for k, p in policy.parameters().items() if p.requires_grad}


class Trainer:
    """Mini-batch DDPM training with Adam; optimizer state persists across epochs."""

    def __init__(self, policy: DiffusionPolicy, lr: float = 1e-4, batch_size: int = 64, rng=None,
                 qr_refresh: bool = False):
        self.policy = policy
        self.opt = Adam(lr)
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.qr_refresh = qr_refresh

    def train_epoch(self, dataset: Dataset) -> EpochStats:
        obs, act = dataset.training_arrays()
        n = len(obs)
        perm = self.rng.permutation(n)
        params = trainable_parameters(self.policy)
        factored = [s.layer for s in self.policy.net.slots if isinstance(s.layer, FactoredConv)]
        losses, times = [], []
        for start in range(0, n, self.batch_size):
            idx = perm[start : start + self.batch_size]
            t0 = time.perf_counter()
            for p in params.values():
                p.grad = None
            loss = self.policy.loss(act[idx], obs[idx], self.rng)
            backward(loss)
            self.opt.step(params)
            if self.qr_refresh:
                for layer in factored:
                    qr_refresh(layer.factors)
            times.append(time.perf_counter() - t0)
            losses.append(float(loss.data) * len(idx))
        return EpochStats(sum(losses) / n, times, n)


def bc_train(policy: DiffusionPolicy, dataset: Dataset, epochs: int, lr: float = 1e-4, batch_size: int = 64,
             rng=None, trainer: Optional[Trainer] = None) -> list[EpochStats]:
    """Plain supervised DDPM epochs over ``dataset``."""
    trainer = trainer or Trainer(policy, lr, batch_size, rng)
    return [trainer.train_epoch(dataset) for _ in range(epochs)]


# ---------------------------------------------------------------------------
# session configuration
# ---------------------------------------------------------------------------

STRATEGIES = ("drift_rm", "drift_lora_static", "drift_lora_sched", "hg_full", "fpmo", "mplo", "bc")


@dataclass
class SessionConfig:
    strategy: str = "drift_rm"
    offline_epochs: int = 30
    online_iters: int = 20
    offline_rollouts: int = 50
    decay: str = "sig0.5"  # a DECAY_VARIANTS name or "constant"
    r_max: Optional[int] = None  # None: the net's largest layer rank
    r_min: int = 16
    t_mid: Optional[int] = None
    schedule_span: str = "combined"  # offline | combined
    lr: float = 1e-4
    batch_size: int = 64
    gate_threshold: object = "auto"
    eval_rollouts: int = 50
    eval_every: int = 5
    eval_checkpoints: str = "all"  # all | final | none
    qr_refresh: bool = False
    lora_alpha: float = 1.0
    diffusion_steps: int = 100
    exec_horizon: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.decay != "constant" and self.decay not in DECAY_VARIANTS:
            raise ConfigError(f"unknown decay {self.decay!r}")
        if self.schedule_span not in ("offline", "combined"):
            raise ConfigError("schedule_span must be 'offline' or 'combined'")
        if self.eval_checkpoints not in ("all", "final", "none"):
            raise ConfigError("eval_checkpoints must be all, final or none")
        if self.offline_epochs < 0 or self.online_iters < 0:
            raise ConfigError("epoch and iteration counts must be >= 0")
        if self.r_min < 1:
            raise ConfigError("r_min must be >= 1")
        if self.strategy == "drift_lora_sched" and self.decay == "constant":
            raise ConfigError("drift_lora_sched needs a decaying schedule")


# how each strategy represents its conv blocks and chooses ranks, per phase
#   offline: (block mode, rank rule)   online: (block mode, rank rule)
#   rank rules: "full", "schedule", "r_min"
MODE_TABLE = {
    "drift_rm": (("factored", "schedule"), ("factored", "schedule")),
    "drift_lora_static": (("plain", "full"), ("lora", "r_min")),
    "drift_lora_sched": (("lora", "schedule"), ("lora", "schedule")),
    "hg_full": (("plain", "full"), ("plain", "full")),
    "fpmo": (("plain", "full"), ("factored", "r_min")),
    "mplo": (("factored", "schedule"), ("lora", "r_min")),
    "bc": (("plain", "full"), ("plain", "full")),
}


def net_config_for(env: PointReach2D, obs_horizon: int = 2, horizon: int = 8, **kw) -> NetConfig:
    return NetConfig(action_dim=env.action_dim, obs_dim=env.obs_dim, obs_horizon=obs_horizon, horizon=horizon, **kw)


def build_policy(cfg: SessionConfig, net_cfg: NetConfig, env: PointReach2D, init_seed: int) -> DiffusionPolicy:
    net = PolicyNet(net_cfg, seed=init_seed)
    ns = NoiseSchedule.linear(cfg.diffusion_steps)
    return DiffusionPolicy(net, ns, env.action_low, env.action_high, exec_horizon=cfg.exec_horizon)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    phase: str
    epoch: int  # 1-based offline epoch, or 1-based online iteration
    rank: int  # global scheduled rank in effect while training
    mode: str  # block mode while training
    n_batches: int
    n_samples: int  # labelled training windows in the pass
    batch_time_s: float  # mean wall time per batch
    total_time_s: float
    loss: float
    nel: int


@dataclass
class CheckpointRecord:
    iteration: int
    nel: int
    sr: float
    msd_mean: float
    msd_std: float


@dataclass
class MetricsReport:
    nel: int
    mbt_offline: Optional[float]
    mbt_online: Optional[float]
    mbt_all: Optional[float]
    ct: float
    final_loss: Optional[float]
    final_sr: Optional[float]
    labels_to_sr: Optional[int]

    def to_dict(self) -> dict:
        return asdict(self)


def _mbt(records: Sequence[EpochRecord]) -> Optional[float]:
    nb = sum(r.n_batches for r in records)
    if nb == 0:
        return None
    return sum(r.total_time_s for r in records) / nb


def mbt_all(mbt_offline: Optional[float], mbt_online: Optional[float], labels_offline: int,
            labels_online: int) -> Optional[float]:
    """Label-count-weighted mean of the phase mean batch times; absent phases drop out."""
    parts = [(m, w) for m, w in ((mbt_offline, labels_offline), (mbt_online, labels_online)) if m is not None]
    total = sum(w for _, w in parts)
    if not parts or total == 0:
        return None
    return sum(m * w for m, w in parts) / total


def metrics_aggregate(session: "DaggerSession", sr_target: float = 0.9) -> MetricsReport:
    """NEL, per-phase and overall mean batch time, cumulative training time, final loss/SR.

    A phase's mean batch time is its training time over its batch count.
    The all-stage value weights the two phase values by the number of
    labelled samples trained on in each phase (summed over its passes).
    """
    off = [r for r in session.epochs if r.phase == "offline"]
    on = [r for r in session.epochs if r.phase == "online"]
    ct = float(sum(r.total_time_s for r in session.epochs))
    m_off, m_on = _mbt(off), _mbt(on)
    m_all = mbt_all(m_off, m_on, sum(r.n_samples for r in off), sum(r.n_samples for r in on))
    final_loss = session.epochs[-1].loss if session.epochs else None
    final_sr = session.checkpoints[-1].sr if session.checkpoints else None
    labels = next((c.nel for c in session.checkpoints if c.sr >= sr_target), None)
    return MetricsReport(session.nel, m_off, m_on, m_all, ct, final_loss, final_sr, labels)


# ---------------------------------------------------------------------------
# the session: one resumable run of any strategy
# ---------------------------------------------------------------------------


class DaggerSession:
    """Datasets, policy, optimizer, RNG streams and logs of one run.

    ``advance()`` performs one unit of work (an offline epoch, an online
    iteration, or a checkpoint evaluation) so that a run can be stopped and
    saved between any two units and resumed bitwise.
    """

    def __init__(self, cfg: SessionConfig, env_params: Optional[dict] = None, net_kw: Optional[dict] = None,
                 run_id: str = "run", eval_seed_base: int = 1_000_000, dedicated_hg: bool = False):
        self.cfg = cfg
        self.env_params = dict(env_params or {})
        self.net_kw = dict(net_kw or {})
        self.run_id = run_id
        self.eval_seed_base = eval_seed_base
        self.dedicated_hg = dedicated_hg
        self.env = PointReach2D(**self.env_params)
        ss = np.random.SeedSequence(int(cfg.seed) & 0xFFFFFFFF)
        init_ss, train_ss, roll_ss, adapter_ss = ss.spawn(4)
        self.init_seed = int(init_ss.generate_state(1, np.uint32)[0])
        self.train_rng = np.random.default_rng(train_ss)
        self.rollout_rng = np.random.default_rng(roll_ss)
        self.adapter_rng = np.random.default_rng(adapter_ss)

        net_cfg = net_config_for(self.env, **self.net_kw)
        self.policy = build_policy(cfg, net_cfg, self.env, self.init_seed)
        self.trainer = Trainer(self.policy, cfg.lr, cfg.batch_size, self.train_rng, cfg.qr_refresh)
        self.r_max = cfg.r_max if cfg.r_max is not None else self.policy.net.max_rank
        if not 1 <= cfg.r_min <= self.r_max:
            raise ConfigError(f"need 1 <= r_min <= r_max, got r_min={cfg.r_min}, r_max={self.r_max}")
        self.schedule = self._make_schedule()

        self.d_base = collect_offline(self.env, cfg.offline_rollouts, cfg.seed, net_cfg.obs_horizon, net_cfg.horizon)
        self.dataset = Dataset(obs_horizon=net_cfg.obs_horizon, horizon=net_cfg.horizon)
        if isinstance(cfg.gate_threshold, str):
            if cfg.gate_threshold != "auto":
                raise ConfigError(f"gate_threshold must be a number or 'auto', got {cfg.gate_threshold!r}")
            self.threshold = compute_gate_threshold(self.d_base) if len(self.d_base) else 1.0
        else:
            self.threshold = float(cfg.gate_threshold)
        self.gate = ExpertGate(self.threshold)

        self.stage = "offline"  # offline -> online -> done
        self.epoch = 0  # completed offline epochs
        self.iteration = 0  # completed online iterations
        self.rank = self.r_max
        self.pending_eval: Optional[int] = None
        self.epochs: list[EpochRecord] = []
        self.checkpoints: list[CheckpointRecord] = []
        self.mode_log: list[tuple[str, int, str, int]] = []  # (phase, index, mode, rank)
        self._enter_offline()

    # -- schedule and mode handling -----------------------------------------

    def _make_schedule(self) -> RankSchedule:
        c = self.cfg
        T = c.offline_epochs + (c.online_iters if c.schedule_span == "combined" else 0)
        T = max(T, 1)
        if c.decay == "constant":
            return RankSchedule("constant", self.r_max, c.r_min, T)
        return RankSchedule(r_max=self.r_max, r_min=c.r_min, total_epochs=T, t_mid=c.t_mid, **DECAY_VARIANTS[c.decay])

    @property
    def uses_rank_modulation(self) -> bool:
        """Whether factored blocks are needed at all.

        A constant schedule at full rank never trains below full rank, so the
        run is ordinary full-rank training and keeps plain blocks.
        """
        c = self.cfg
        if c.strategy == "drift_rm":
            return not (c.decay == "constant" and self.r_max >= self.policy.net.max_rank)
        return c.strategy in ("fpmo", "mplo")

    def _rule(self, phase: str) -> tuple[str, str]:
        off, on = MODE_TABLE[self.cfg.strategy]
        mode, rule = off if phase == "offline" else on
        if self.cfg.strategy == "drift_rm" and not self.uses_rank_modulation:
            mode = "plain"
        if rule == "schedule" and phase == "online" and self.cfg.schedule_span == "offline":
            rule = "r_min"
        return mode, rule

    def _apply(self, mode: str, rank: int) -> None:
        net = self.policy.net
        if mode == "plain":
            if net.mode != "plain":
                raise ContractError("cannot return to plain blocks")
        elif mode == "factored":
            if net.mode == "plain":
                to_factored(net, rank)
            elif net.mode == "factored":
                set_policy_rank(net, rank)
            else:
                raise ContractError("cannot go from LoRA to factored blocks")
        elif mode == "lora":
            if net.mode != "lora":
                to_lora(net, rank, self.adapter_rng, self.cfg.lora_alpha)
            elif rank != self.rank:
                set_policy_rank(net, rank, self.adapter_rng)
        self.rank = rank

    def _enter_offline(self) -> None:
        mode, rule = self._rule("offline")
        if mode != "plain":
            # epoch e (1-based) trains at the schedule value for index e - 1
            self._apply(mode, scheduled_rank(self.schedule, 0) if rule == "schedule" else self.r_max)

    def _enter_online(self) -> None:
        mode, rule = self._rule("online")
        if rule == "r_min":
            self._apply(mode, self.cfg.r_min)
        elif rule == "schedule":
            self._apply(mode, self.rank)
        self.dataset = self.d_base.copy()

    # -- stepping ------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.stage == "done" and self.pending_eval is None

    @property
    def nel(self) -> int:
        if self.stage == "offline":
            return self.d_base.n_labels
        return self.dataset.n_labels

    def _want_eval(self, iteration: int) -> bool:
        c = self.cfg
        if c.eval_checkpoints == "none" or c.eval_rollouts == 0:
            return False
        final = iteration == c.online_iters
        if c.eval_checkpoints == "final":
            return final
        return final or (c.eval_every > 0 and iteration % c.eval_every == 0)

    def _log_epoch(self, phase: str, index: int, stats: EpochStats) -> None:
        mean_bt = stats.total_time / stats.n_batches if stats.n_batches else 0.0
        self.epochs.append(EpochRecord(phase, index, self.rank, self.policy.net.mode, stats.n_batches,
                                       stats.n_samples, mean_bt, stats.total_time, stats.loss, self.nel))
        self.mode_log.append((phase, index, self.policy.net.mode, self.rank))

    def _after_epoch(self, e: int) -> None:
        """Rank reduction after training epoch ``e`` (1-based, offline and online counted together)."""
        phase = "offline" if self.stage == "offline" else "online"
        mode, rule = self._rule(phase)
        if rule == "schedule" and e <= self.schedule.total_epochs:
            self._apply(mode, scheduled_rank(self.schedule, e))

    def advance(self) -> str:
        """Run the next unit of work; returns a short description of it."""
        c = self.cfg
        if self.pending_eval is not None:
            it = self.pending_eval
            m = self.evaluate_now()
            self.checkpoints.append(CheckpointRecord(it, self.nel, m.sr, m.msd_mean, m.msd_std))
            self.pending_eval = None
            return f"eval@{it}"
        if self.stage == "offline":
            if self.epoch < c.offline_epochs:
                stats = self.trainer.train_epoch(self.d_base)
                self.epoch += 1
                self._log_epoch("offline", self.epoch, stats)
                self._after_epoch(self.epoch)
                return f"offline epoch {self.epoch}"
            self._enter_online()
            self.stage = "online"
            if self._want_eval(0):
                self.pending_eval = 0
            return "enter online"
        if self.stage == "online":
            if self.iteration < c.online_iters:
                self._online_iteration()
                return f"online iteration {self.iteration}"
            self.stage = "done"
            return "done"
        return "done"

    def _online_iteration(self) -> None:
        j = self.iteration + 1
        seed = _episode_seed(self.cfg.seed, "online", j)
        net_cfg = self.policy.cfg
        if self.cfg.strategy == "bc":
            traj = expert_rollout(self.env, seed)
            self.dataset.append(traj)
        else:
            traj, dj = rollout_with_gate(self.env, self.policy, scripted_expert_for(self.env), self.gate, seed,
                                         self.rollout_rng, net_cfg.obs_horizon, net_cfg.horizon)
            self.dataset.extend(dj)
        stats = self.trainer.train_epoch(self.dataset)
        self.iteration = j
        self._log_epoch("online", j, stats)
        self._after_epoch(self.cfg.offline_epochs + j)
        if self._want_eval(j):
            self.pending_eval = j

    def run(self, until: Optional[Callable[["DaggerSession"], bool]] = None) -> "DaggerSession":
        while not self.done:
            if until is not None and until(self):
                break
            self.advance()
        return self

    def eval_seeds(self) -> list[int]:
        return [self.eval_seed_base + k for k in range(self.cfg.eval_rollouts)]

    def evaluate_now(self) -> Metrics:
        env_params = self.env_params
        return evaluate(self.policy, lambda: PointReach2D(**env_params), self.cfg.eval_rollouts, self.eval_seeds())

    def report(self) -> MetricsReport:
        return metrics_aggregate(self)


def scripted_expert_for(env: PointReach2D, gain: float = 1.0):
    return lambda obs: scripted_expert(obs, gain, env.v_max)


def drift_dagger(cfg: SessionConfig, env_params: Optional[dict] = None, net_kw: Optional[dict] = None,
                 run_id: str = "run") -> DaggerSession:
    """Run a full session of any strategy and return it (policy, datasets, logs)."""
    return DaggerSession(cfg, env_params, net_kw, run_id).run()


def hg_dagger(cfg: SessionConfig, env_params: Optional[dict] = None, net_kw: Optional[dict] = None) -> dict:
    """Stand-alone full-rank expert-gated DAgger, written without any rank logic.

    Shares only the building blocks (environment, expert, gate, dataset,
    trainer) with ``DaggerSession``; used to cross-check the degenerate
    modes of the general driver. Returns the policy, the dataset and the
    per-epoch losses.
    """
    env = PointReach2D(**(env_params or {}))
    ss = np.random.SeedSequence(int(cfg.seed) & 0xFFFFFFFF)
    init_ss, train_ss, roll_ss, _ = ss.spawn(4)
    init_seed = int(init_ss.generate_state(1, np.uint32)[0])
    net_cfg = net_config_for(env, **(net_kw or {}))
    policy = build_policy(cfg, net_cfg, env, init_seed)
    trainer = Trainer(policy, cfg.lr, cfg.batch_size, np.random.default_rng(train_ss))
    rollout_rng = np.random.default_rng(roll_ss)
    d_base = collect_offline(env, cfg.offline_rollouts, cfg.seed, net_cfg.obs_horizon, net_cfg.horizon)
    if cfg.gate_threshold == "auto":
        gate = ExpertGate(compute_gate_threshold(d_base))
    else:
        gate = ExpertGate(float(cfg.gate_threshold))
    losses = []
    for _ in range(cfg.offline_epochs):
        losses.append(trainer.train_epoch(d_base).loss)
    data = d_base.copy()
    for j in range(1, cfg.online_iters + 1):
        _, dj = rollout_with_gate(env, policy, scripted_expert_for(env), gate, _episode_seed(cfg.seed, "online", j),
                                  rollout_rng, net_cfg.obs_horizon, net_cfg.horizon)
        data.extend(dj)
        losses.append(trainer.train_epoch(data).loss)
    return {"policy": policy, "dataset": data, "losses": losses}

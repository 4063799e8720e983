"""Clip pairs, the oracle rater, the annotation log, and the rating queue.

A clip pair points at the same index window in the demo video and in one
agent rollout (aligned clips). Ratings come either from the distance-based
oracle below or from a human via the HTTP service; both sides write to the
same append-only annotation log through a single-writer store.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass

import numpy as np

from .hopper import STATE_DIM, EnvParams, RandomPolicy, Trajectory, rollout
from .render import DemoVideo
from .simpred import AnnotationSample, make_observation

CLIP_LENGTH = 9  # 0.3 s of video at 30 fps
RATING_SOURCES = ("oracle", "human")


class OracleUnavailableError(RuntimeError):
    """Raised when a rating needs ground-truth states the demo lacks."""


class AnnotationLogError(ValueError):
    """Raised when an annotation log line cannot be parsed."""


@dataclass(frozen=True)
class ClipPair:
    pair_id: str
    demo_start: int
    agent_rollout_id: str
    agent_start: int
    length: int = CLIP_LENGTH

    def __post_init__(self):
        if self.demo_start != self.agent_start:
            raise ValueError("clips must be index-aligned (demo_start == agent_start)")
        if self.demo_start < 0:
            raise ValueError("negative clip start")
        if self.length < 1:
            raise ValueError("clip length must be >= 1")


@dataclass(frozen=True)
class AnnotationRecord:
    pair: ClipPair
    rating: int
    source: str
    timestamp: float

    def __post_init__(self):
        if not 1 <= int(self.rating) <= 5:
            raise ValueError(f"rating {self.rating} outside 1..5")
        if self.source not in RATING_SOURCES:
            raise ValueError(f"unknown rating source {self.source!r}")


_DEFAULT_WEIGHTS = (1.0, 2.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0)  # y and theta dominate


@dataclass(frozen=True)
class OracleConfig:
    weights: tuple = _DEFAULT_WEIGHTS
    sigma: float = 1.0
    thresholds: tuple = (0.8, 0.6, 0.4, 0.2)  # similarity cutpoints for ratings 5..2

    def __post_init__(self):
        if len(self.weights) != STATE_DIM:
            raise ValueError(f"need {STATE_DIM} component weights")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        t = self.thresholds
        if len(t) != 4 or any(not 0 < v < 1 for v in t) or any(later >= earlier for earlier, later in zip(t, t[1:])):
            raise ValueError("thresholds must be 4 strictly decreasing values in (0,1)")


def sample_clip_pair(
    demo: DemoVideo,
    agent: Trajectory,
    length: int = CLIP_LENGTH,
    seed: int = 0,
    rollout_id: str | None = None,
) -> ClipPair:
    """Uniformly pick one aligned clip window that fits both sequences."""
    max_start = min(demo.n_frames, agent.length) - length
    if max_start < 0:
        raise ValueError(f"clip of length {length} does not fit demo or rollout")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFF, 0xC11B]))
    start = int(rng.integers(0, max_start + 1))
    rid = rollout_id if rollout_id is not None else f"rollout-{agent.seed}"
    return ClipPair(
        pair_id=f"{rid}:{start}+{length}:{seed}",
        demo_start=start,
        agent_rollout_id=rid,
        agent_start=start,
        length=length,
    )


def oracle_rate(demo_states: np.ndarray, agent_states: np.ndarray, cfg: OracleConfig) -> int:
    """Quantized similarity of two state clips.

    e is the weight-normalized RMS deviation over steps and components,
    s = exp(-e/sigma), and the rating is the first threshold band s reaches.
    """
    if demo_states is None:
        raise OracleUnavailableError("oracle unavailable: demo has no ground-truth states")
    demo_states = np.asarray(demo_states, dtype=np.float64)
    agent_states = np.asarray(agent_states, dtype=np.float64)
    if demo_states.shape != agent_states.shape:
        raise ValueError("clips must have equal shapes")
    if demo_states.ndim != 2 or demo_states.shape[1] != STATE_DIM:
        raise ValueError(f"clips must be (steps, {STATE_DIM}) state arrays")
    w = np.asarray(cfg.weights)
    delta = demo_states - agent_states
    e = float(np.sqrt(np.sum(w * delta**2) / (len(demo_states) * w.sum())))
    s = float(np.exp(-e / cfg.sigma))
    for rating, cut in zip((5, 4, 3, 2), cfg.thresholds):
        if s >= cut:
            return rating
    return 1


def rate_pair(demo: DemoVideo, agent: Trajectory, pair: ClipPair, cfg: OracleConfig) -> int:
    """Oracle rating for one sampled pair against its source sequences."""
    if not demo.has_states:
        raise OracleUnavailableError("oracle unavailable: demo has no ground-truth states")
    demo_clip = demo.states[pair.demo_start : pair.demo_start + pair.length]
    agent_clip = agent.states_array()[pair.agent_start : pair.agent_start + pair.length]
    if len(demo_clip) < pair.length or len(agent_clip) < pair.length:
        raise ValueError("pair window exceeds sequence bounds")
    return oracle_rate(demo_clip, agent_clip, cfg)


def make_oracle_rater(cfg: OracleConfig | None = None):
    """Rater callable (demo, agent, pair) -> rating, interchangeable with humans."""
    cfg = cfg or OracleConfig()

    def rater(demo: DemoVideo, agent: Trajectory, pair: ClipPair) -> int:
        return rate_pair(demo, agent, pair, cfg)

    return rater


_LOG_FIELDS = (
    "pair_id",
    "demo_start",
    "agent_rollout_id",
    "agent_start",
    "length",
    "rating",
    "source",
    "timestamp",
)


def _record_to_line(record: AnnotationRecord) -> str:
    payload = {
        "pair_id": record.pair.pair_id,
        "demo_start": record.pair.demo_start,
        "agent_rollout_id": record.pair.agent_rollout_id,
        "agent_start": record.pair.agent_start,
        "length": record.pair.length,
        "rating": record.rating,
        "source": record.source,
        "timestamp": record.timestamp,
    }
    return json.dumps(payload, sort_keys=True)


class AnnotationStore:
    """Append-only annotation log with a single-writer contract.

    All appends funnel through one store instance; a lock serializes them so
    each record lands as exactly one line.
    """

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._count = sum(1 for _ in open(path)) if _exists_nonempty(path) else 0

    def append(self, record: AnnotationRecord) -> None:
        if not isinstance(record, AnnotationRecord):
            raise TypeError("append takes an AnnotationRecord")
        line = _record_to_line(record)
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
            self._count += 1

    @property
    def count(self) -> int:
        with self._lock:
            return self._count


def _exists_nonempty(path: str) -> bool:
    try:
        with open(path) as fh:
            return bool(fh.readline())
    except FileNotFoundError:
        return False


def load_annotations(path: str) -> list:
    """Records in append order; malformed lines fail with their line number."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                missing = [k for k in _LOG_FIELDS if k not in obj]
                if missing:
                    raise ValueError(f"missing fields {missing}")
                pair = ClipPair(
                    pair_id=obj["pair_id"],
                    demo_start=int(obj["demo_start"]),
                    agent_rollout_id=obj["agent_rollout_id"],
                    agent_start=int(obj["agent_start"]),
                    length=int(obj["length"]),
                )
                records.append(
                    AnnotationRecord(
                        pair=pair,
                        rating=int(obj["rating"]),
                        source=obj["source"],
                        timestamp=float(obj["timestamp"]),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise AnnotationLogError(f"annotation log line {lineno}: {exc}") from exc
    return records


def clip_samples(demo: DemoVideo, agent: Trajectory, pair: ClipPair, rating: int) -> list:
    """Per-step (demo frame, agent observation, rating) samples for one clip."""
    states = agent.states_array()
    actions = agent.actions_array()
    samples = []
    for k in range(pair.length):
        obs = make_observation(states[pair.agent_start + k], actions[pair.agent_start + k])
        samples.append(
            AnnotationSample(
                frame=demo.frames[pair.demo_start + k],
                observation=obs,
                rating=rating,
            )
        )
    return samples


def pretrain_collect(
    demo: DemoVideo,
    env_params: EnvParams,
    n_annotations: int,
    rater,
    seed: int,
    clip_length: int = CLIP_LENGTH,
    store: AnnotationStore | None = None,
    source: str = "oracle",
    registry: dict | None = None,
) -> list:
    """Rated aligned clips from random-policy rollouts, expanded per step.

    Each annotation contributes clip_length training samples carrying the
    clip's rating. Every annotation uses a fresh rollout so the dataset spans
    many random behaviors. When a registry dict is given it gains one
    rollout_id -> Trajectory entry per annotation.
    """
    if n_annotations < 1:
        raise ValueError("n_annotations must be >= 1")
    if source not in RATING_SOURCES:
        raise ValueError(f"unknown rating source {source!r}")
    policy = RandomPolicy()
    dataset = []
    for i in range(n_annotations):
        traj, _ = rollout(policy, env_params, None, n_steps=demo.n_frames, seed=seed * 1000003 + i)
        rid = f"pretrain-{i}"
        if registry is not None:
            registry[rid] = traj
        pair = sample_clip_pair(demo, traj, length=clip_length, seed=seed * 2000003 + i, rollout_id=rid)
        rating = rater(demo, traj, pair)
        if store is not None:
            store.append(
                AnnotationRecord(pair=pair, rating=rating, source=source, timestamp=time.time())
            )
        dataset.extend(clip_samples(demo, traj, pair, rating))
    return dataset


class UnknownPairError(KeyError):
    """Pair id was never enqueued, already rated, or its lease lapsed."""


class LeaseExpiredError(UnknownPairError):
    """Lease ran out before the rating arrived; the pair was re-queued."""


class RatingExchange:
    """Pending-pair queue with exactly-once leased delivery.

    Producers enqueue (pair, payload); consumers take the next pending pair,
    hold a lease while rating, and complete it. An expired lease silently
    re-queues the pair, so no pair is ever lost and none is rated twice.
    """

    def __init__(self, lease_seconds: float = 120.0, clock=time.monotonic):
        if lease_seconds <= 0:
            raise ValueError("lease_seconds must be positive")
        self.lease_seconds = lease_seconds
        self._clock = clock
        self._lock = threading.Lock()
        self._queue = []  # [(pair, payload)]
        self._outstanding = {}  # pair_id -> (pair, payload, deadline)
        self._completed = set()
        self._enqueued = 0

    def _reap_expired(self) -> None:
        now = self._clock()
        expired = [pid for pid, (_, _, deadline) in self._outstanding.items() if deadline <= now]
        for pid in expired:
            pair, payload, _ = self._outstanding.pop(pid)
            self._queue.append((pair, payload))

    def enqueue(self, pair: ClipPair, payload=None) -> None:
        with self._lock:
            if pair.pair_id in self._completed or pair.pair_id in self._outstanding:
                raise ValueError(f"pair {pair.pair_id} already enqueued")
            if any(p.pair_id == pair.pair_id for p, _ in self._queue):
                raise ValueError(f"pair {pair.pair_id} already enqueued")
            self._queue.append((pair, payload))
            self._enqueued += 1

    def next_pending(self):
        """(pair, payload) under a fresh lease, or None when nothing waits."""
        with self._lock:
            self._reap_expired()
            if not self._queue:
                return None
            pair, payload = self._queue.pop(0)
            self._outstanding[pair.pair_id] = (pair, payload, self._clock() + self.lease_seconds)
            return pair, payload

    def complete(self, pair_id: str):
        """Settle an outstanding lease; returns its (pair, payload)."""
        with self._lock:
            self._reap_expired()
            if pair_id in self._outstanding:
                pair, payload, _ = self._outstanding.pop(pair_id)
                self._completed.add(pair_id)
                return pair, payload
            if any(p.pair_id == pair_id for p, _ in self._queue):
                raise LeaseExpiredError(f"lease for pair {pair_id} expired; pair re-queued")
            raise UnknownPairError(f"pair {pair_id} unknown or already rated")

    @property
    def depth(self) -> int:
        with self._lock:
            self._reap_expired()
            return len(self._queue)

    @property
    def outstanding_count(self) -> int:
        with self._lock:
            self._reap_expired()
            return len(self._outstanding)

    @property
    def completed_count(self) -> int:
        with self._lock:
            return len(self._completed)

    @property
    def enqueued_count(self) -> int:
        with self._lock:
            return self._enqueued

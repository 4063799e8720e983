"""Run orchestration: policy optimization, rating collection, predictor training.

A run starts with a pretraining stage (rated clips of random-policy rollouts,
then predictor training) and continues with a loop of policy updates on the
predictor-derived reward, clip-pair annotation at a fixed cadence, and
predictor refreshes over the full accumulated dataset.

Synchronous mode interleaves those roles in a fixed round-robin so the whole
run is a pure function of its seeds. Asynchronous mode runs them as three
threads that communicate only through the pending-pair queue, the append-only
annotation log, and immutable versioned predictor snapshots.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .feedback import (
    CLIP_LENGTH,
    AnnotationRecord,
    AnnotationStore,
    ClipPair,
    OracleConfig,
    OracleUnavailableError,
    RatingExchange,
    clip_samples,
    make_oracle_rater,
    oracle_rate,
    pretrain_collect,
    rate_pair,
    sample_clip_pair,
)
from .hopper import ACTION_DIM, STATE_DIM, EnvParams, RandomPolicy, Trajectory, rollout
from .nets import DenseNet, SgdConfig, load_net, save_net
from .render import DemoVideo, encode_png, frame_features, rasterize, read_demo, write_demo
from .simpred import (
    N_CLASSES,
    AnnotationSample,
    SimilarityPredictor,
    TrainVariant,
    fine_tune,
    load_predictor,
    make_observations,
    make_predictor,
    predict_from_features,
    save_predictor,
    train,
)
from .trpo import (
    GaussianPolicy,
    TrpoConfig,
    collect_rollouts,
    load_policy,
    make_policy,
    make_value_net,
    save_policy,
    trpo_update,
)

RATER_KINDS = ("oracle", "human")
RUN_MODES = ("sync", "async")

# every 7th annotation clip is held out for validation
VAL_CLIP_STRIDE = 7
VAL_CLIP_PHASE = 3

METRIC_COLUMNS = ("update", "mean_reward", "kl", "surrogate_improvement", "backtracks", "predictor_version")
_METRIC_INTS = {"update", "backtracks", "predictor_version"}

# seed stream tags; one arithmetic stream per role keeps reseeding collision-free
_SEED_PREDICTOR = 1
_SEED_POLICY = 2
_SEED_PRETRAIN = 3
_SEED_ROLLOUT = 4
_SEED_PAIR = 5
_SEED_REFRESH = 6


def _sub_seed(seed: int, tag: int, index: int = 0) -> int:
    return (seed * 0x9E3779B1 + tag * 0x85EBCA6B + index * 0x27D4EB2F) & 0x7FFFFFFF


class CheckpointError(FileNotFoundError):
    """A run directory is missing an artifact that resume() needs."""


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; two runs with equal configs agree bit-for-bit in sync mode."""

    demo_path: str
    run_dir: str
    rater: str = "oracle"
    mode: str = "sync"
    pretrain_annotations: int = 200
    online_annotations: int = 150
    cadence: int = 5  # clip pairs rated per policy update
    n_updates: int = 60
    variant: TrainVariant = TrainVariant.AdditionalLayer
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    pretrain_epochs: int = 30
    refresh_epochs: int = 10
    init_predictor: str | None = None  # predictor checkpoint dir; switches training to fine_tune
    seed: int = 0

    def __post_init__(self):
        if self.rater not in RATER_KINDS:
            raise ValueError(f"rater must be one of {RATER_KINDS}")
        if self.init_predictor is not None and not self.init_predictor:
            raise ValueError("init_predictor must be a path or None")
        if self.mode not in RUN_MODES:
            raise ValueError(f"mode must be one of {RUN_MODES}")
        if self.pretrain_annotations < 0 or self.online_annotations < 0:
            raise ValueError("annotation budgets must be >= 0")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.n_updates < 0:
            raise ValueError("n_updates must be >= 0")
        if self.pretrain_epochs < 0 or self.refresh_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


def config_to_dict(config: RunConfig) -> dict:
    d = asdict(config)
    d["variant"] = config.variant.value
    return d


def config_from_dict(d: dict) -> RunConfig:
    oracle = d["oracle"]
    return RunConfig(
        demo_path=d["demo_path"],
        run_dir=d["run_dir"],
        rater=d["rater"],
        mode=d["mode"],
        pretrain_annotations=int(d["pretrain_annotations"]),
        online_annotations=int(d["online_annotations"]),
        cadence=int(d["cadence"]),
        n_updates=int(d["n_updates"]),
        variant=TrainVariant(d["variant"]),
        trpo=TrpoConfig(**d["trpo"]),
        sgd=SgdConfig(**d["sgd"]),
        oracle=OracleConfig(
            weights=tuple(oracle["weights"]),
            sigma=oracle["sigma"],
            thresholds=tuple(oracle["thresholds"]),
        ),
        pretrain_epochs=int(d["pretrain_epochs"]),
        refresh_epochs=int(d["refresh_epochs"]),
        init_predictor=d.get("init_predictor"),
        seed=int(d["seed"]),
    )


@dataclass(frozen=True)
class RunPaths:
    """Layout of a run directory."""

    run_dir: str

    @property
    def config_json(self) -> str:
        return os.path.join(self.run_dir, "config.json")

    @property
    def demo_vdm(self) -> str:
        return os.path.join(self.run_dir, "demo.vdm")

    @property
    def annotations_log(self) -> str:
        return os.path.join(self.run_dir, "annotations.log")

    @property
    def metrics_csv(self) -> str:
        return os.path.join(self.run_dir, "metrics.csv")

    @property
    def state_json(self) -> str:
        return os.path.join(self.run_dir, "state.json")

    @property
    def checkpoints_dir(self) -> str:
        return os.path.join(self.run_dir, "checkpoints")

    def predictor_dir(self, version: int) -> str:
        return os.path.join(self.checkpoints_dir, f"predictor_v{version}")

    def policy_dir(self, update: int) -> str:
        return os.path.join(self.checkpoints_dir, f"policy_u{update}")

    def value_file(self, update: int) -> str:
        return os.path.join(self.checkpoints_dir, f"value_u{update}.vnn")

    def dataset_file(self, name: str) -> str:
        return os.path.join(self.checkpoints_dir, f"dataset_{name}.npy")


@dataclass
class RunState:
    """Live state of one run; checkpoint() persists everything resume() rebuilds.

    The rollout registry is an in-memory audit trail (every rated pair must
    come from a registered rollout); it is not part of checkpoints.
    """

    config: RunConfig
    demo: DemoVideo
    demo_features: np.ndarray  # (n_frames, FEATURE_DIM); fixed for the demo
    env_params: EnvParams
    predictor: SimilarityPredictor
    predictor_version: int
    policy: GaussianPolicy
    value_net: DenseNet
    dataset: list  # AnnotationSample, appended in whole-clip blocks
    update_count: int
    pretrain_used: int
    online_used: int
    metrics: list
    registry: dict
    saved_dataset_size: int = -1


# -- reward from the predictor ------------------------------------------------


def predictor_reward(pred: SimilarityPredictor, demo_features: np.ndarray):
    """Per-step reward closure: scalarized expected rating of each aligned step.

    An untrained predictor gives the uniform distribution, hence a constant
    reward of 0.5 per step.
    """

    def reward_fn(traj: Trajectory) -> np.ndarray:
        obs = make_observations(traj.states_array(), traj.actions_array())
        probs = predict_from_features(pred, demo_features, obs)
        expected = probs @ np.arange(1, N_CLASSES + 1, dtype=np.float64)
        return (expected - 1.0) / (N_CLASSES - 1)

    return reward_fn


def select_clip_pairs(
    pred: SimilarityPredictor,
    demo_features: np.ndarray,
    trajs: list,
    rollout_ids: list,
    k: int,
    update: int,
    n_prior: int = 0,
    seed: int = 0,
    clip_length: int = CLIP_LENGTH,
) -> list:
    """Pick k aligned windows, alternating uncertainty picks with a time sweep.

    Even-ordinal picks take the window with the highest mean predictive
    entropy over all fresh rollouts: labels bought where the predictor is
    least sure move it furthest. Entropy alone has a blind spot, though. Once
    a region of the timeline is confidently labeled, it is never revisited,
    so a policy that starts behaving differently there keeps collecting stale
    confident scores. Odd-ordinal picks therefore sweep a rotating window of
    the episode timeline (one clip-width band per pick, uniformly random
    among the fresh windows in that band), which re-audits every phase within
    one rotation no matter what the predictor believes about it.

    n_prior is the number of online annotations bought before this call; it
    keeps the ordinal parity and the sweep position stable across ticks and
    resume. Deterministic given (seed, update, n_prior) and the inputs.
    """
    scored = []
    for ti, traj in enumerate(trajs):
        obs = make_observations(traj.states_array(), traj.actions_array())
        n = min(len(obs), len(demo_features))
        if n < clip_length:
            continue
        probs = predict_from_features(pred, demo_features[:n], obs[:n])
        h = -np.sum(probs * np.log(np.maximum(probs, 1e-300)), axis=1)
        sums = np.cumsum(np.concatenate([[0.0], h]))
        wins = (sums[clip_length:] - sums[:-clip_length]) / clip_length
        scored.extend((-wins[s], ti, s) for s in range(n - clip_length + 1))
    scored.sort()
    n_demo_windows = len(demo_features) - clip_length + 1
    n_bands = max(1, -(-n_demo_windows // clip_length))

    def overlaps(ti, s, used):
        return any(ti == uti and abs(s - us) < clip_length for uti, us in used)

    pairs, used = [], []
    for i in range(k):
        ordinal = n_prior + i
        pick = None
        if ordinal % 2 == 1:
            band = (ordinal // 2) % n_bands
            lo, hi = band * clip_length, min((band + 1) * clip_length, n_demo_windows)
            rng = np.random.default_rng(np.random.SeedSequence([seed, update, ordinal]))
            candidates = [
                (ti, s)
                for _, ti, s in scored
                if lo <= s < hi and not overlaps(ti, s, used)
            ]
            if candidates:
                pick = candidates[rng.integers(len(candidates))]
        if pick is None:
            for _, ti, s in scored:
                if not overlaps(ti, s, used):
                    pick = (ti, s)
                    break
        if pick is None:
            break
        ti, s = pick
        used.append((ti, s))
        pairs.append(
            ClipPair(
                pair_id=f"{rollout_ids[ti]}:{s}+{clip_length}:u{update}",
                demo_start=s,
                agent_rollout_id=rollout_ids[ti],
                agent_start=s,
                length=clip_length,
            )
        )
    return pairs


# -- dataset bookkeeping -------------------------------------------------------


def split_dataset(samples: list, clip_length: int = CLIP_LENGTH) -> tuple:
    """Deterministic by-clip train/validation split, stratified by rating.

    Splitting whole clips keeps the nine samples of one annotation on the same
    side, so validation never scores samples whose clip was trained on. The
    stride runs within each rating class rather than globally: on heavily
    skewed datasets a global stride can leave validation with only the
    majority class, and accuracy-based model selection then prefers whatever
    never predicts a rare rating.
    """
    if len(samples) % clip_length:
        raise ValueError("dataset length must be a multiple of the clip length")
    seen_per_rating: dict = {}
    train_set, val_set = [], []
    for c in range(len(samples) // clip_length):
        block = samples[c * clip_length : (c + 1) * clip_length]
        i = seen_per_rating.get(block[0].rating, 0)
        seen_per_rating[block[0].rating] = i + 1
        (val_set if i % VAL_CLIP_STRIDE == VAL_CLIP_PHASE else train_set).extend(block)
    train_digests = {s.digest() for s in train_set}
    val_set = [s for s in val_set if s.digest() not in train_digests]
    return train_set, val_set


def _write_dataset(samples: list, paths: RunPaths) -> None:
    if samples:
        frames = np.stack([s.frame for s in samples]).astype(np.uint8)
        obs = np.stack([s.observation for s in samples]).astype(np.float64)
        ratings = np.array([s.rating for s in samples], dtype=np.uint8)
    else:
        frames = np.empty((0, 64, 64), dtype=np.uint8)
        obs = np.empty((0, STATE_DIM + ACTION_DIM), dtype=np.float64)
        ratings = np.empty((0,), dtype=np.uint8)
    for name, arr in (("frames", frames), ("observations", obs), ("ratings", ratings)):
        path = paths.dataset_file(name)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            np.save(fh, arr)
        os.replace(tmp, path)


def _read_dataset(paths: RunPaths) -> list:
    arrays = {}
    for name in ("frames", "observations", "ratings"):
        path = paths.dataset_file(name)
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint artifact: {path}")
        arrays[name] = np.load(path)
    return [
        AnnotationSample(arrays["frames"][i], arrays["observations"][i], int(arrays["ratings"][i]))
        for i in range(len(arrays["ratings"]))
    ]


def read_dataset(run_dir: str) -> list:
    """Load the per-step annotation samples checkpointed under a run directory."""
    return _read_dataset(RunPaths(run_dir))


# -- metrics CSV ---------------------------------------------------------------


def _metrics_line(row: dict) -> str:
    cells = []
    for col in METRIC_COLUMNS:
        v = row[col]
        cells.append(str(int(v)) if col in _METRIC_INTS else repr(float(v)))
    return ",".join(cells) + "\n"


def append_metrics_row(path: str, row: dict) -> None:
    fresh = not os.path.exists(path)
    with open(path, "a") as fh:
        if fresh:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
        fh.write(_metrics_line(row))


def read_metrics(path: str) -> list:
    """Rows of a metrics CSV; floats round-trip exactly (written via repr)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        return []
    header = tuple(lines[0].split(","))
    if header != METRIC_COLUMNS:
        raise ValueError(f"unexpected metrics columns {header}")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        rows.append(
            {col: (int(c) if col in _METRIC_INTS else float(c)) for col, c in zip(METRIC_COLUMNS, cells)}
        )
    return rows


# -- run setup and persistence ---------------------------------------------------


def _atomic_json(path: str, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _write_state_json(state: RunState, paths: RunPaths) -> None:
    _atomic_json(
        paths.state_json,
        {
            "dataset_size": len(state.dataset),
            "online_used": state.online_used,
            "predictor_version": state.predictor_version,
            "pretrain_used": state.pretrain_used,
            "update_count": state.update_count,
        },
    )


def _save_progress(state: RunState, paths: RunPaths) -> None:
    if state.saved_dataset_size != len(state.dataset):
        _write_dataset(state.dataset, paths)
        state.saved_dataset_size = len(state.dataset)
    _write_state_json(state, paths)


def init_run(config: RunConfig):
    """Create the run directory skeleton and the initial (version 0) state."""
    paths = RunPaths(config.run_dir)
    os.makedirs(paths.checkpoints_dir, exist_ok=True)
    for p in (paths.metrics_csv, paths.annotations_log):
        if os.path.exists(p):
            raise ValueError(f"run directory already holds a run: {p}")
    demo = read_demo(config.demo_path)
    if demo.n_frames < CLIP_LENGTH:
        raise ValueError(f"demo must have at least {CLIP_LENGTH} frames")
    if config.rater == "oracle" and not demo.has_states:
        raise OracleUnavailableError("oracle rater needs a demo with ground-truth states")
    _atomic_json(paths.config_json, config_to_dict(config))
    write_demo(demo, paths.demo_vdm)
    if config.init_predictor is not None:
        predictor = load_predictor(config.init_predictor)
        if predictor.obs_dim != STATE_DIM + ACTION_DIM:
            raise ValueError("init predictor observation dimension does not fit this task")
        if predictor.variant != config.variant:
            raise ValueError(
                f"init predictor variant {predictor.variant.value} does not match "
                f"configured variant {config.variant.value}"
            )
    else:
        predictor = make_predictor(
            config.variant, STATE_DIM + ACTION_DIM, seed=_sub_seed(config.seed, _SEED_PREDICTOR)
        )
    policy = make_policy(demo.n_frames, seed=_sub_seed(config.seed, _SEED_POLICY))
    value_net = make_value_net(seed=_sub_seed(config.seed, _SEED_POLICY))
    state = RunState(
        config=config,
        demo=demo,
        demo_features=np.stack([frame_features(f) for f in demo.frames]),
        env_params=EnvParams(),
        predictor=predictor,
        predictor_version=0,
        policy=policy,
        value_net=value_net,
        dataset=[],
        update_count=0,
        pretrain_used=0,
        online_used=0,
        metrics=[],
        registry={},
    )
    save_predictor(predictor, paths.predictor_dir(0))
    save_policy(policy, paths.policy_dir(0))
    save_net(value_net, paths.value_file(0))
    _save_progress(state, paths)
    store = AnnotationStore(paths.annotations_log)
    return state, paths, store


def checkpoint(state: RunState, run_dir: str) -> None:
    """Persist everything resume() needs; repeated calls rewrite identical bytes."""
    paths = RunPaths(run_dir)
    os.makedirs(paths.checkpoints_dir, exist_ok=True)
    _atomic_json(paths.config_json, config_to_dict(state.config))
    if not os.path.exists(paths.demo_vdm):
        write_demo(state.demo, paths.demo_vdm)
    save_predictor(state.predictor, paths.predictor_dir(state.predictor_version))
    save_policy(state.policy, paths.policy_dir(state.update_count))
    save_net(state.value_net, paths.value_file(state.update_count))
    _write_dataset(state.dataset, paths)
    state.saved_dataset_size = len(state.dataset)
    _write_state_json(state, paths)


def resume(run_dir: str) -> RunState:
    """Rebuild a RunState from a checkpointed run directory."""
    paths = RunPaths(run_dir)
    for required in (paths.config_json, paths.state_json, paths.demo_vdm):
        if not os.path.exists(required):
            raise CheckpointError(f"missing checkpoint artifact: {required}")
    with open(paths.config_json) as fh:
        config = config_from_dict(json.load(fh))
    config = replace(config, run_dir=run_dir)
    with open(paths.state_json) as fh:
        meta = json.load(fh)
    version = int(meta["predictor_version"])
    update = int(meta["update_count"])
    for required in (
        os.path.join(paths.predictor_dir(version), "manifest.json"),
        os.path.join(paths.policy_dir(update), "meta.json"),
        paths.value_file(update),
    ):
        if not os.path.exists(required):
            raise CheckpointError(f"missing checkpoint artifact: {required}")
    demo = read_demo(paths.demo_vdm)
    dataset = _read_dataset(paths)
    if len(dataset) != int(meta["dataset_size"]):
        raise CheckpointError("dataset files disagree with state.json dataset_size")
    state = RunState(
        config=config,
        demo=demo,
        demo_features=np.stack([frame_features(f) for f in demo.frames]),
        env_params=EnvParams(),
        predictor=load_predictor(paths.predictor_dir(version)),
        predictor_version=version,
        policy=load_policy(paths.policy_dir(update)),
        value_net=load_net(paths.value_file(update)),
        dataset=dataset,
        update_count=update,
        pretrain_used=int(meta["pretrain_used"]),
        online_used=int(meta["online_used"]),
        metrics=read_metrics(paths.metrics_csv) if os.path.exists(paths.metrics_csv) else [],
        registry={},
        saved_dataset_size=len(dataset),
    )
    return state


# -- synchronous driver ----------------------------------------------------------


def _default_rater(config: RunConfig):
    if config.rater == "oracle":
        return make_oracle_rater(config.oracle)
    raise ValueError("human mode needs a rating source wired to the exchange")


def _train_predictor(state: RunState, paths: RunPaths, epochs: int) -> None:
    """Train over the full accumulated dataset and publish the next version.

    Runs initialized from an existing predictor checkpoint fine-tune instead:
    0.1x learning rate over every accumulated sample, no best-validation
    snapshotting, so the small transfer budget is never split away.
    """
    seed = _sub_seed(state.config.seed, _SEED_REFRESH, state.predictor_version)
    if state.config.init_predictor is not None:
        pred = fine_tune(state.predictor, state.dataset, state.config.sgd, epochs, seed)
    else:
        train_set, val_set = split_dataset(state.dataset)
        pred, _ = train(state.predictor, train_set, val_set, state.config.variant, state.config.sgd, epochs, seed)
    state.predictor = pred
    state.predictor_version += 1
    save_predictor(pred, paths.predictor_dir(state.predictor_version))


def _pretrain(state: RunState, paths: RunPaths, store: AnnotationStore, rater) -> None:
    cfg = state.config
    if cfg.pretrain_annotations == 0 or state.pretrain_used >= cfg.pretrain_annotations:
        return
    samples = pretrain_collect(
        state.demo,
        state.env_params,
        cfg.pretrain_annotations,
        rater,
        seed=_sub_seed(cfg.seed, _SEED_PRETRAIN),
        store=store,
        source=cfg.rater,
        registry=state.registry,
    )
    state.dataset.extend(samples)
    state.pretrain_used = cfg.pretrain_annotations
    _train_predictor(state, paths, epochs=cfg.pretrain_epochs)
    _save_progress(state, paths)


def _tick(state: RunState, paths: RunPaths, store: AnnotationStore, rater) -> None:
    """One round: policy update, cadence of rated pairs, predictor refresh."""
    cfg = state.config
    u = state.update_count
    version_used = state.predictor_version
    reward_fn = predictor_reward(state.predictor, state.demo_features)
    batch, trajs = collect_rollouts(
        state.policy,
        state.value_net,
        state.env_params,
        reward_fn,
        state.demo.n_frames,
        cfg.trpo,
        seed=_sub_seed(cfg.seed, _SEED_ROLLOUT, u),
    )
    state.policy, state.value_net, stats = trpo_update(state.policy, state.value_net, batch, cfg.trpo)
    rollout_ids = [f"update-{u}-episode-{e}" for e in range(len(trajs))]
    for rid, traj in zip(rollout_ids, trajs):
        state.registry[rid] = traj
    state.update_count = u + 1
    save_policy(state.policy, paths.policy_dir(state.update_count))
    save_net(state.value_net, paths.value_file(state.update_count))
    remaining = cfg.online_annotations - state.online_used
    if remaining > 0:
        pairs = select_clip_pairs(
            state.predictor,
            state.demo_features,
            trajs,
            rollout_ids,
            k=min(cfg.cadence, remaining),
            update=u,
            n_prior=state.online_used,
            seed=cfg.seed,
        )
        for pair in pairs:
            traj = state.registry[pair.agent_rollout_id]
            rating = int(rater(state.demo, traj, pair))
            store.append(AnnotationRecord(pair=pair, rating=rating, source=cfg.rater, timestamp=time.time()))
            state.dataset.extend(clip_samples(state.demo, traj, pair, rating))
            state.online_used += 1
        if pairs:
            _train_predictor(state, paths, epochs=cfg.refresh_epochs)
    row = {
        "update": u,
        "mean_reward": batch.mean_episode_reward,
        "kl": stats["kl"],
        "surrogate_improvement": stats["surrogate_improvement"],
        "backtracks": stats["backtracks"],
        "predictor_version": version_used,
    }
    state.metrics.append(row)
    append_metrics_row(paths.metrics_csv, row)
    _save_progress(state, paths)


def run(config: RunConfig, rater=None) -> RunState:
    """Execute a full run; returns the final state, checkpointed in run_dir."""
    if config.mode == "async":
        runner = AsyncRun(config, rater=rater)
        runner.start()
        runner.join()
        return runner.state
    if config.rater == "human" and rater is None:
        raise ValueError("human mode needs a rating source wired to the exchange")
    return SyncRun(config, rater=rater).run_to_completion()


def advance(state: RunState, n_ticks: int, rater=None) -> RunState:
    """Run additional policy updates on a live or resumed state."""
    paths = RunPaths(state.config.run_dir)
    store = AnnotationStore(paths.annotations_log)
    rater = rater or _default_rater(state.config)
    for _ in range(n_ticks):
        _tick(state, paths, store, rater)
    return state


class SyncRun:
    """A deterministic run with the AsyncRun lifecycle (start/join/status).

    The round-robin loop itself is single-threaded; start() merely moves it to
    a worker thread so an HTTP service can feed ratings in while it blocks.
    Human mode without an explicit rater gets its own pending-pair exchange.
    """

    def __init__(self, config: RunConfig, rater=None, lease_seconds: float = 120.0, clock=time.monotonic):
        if config.mode != "sync":
            raise ValueError("SyncRun requires mode='sync'")
        self.state, self.paths, self.store = init_run(config)
        self._finish_init(rater, lease_seconds, clock)

    @classmethod
    def from_checkpoint(cls, run_dir: str, rater=None, lease_seconds: float = 120.0, clock=time.monotonic):
        """Resume a checkpointed sync run and continue its remaining rounds.

        Checkpoints are tick-aligned; one taken before pretraining finished
        cannot be continued (the annotation log would double up), so it is
        refused.
        """
        state = resume(run_dir)
        if state.config.mode != "sync":
            raise ValueError("from_checkpoint resumes sync runs only")
        obj = cls.__new__(cls)
        obj.state = state
        obj.paths = RunPaths(run_dir)
        obj.store = AnnotationStore(obj.paths.annotations_log)
        if state.pretrain_used == 0 and obj.store.count > 0:
            raise ValueError("checkpoint predates pretrain completion; start a fresh run")
        obj._finish_init(rater, lease_seconds, clock)
        return obj

    def _finish_init(self, rater, lease_seconds: float, clock) -> None:
        config = self.state.config
        if rater is None:
            if config.rater == "human":
                self.exchange = RatingExchange(lease_seconds=lease_seconds, clock=clock)
                rater = HumanRater(self.exchange)
            else:
                self.exchange = None
                rater = make_oracle_rater(config.oracle)
        else:
            self.exchange = getattr(rater, "exchange", None)
        self._rater = rater
        self._errors = []
        self._done = threading.Event()
        self._thread = None

    @property
    def human_mode(self) -> bool:
        return self.state.config.rater == "human"

    def run_to_completion(self) -> RunState:
        try:
            cfg = self.state.config
            _pretrain(self.state, self.paths, self.store, self._rater)
            while (
                self.state.update_count < cfg.n_updates
                or self.state.online_used < cfg.online_annotations
            ):
                _tick(self.state, self.paths, self.store, self._rater)
            checkpoint(self.state, cfg.run_dir)
        finally:
            self._done.set()
        return self.state

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("run already started")

        def body():
            try:
                self.run_to_completion()
            except Exception as exc:  # noqa: BLE001 - surfaced via join()
                self._errors.append(exc)

        self._thread = threading.Thread(target=body, name="run-sync", daemon=True)
        self._thread.start()

    def join(self, timeout: float | None = None) -> bool:
        if self._thread is None:
            raise RuntimeError("run not started")
        self._thread.join(timeout)
        if self._errors:
            raise RuntimeError("sync run failed") from self._errors[0]
        return not self._thread.is_alive()

    def submit_rating(self, pair_id: str, rating: int):
        """Entry point for the rating UI; settles the blocked rater."""
        if self.exchange is None:
            raise RuntimeError("run has no pending-pair exchange")
        return deliver_rating(self.exchange, pair_id, rating)

    def status(self) -> dict:
        return {
            "annotations": self.store.count,
            "pretrain_used": self.state.pretrain_used,
            "online_used": self.state.online_used,
            "predictor_version": self.state.predictor_version,
            "update_count": self.state.update_count,
            "queue_depth": self.exchange.depth if self.exchange else 0,
            "outstanding": self.exchange.outstanding_count if self.exchange else 0,
            "done": self._done.is_set(),
        }


# -- human rating plumbing ---------------------------------------------------------


def pair_payload(
    demo: DemoVideo, traj: Trajectory, pair: ClipPair, fps: int | None = None, include_frames: bool = False
) -> dict:
    """Queue payload for one pair; frames are pre-encoded so repeated serves are byte-identical."""
    payload = {"trajectory": traj}
    if include_frames:
        payload["demo_png"] = [
            encode_png(demo.frames[pair.demo_start + k]) for k in range(pair.length)
        ]
        payload["agent_png"] = [
            encode_png(rasterize(traj.steps[pair.agent_start + k][0])) for k in range(pair.length)
        ]
        payload["fps"] = int(fps if fps is not None else demo.fps)
    return payload


def deliver_rating(exchange: RatingExchange, pair_id: str, rating: int, overflow=None):
    """Settle a leased pair with its rating.

    Pairs whose payload carries a deliver callback (blocking raters) get the
    rating directly; anything else goes to the overflow sink (async runs).
    """
    rating = int(rating)
    if not 1 <= rating <= 5:
        raise ValueError(f"rating {rating} outside 1..5")
    pair, payload = exchange.complete(pair_id)
    deliver = (payload or {}).get("deliver")
    if deliver is not None:
        deliver(rating)
    elif overflow is not None:
        overflow((pair, payload, rating))
    else:
        raise ValueError(f"pair {pair_id} has no rating consumer")
    return pair, payload


class HumanRater:
    """Rating source that enqueues a pair and blocks until a human settles it."""

    def __init__(self, exchange: RatingExchange, fps: int | None = None):
        self.exchange = exchange
        self.fps = fps

    def __call__(self, demo: DemoVideo, traj: Trajectory, pair: ClipPair) -> int:
        done = threading.Event()
        box = {}

        def deliver(rating: int) -> None:
            box["rating"] = int(rating)
            done.set()

        payload = pair_payload(demo, traj, pair, fps=self.fps, include_frames=True)
        payload["deliver"] = deliver
        self.exchange.enqueue(pair, payload)
        done.wait()
        return box["rating"]


# -- asynchronous driver ------------------------------------------------------------


class AsyncRun:
    """Concurrent run: three workers sharing only the queue, the log, and snapshots.

    The policy worker reads immutable predictor snapshots and enqueues clip
    pairs; the rater worker is the single writer of the annotation log and the
    dataset; the trainer worker is the single publisher of new snapshots.
    """

    def __init__(self, config: RunConfig, rater=None, lease_seconds: float = 120.0, clock=time.monotonic):
        self.state, self.paths, self.store = init_run(config)
        self.exchange = RatingExchange(lease_seconds=lease_seconds, clock=clock)
        self._pretrain_rater = rater
        self._submissions = queue.Queue()
        self._snapshot_lock = threading.Lock()
        self._snapshot = (self.state.predictor_version, self.state.predictor)
        self._dataset_lock = threading.Lock()
        self._online_rated = 0
        self._registry_lock = threading.Lock()
        self._errors = []
        self._done = threading.Event()
        self._driver = None

    @property
    def human_mode(self) -> bool:
        return self.state.config.rater == "human"

    # - shared-state accessors -

    def _read_snapshot(self):
        with self._snapshot_lock:
            return self._snapshot

    def _publish_snapshot(self, version: int, pred: SimilarityPredictor) -> None:
        with self._snapshot_lock:
            self._snapshot = (version, pred)
            self.state.predictor = pred
            self.state.predictor_version = version

    def _rated_count(self) -> int:
        with self._dataset_lock:
            return self._online_rated

    # - lifecycle -

    def start(self) -> None:
        if self._driver is not None:
            raise RuntimeError("run already started")
        self._driver = threading.Thread(target=self._drive, name="run-driver", daemon=True)
        self._driver.start()

    def join(self, timeout: float | None = None) -> bool:
        if self._driver is None:
            raise RuntimeError("run not started")
        self._driver.join(timeout)
        if self._errors:
            raise RuntimeError("async run failed") from self._errors[0]
        return not self._driver.is_alive()

    def submit_rating(self, pair_id: str, rating: int):
        """Entry point for the rating UI; routes to whoever waits on the pair."""
        return deliver_rating(self.exchange, pair_id, rating, overflow=self._submissions.put)

    def status(self) -> dict:
        with self._dataset_lock:
            online = self.state.online_used
        with self._snapshot_lock:
            version = self._snapshot[0]
        return {
            "annotations": self.store.count,
            "pretrain_used": self.state.pretrain_used,
            "online_used": online,
            "predictor_version": version,
            "update_count": self.state.update_count,
            "queue_depth": self.exchange.depth,
            "outstanding": self.exchange.outstanding_count,
            "done": self._done.is_set(),
        }

    # - workers -

    def _drive(self) -> None:
        try:
            cfg = self.state.config
            if cfg.rater == "oracle":
                pretrain_rater = self._pretrain_rater or make_oracle_rater(cfg.oracle)
            else:
                pretrain_rater = self._pretrain_rater or HumanRater(self.exchange)
            _pretrain(self.state, self.paths, self.store, pretrain_rater)
            self._publish_snapshot(self.state.predictor_version, self.state.predictor)
            workers = [
                threading.Thread(target=self._guard(w), name=name, daemon=True)
                for name, w in (
                    ("run-policy", self._policy_worker),
                    ("run-rater", self._rater_worker),
                    ("run-trainer", self._trainer_worker),
                )
            ]
            for w in workers:
                w.start()
            for w in workers:
                w.join()
            if not self._errors:
                checkpoint(self.state, cfg.run_dir)
        except Exception as exc:  # noqa: BLE001 - surfaced via join()
            self._errors.append(exc)
        finally:
            self._done.set()

    def _guard(self, worker):
        def body():
            try:
                worker()
            except Exception as exc:  # noqa: BLE001 - surfaced via join()
                self._errors.append(exc)

        return body

    def _policy_worker(self) -> None:
        state, cfg, paths = self.state, self.state.config, self.paths
        enqueued = 0
        while (state.update_count < cfg.n_updates or enqueued < cfg.online_annotations) and not self._errors:
            u = state.update_count
            version, pred = self._read_snapshot()
            reward_fn = predictor_reward(pred, state.demo_features)
            batch, trajs = collect_rollouts(
                state.policy,
                state.value_net,
                state.env_params,
                reward_fn,
                state.demo.n_frames,
                cfg.trpo,
                seed=_sub_seed(cfg.seed, _SEED_ROLLOUT, u),
            )
            state.policy, state.value_net, stats = trpo_update(state.policy, state.value_net, batch, cfg.trpo)
            rollout_ids = [f"update-{u}-episode-{e}" for e in range(len(trajs))]
            with self._registry_lock:
                for rid, traj in zip(rollout_ids, trajs):
                    state.registry[rid] = traj
            state.update_count = u + 1
            save_policy(state.policy, paths.policy_dir(state.update_count))
            save_net(state.value_net, paths.value_file(state.update_count))
            row = {
                "update": u,
                "mean_reward": batch.mean_episode_reward,
                "kl": stats["kl"],
                "surrogate_improvement": stats["surrogate_improvement"],
                "backtracks": stats["backtracks"],
                "predictor_version": version,
            }
            state.metrics.append(row)
            append_metrics_row(paths.metrics_csv, row)
            for j in range(min(cfg.cadence, cfg.online_annotations - enqueued)):
                traj = trajs[j % len(trajs)]
                rid = rollout_ids[j % len(trajs)]
                pair = sample_clip_pair(
                    state.demo, traj, seed=_sub_seed(cfg.seed, _SEED_PAIR, u * 65537 + j), rollout_id=rid
                )
                payload = pair_payload(state.demo, traj, pair, include_frames=cfg.rater == "human")
                self.exchange.enqueue(pair, payload)
                enqueued += 1

    def _rater_worker(self) -> None:
        state, cfg = self.state, self.state.config
        while self._rated_count() < cfg.online_annotations and not self._errors:
            if cfg.rater == "oracle":
                item = self.exchange.next_pending()
                if item is None:
                    time.sleep(0.002)
                    continue
                pair, payload = item
                self.exchange.complete(pair.pair_id)
                rating = rate_pair(state.demo, payload["trajectory"], pair, cfg.oracle)
            else:
                try:
                    pair, payload, rating = self._submissions.get(timeout=0.05)
                except queue.Empty:
                    continue
            self.store.append(
                AnnotationRecord(pair=pair, rating=rating, source=cfg.rater, timestamp=time.time())
            )
            samples = clip_samples(state.demo, payload["trajectory"], pair, rating)
            with self._dataset_lock:
                state.dataset.extend(samples)
                state.online_used += 1
                self._online_rated += 1

    def _trainer_worker(self) -> None:
        state, cfg, paths = self.state, self.state.config, self.paths
        target = min(cfg.cadence, cfg.online_annotations)
        while target and target <= cfg.online_annotations and not self._errors:
            while self._rated_count() < target and not self._errors:
                time.sleep(0.002)
            if self._errors:
                return
            with self._dataset_lock:
                snapshot_data = list(state.dataset)
            version, pred = self._read_snapshot()
            train_set, val_set = split_dataset(snapshot_data)
            new_pred, _ = train(
                pred,
                train_set,
                val_set,
                cfg.variant,
                cfg.sgd,
                cfg.refresh_epochs,
                seed=_sub_seed(cfg.seed, _SEED_REFRESH, version),
            )
            self._publish_snapshot(version + 1, new_pred)
            save_predictor(new_pred, paths.predictor_dir(version + 1))
            if target == cfg.online_annotations:
                return
            target = min(target + cfg.cadence, cfg.online_annotations)


# -- evaluation ----------------------------------------------------------------------


def per_step_oracle_ratings(demo: DemoVideo, states, cfg: OracleConfig | None = None) -> np.ndarray:
    """Oracle rating of every aligned single-step window; shape (n_frames,)."""
    cfg = cfg or OracleConfig()
    if not demo.has_states:
        raise OracleUnavailableError("oracle unavailable: demo has no ground-truth states")
    states = np.asarray(states, dtype=np.float64)
    if states.shape != (demo.n_frames, STATE_DIM):
        raise ValueError(f"states must have shape ({demo.n_frames}, {STATE_DIM})")
    demo_states = np.asarray(demo.states, dtype=np.float64)
    return np.array(
        [oracle_rate(demo_states[t : t + 1], states[t : t + 1], cfg) for t in range(len(states))]
    )


def state_mse_curve(demo: DemoVideo, states) -> np.ndarray:
    """Per-timestep mean squared error between demo states and agent states.

    Agent states are rounded to the demo's serialized float32 precision first,
    so replaying the exact trajectory a demo was recorded from scores zero.
    """
    if not demo.has_states:
        raise OracleUnavailableError("oracle unavailable: demo has no ground-truth states")
    states = np.asarray(states, dtype=np.float64)
    if states.shape != (demo.n_frames, STATE_DIM):
        raise ValueError(f"states must have shape ({demo.n_frames}, {STATE_DIM})")
    quantized = states.astype(np.float32).astype(np.float64)
    delta = np.asarray(demo.states, dtype=np.float64) - quantized
    return (delta**2).mean(axis=1)


def evaluate_against_demo(
    policy,
    demo: DemoVideo,
    env_params: EnvParams | None = None,
    cfg: OracleConfig | None = None,
    n_episodes: int = 5,
    seed: int = 0,
    greedy: bool = True,
) -> dict:
    """Mean per-step oracle rating and state MSE of fresh episodes vs the demo."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env_params = env_params or EnvParams()
    ratings, mses = [], []
    for e in range(n_episodes):
        traj, _ = rollout(policy, env_params, None, demo.n_frames, seed=seed * 131 + e, greedy=greedy)
        states = traj.states_array()
        ratings.append(float(per_step_oracle_ratings(demo, states, cfg).mean()))
        mses.append(float(state_mse_curve(demo, states).mean()))
    return {
        "mean_rating": float(np.mean(ratings)),
        "mean_mse": float(np.mean(mses)),
        "per_episode_rating": ratings,
        "per_episode_mse": mses,
    }


def random_policy_baseline(
    demo: DemoVideo,
    env_params: EnvParams | None = None,
    cfg: OracleConfig | None = None,
    n_episodes: int = 5,
    seed: int = 0,
    amp: float | None = None,
) -> dict:
    """evaluate_against_demo for the random policy (the comparison floor)."""
    policy = RandomPolicy() if amp is None else RandomPolicy(amp=amp)
    return evaluate_against_demo(
        policy, demo, env_params=env_params, cfg=cfg, n_episodes=n_episodes, seed=seed, greedy=False
    )

"""Similarity predictor: two-branch rating classifier over (frame, observation).

The visual branch embeds a demo frame (via pooled pixel features), the
standard branch embeds the agent's state+action vector; the head maps the
concatenated embeddings to 5 rating logits. Five training variants cover
the batching/weighting strategies compared in the experiments.

Training always consumes the dataset in a content-derived canonical order
before the seeded shuffle, so runs are invariant to storage order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import nets
from .nets import IDENTITY, RELU, DenseNet, SgdConfig
from .render import FEATURE_DIM, frame_features

N_CLASSES = 5
VISUAL_EMBED = 128
STANDARD_EMBED = 64


# Per-component scale for the state half of an observation.  Chosen so each
# feature is O(1) over on-task motion; the clip below then saturates far
# off-distribution states instead of letting a linear head extrapolate
# reward without bound in directions no annotation will ever cover.
_OBS_SCALE = np.array([3.0, 1.0, 3.0, 3.0, 3.0, 5.0, 0.3, 3.0])
_OBS_SHIFT = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0])
_OBS_CLIP = 5.0


def make_observations(states, actions) -> np.ndarray:
    """Batched bounded feature rows: scaled, clipped states then raw actions.

    Accepts (n, 8) states with (n, 2) actions and returns (n, 10).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    scaled = (states - _OBS_SHIFT) / _OBS_SCALE
    np.clip(scaled, -_OBS_CLIP, _OBS_CLIP, out=scaled)
    return np.concatenate([scaled, actions], axis=1)


def make_observation(state, action) -> np.ndarray:
    """Bounded feature vector for one (state, action) pair."""
    state = np.asarray(state, dtype=np.float64).ravel()
    action = np.asarray(action, dtype=np.float64).ravel()
    return make_observations(state[None, :], action[None, :])[0]


class TrainVariant(str, Enum):
    RandomSampling = "RandomSampling"
    SamplingEqually = "SamplingEqually"
    ClassWeights = "ClassWeights"
    EqualPlusWeights = "EqualPlusWeights"
    AdditionalLayer = "AdditionalLayer"

    @property
    def stratified(self) -> bool:
        return self in (TrainVariant.SamplingEqually, TrainVariant.EqualPlusWeights, TrainVariant.AdditionalLayer)

    @property
    def class_weighted(self) -> bool:
        return self in (TrainVariant.ClassWeights, TrainVariant.EqualPlusWeights)

    @property
    def extra_head_layer(self) -> bool:
        return self is TrainVariant.AdditionalLayer


@dataclass
class AnnotationSample:
    frame: np.ndarray  # (64, 64) uint8
    observation: np.ndarray  # (state_dim + action_dim,)
    rating: int

    def __post_init__(self):
        if not 1 <= int(self.rating) <= 5:
            raise ValueError(f"rating {self.rating} outside 1..5")
        self.rating = int(self.rating)
        self.observation = np.asarray(self.observation, dtype=np.float64)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(self.frame.tobytes())
        h.update(self.observation.tobytes())
        h.update(bytes([self.rating]))
        return h.digest()


@dataclass
class SimilarityPredictor:
    visual_branch: DenseNet
    standard_branch: DenseNet
    head: DenseNet
    variant: TrainVariant

    def __post_init__(self):
        if self.visual_branch.output_dim + self.standard_branch.output_dim != self.head.input_dim:
            raise ValueError("branch output dims must sum to head input dim")
        if self.head.output_dim != N_CLASSES:
            raise ValueError("head must have 5 outputs")

    @property
    def obs_dim(self) -> int:
        return self.standard_branch.input_dim

    def copy(self) -> "SimilarityPredictor":
        return SimilarityPredictor(
            self.visual_branch.copy(), self.standard_branch.copy(), self.head.copy(), self.variant
        )


def make_predictor(variant: TrainVariant, obs_dim: int, seed: int) -> SimilarityPredictor:
    visual = nets.make_dense_net([FEATURE_DIM, VISUAL_EMBED], [RELU], seed=seed * 3 + 1)
    standard = nets.make_dense_net([obs_dim, 64, STANDARD_EMBED], [RELU, RELU], seed=seed * 3 + 2)
    embed = VISUAL_EMBED + STANDARD_EMBED
    if variant.extra_head_layer:
        head = nets.make_dense_net([embed, 64, N_CLASSES], [RELU, IDENTITY], seed=seed * 3 + 3)
    else:
        head = nets.make_dense_net([embed, N_CLASSES], [IDENTITY], seed=seed * 3 + 3)
    return SimilarityPredictor(visual, standard, head, variant)


def predict_from_features(pred: SimilarityPredictor, features: np.ndarray, observations: np.ndarray) -> np.ndarray:
    """Rating distributions for batched (visual features, observation) pairs."""
    v, _ = nets.forward(pred.visual_branch, features)
    s, _ = nets.forward(pred.standard_branch, observations)
    logits, _ = nets.forward(pred.head, np.concatenate([v, s], axis=-1))
    return nets.softmax(logits)


def predict(pred: SimilarityPredictor, frame: np.ndarray, observation) -> np.ndarray:
    """5-class rating distribution for one (frame, observation) pair."""
    observation = np.asarray(observation, dtype=np.float64)
    if observation.shape != (pred.obs_dim,):
        raise ValueError(f"observation dim {observation.shape} != {(pred.obs_dim,)}")
    return predict_from_features(pred, frame_features(frame), observation)


def _check_distribution(dist) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (N_CLASSES,):
        raise ValueError("distribution must have 5 entries")
    if abs(float(dist.sum()) - 1.0) > 1e-6 or np.any(dist < -1e-12):
        raise ValueError("not a probability distribution")
    return dist


def expected_rating(dist) -> float:
    dist = _check_distribution(dist)
    return float(np.arange(1, N_CLASSES + 1) @ dist)


def reward_from_rating(dist) -> float:
    return (expected_rating(dist) - 1.0) / 4.0


def class_weights(dataset) -> np.ndarray:
    """w_c = N / (5 * N_c) per populated class; empty classes get weight 0."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    counts = np.zeros(N_CLASSES)
    for s in dataset:
        counts[s.rating - 1] += 1
    n = float(len(dataset))
    weights = np.zeros(N_CLASSES)
    nz = counts > 0
    weights[nz] = n / (N_CLASSES * counts[nz])
    return weights


def canonical_order(dataset) -> list:
    """Content-derived permutation making training storage-order invariant."""
    return sorted(range(len(dataset)), key=lambda i: dataset[i].digest())


def make_batches(dataset, variant: TrainVariant, batch_size: int, seed: int) -> list:
    """Index batches for one epoch under the variant's sampling scheme."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if variant.stratified and batch_size < N_CLASSES:
        raise ValueError("stratified variants need batch_size >= 5")
    order = canonical_order(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFF, 0xBA7C4]))
    n_batches = max(1, n // batch_size)

    if not variant.stratified:
        perm = [order[i] for i in rng.permutation(n)]
        if n <= batch_size:
            return [perm]
        return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]

    by_class = {c: [i for i in order if dataset[i].rating == c] for c in range(1, N_CLASSES + 1)}
    present = [c for c in range(1, N_CLASSES + 1) if by_class[c]]
    base = batch_size // N_CLASSES
    quotas = {c: base for c in present}
    remainder = batch_size - base * len(present)
    for k in range(remainder):
        quotas[present[k % len(present)]] += 1

    pools = {c: list(rng.permutation(by_class[c])) for c in present}
    batches = []
    for _ in range(n_batches):
        batch = []
        for c in present:
            need = quotas[c]
            if len(by_class[c]) < need:
                # class smaller than its quota: sample with replacement
                picks = rng.choice(by_class[c], size=need, replace=True)
                batch.extend(int(i) for i in picks)
                continue
            while need > 0:
                if not pools[c]:
                    pools[c] = list(rng.permutation(by_class[c]))
                take = min(need, len(pools[c]))
                batch.extend(int(pools[c].pop()) for _ in range(take))
                need -= take
        batches.append(batch)
    return batches


@dataclass
class EvalMetrics:
    accuracy: float
    f1_345: float
    f1_45: float
    abs_error_hist: np.ndarray  # counts of |predicted - true| in 0..4

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1_345": self.f1_345,
            "f1_45": self.f1_45,
            "abs_error_hist": [int(c) for c in self.abs_error_hist],
        }


def _merged_f1(true: np.ndarray, pred: np.ndarray, positive: set) -> float:
    tp = int(np.sum([(t in positive) and (p in positive) for t, p in zip(true, pred)]))
    fp = int(np.sum([(t not in positive) and (p in positive) for t, p in zip(true, pred)]))
    fn = int(np.sum([(t in positive) and (p not in positive) for t, p in zip(true, pred)]))
    if tp + fn == 0:
        # no actual positives: perfect score iff nothing was predicted positive
        return 1.0 if fp == 0 else 0.0
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _dataset_arrays(dataset):
    feats = np.stack([frame_features(s.frame) for s in dataset])
    obs = np.stack([s.observation for s in dataset])
    labels = np.array([s.rating for s in dataset], dtype=np.int64)
    return feats, obs, labels


def metrics_from_predictions(labels, predicted) -> EvalMetrics:
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    accuracy = float((predicted == labels).mean())
    hist = np.bincount(np.abs(predicted - labels), minlength=N_CLASSES)[:N_CLASSES]
    return EvalMetrics(
        accuracy=accuracy,
        f1_345=_merged_f1(labels, predicted, {3, 4, 5}),
        f1_45=_merged_f1(labels, predicted, {4, 5}),
        abs_error_hist=hist,
    )


def evaluate(pred: SimilarityPredictor, dataset) -> EvalMetrics:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    feats, obs, labels = _dataset_arrays(dataset)
    probs = predict_from_features(pred, feats, obs)
    return metrics_from_predictions(labels, probs.argmax(axis=1) + 1)


def _train_batch(pred: SimilarityPredictor, feats, obs, labels, weights, cfg: SgdConfig):
    """One SGD step on a batch; loss = (1/B) sum_i w_i * CE_i."""
    B = len(labels)
    v_out, v_cache = nets.forward(pred.visual_branch, feats)
    s_out, s_cache = nets.forward(pred.standard_branch, obs)
    h_in = np.concatenate([v_out, s_out], axis=1)
    logits, h_cache = nets.forward(pred.head, h_in)
    losses, dlogits = nets.batched_cross_entropy(logits, labels, weights)
    dlogits = dlogits / B
    h_grads, dh_in = nets.backward(pred.head, h_cache, dlogits, with_input_grad=True)
    v_grads = nets.backward(pred.visual_branch, v_cache, dh_in[:, :VISUAL_EMBED])
    s_grads = nets.backward(pred.standard_branch, s_cache, dh_in[:, VISUAL_EMBED:])
    pred.head = nets.sgd_step(pred.head, h_grads, cfg)
    pred.visual_branch = nets.sgd_step(pred.visual_branch, v_grads, cfg)
    pred.standard_branch = nets.sgd_step(pred.standard_branch, s_grads, cfg)
    return float(losses.mean())


def _sample_weights(variant: TrainVariant, dataset, labels: np.ndarray) -> np.ndarray:
    if variant.class_weighted:
        cw = class_weights(dataset)
        return cw[labels - 1]
    return np.ones(len(labels))


def train(
    pred: SimilarityPredictor,
    train_set,
    val_set,
    variant: TrainVariant,
    sgd_config: SgdConfig,
    epochs: int,
    seed: int,
):
    """Variant-specific training; returns best-validation-accuracy parameters.

    Ties keep the earlier snapshot, so more epochs never silently swap in a
    later equal-accuracy model.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    train_digests = {s.digest() for s in train_set}
    if any(s.digest() in train_digests for s in val_set):
        raise ValueError("train and validation sets overlap")
    pred = pred.copy()
    if epochs == 0 or len(train_set) == 0:
        return pred, []
    feats, obs, labels = _dataset_arrays(train_set)
    weights = _sample_weights(variant, train_set, labels)
    # Selection runs over trained snapshots only. On heavily skewed data the
    # untrained net can match majority-class accuracy, and letting it compete
    # would pin the result at initialization; a trained tie is always the
    # more informative model.
    best = None
    best_acc = -1.0
    history = []
    for epoch in range(epochs):
        batches = make_batches(train_set, variant, sgd_config.batch_size, seed=seed * 100003 + epoch)
        losses = [
            _train_batch(pred, feats[idx], obs[idx], labels[idx], weights[idx], sgd_config)
            for idx in (np.array(b) for b in batches)
        ]
        metrics = evaluate(pred, val_set) if len(val_set) else None
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_accuracy": metrics.accuracy if metrics else None,
            }
        )
        if metrics and metrics.accuracy > best_acc:
            best_acc = metrics.accuracy
            best = pred.copy()
    return (best if best is not None else pred), history


def fine_tune(pred: SimilarityPredictor, new_samples, sgd_config: SgdConfig, epochs: int, seed: int):
    """Continue training all parameters at 0.1x the configured learning rate."""
    if len(new_samples) == 0:
        raise ValueError("fine_tune needs a non-empty sample set")
    if new_samples[0].observation.shape != (pred.obs_dim,):
        raise ValueError("observation dimension mismatch with predictor")
    pred = pred.copy()
    if epochs == 0:
        return pred
    cfg = SgdConfig(learning_rate=sgd_config.learning_rate * 0.1, batch_size=sgd_config.batch_size)
    feats, obs, labels = _dataset_arrays(new_samples)
    weights = _sample_weights(pred.variant, new_samples, labels)
    for epoch in range(epochs):
        batches = make_batches(new_samples, pred.variant, cfg.batch_size, seed=seed * 100003 + epoch)
        for b in batches:
            idx = np.array(b)
            _train_batch(pred, feats[idx], obs[idx], labels[idx], weights[idx], cfg)
    return pred


def save_predictor(pred: SimilarityPredictor, dir_path: str) -> None:
    os.makedirs(dir_path, exist_ok=True)
    nets.save_net(pred.visual_branch, os.path.join(dir_path, "visual.vnn"))
    nets.save_net(pred.standard_branch, os.path.join(dir_path, "standard.vnn"))
    nets.save_net(pred.head, os.path.join(dir_path, "head.vnn"))
    manifest = {
        "variant": pred.variant.value,
        "obs_dim": pred.obs_dim,
        "visual_embed": VISUAL_EMBED,
        "standard_embed": STANDARD_EMBED,
    }
    tmp = os.path.join(dir_path, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=0)
    os.replace(tmp, os.path.join(dir_path, "manifest.json"))


def load_predictor(dir_path: str) -> SimilarityPredictor:
    manifest_path = os.path.join(dir_path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"missing predictor manifest: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    return SimilarityPredictor(
        visual_branch=nets.load_net(os.path.join(dir_path, "visual.vnn")),
        standard_branch=nets.load_net(os.path.join(dir_path, "standard.vnn")),
        head=nets.load_net(os.path.join(dir_path, "head.vnn")),
        variant=TrainVariant(manifest["variant"]),
    )

"""
Black-box membership inference: shadow models, four summary features per image,
a logistic-regression attack and the Mann-Whitney AUC.

The attack only ever sees eval-mode probability maps of the model under attack.
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from . import rng
from .config import TrainConfig
from .errors import UsageError
from .fl_engine import run_local_sgd
from .segmentation_model import ModelConfig, ParamSet, binarize, build_model, dice, predict
from .synth_data import Federation, SampleArrays, SliceSample, stack
from .tensor_core import PROB_CLAMP, pixel_bce

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("bce_loss", "entropy", "max_confidence", "dice")
ATTACK_LR = 0.1
ATTACK_ITERATIONS = 500
MIN_CLASS_SIZE = 20
ZERO_VARIANCE = 1e-12


@dataclass(frozen=True)
class AttackFeatures:
    bce_loss: float
    entropy: float
    max_confidence: float
    dice: float

    def as_array(self) -> np.ndarray:
        return np.array([self.bce_loss, self.entropy, self.max_confidence, self.dice], dtype=np.float64)


def features_from_probs(probs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """[N, 4] feature matrix from probability maps and ground-truth masks."""
    n = len(probs)
    p = np.clip(probs.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = pixel_bce(probs, masks).reshape(n, -1).mean(axis=1)
    entropy = (-(p * np.log(p) + (1.0 - p) * np.log1p(-p))).reshape(n, -1).mean(axis=1)
    raw = probs.astype(np.float64)
    confidence = np.maximum(raw, 1.0 - raw).reshape(n, -1).mean(axis=1)
    preds = binarize(probs)
    dices = np.array([dice(a, b) for a, b in zip(preds, masks)], dtype=np.float64)
    return np.stack([loss, entropy, confidence, dices], axis=1)


def extract_feature_matrix(model: ParamSet, samples: SampleArrays, batch_size: int = 64) -> np.ndarray:
    return features_from_probs(predict(model, samples.images, batch_size=batch_size), samples.masks)


def extract_features(model: ParamSet, sample: Union[SliceSample, SampleArrays]) -> AttackFeatures:
    arrays = stack([sample]) if isinstance(sample, SliceSample) else sample
    if len(arrays) != 1:
        raise UsageError(f"extract_features takes one sample, got {len(arrays)}")
    return AttackFeatures(*extract_feature_matrix(model, arrays)[0])


def auc_from_scores(member_scores: Sequence[float], nonmember_scores: Sequence[float]) -> float:
    """Probability a random member outscores a random non-member; ties count one half."""
    m = np.asarray(member_scores, dtype=np.float64).reshape(-1)
    n = np.asarray(nonmember_scores, dtype=np.float64).reshape(-1)
    if m.size == 0 or n.size == 0:
        raise UsageError(f"AUC needs both classes, got {m.size} members and {n.size} non-members")
    ranks = rankdata(np.concatenate([m, n]))
    u = ranks[: m.size].sum() - m.size * (m.size + 1) / 2.0
    return float(u / (m.size * n.size))


@dataclass(frozen=True)
class AttackModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    # features with zero variance on shadow data keep weight 0
    active: np.ndarray
    shadow_seed: int = 0
    iterations: int = ATTACK_ITERATIONS

    def standardize(self, features: np.ndarray) -> np.ndarray:
        safe = np.where(self.active, self.std, 1.0)
        return np.where(self.active, (features - self.mean) / safe, 0.0)

    def score(self, features: np.ndarray) -> np.ndarray:
        return expit(self.standardize(np.atleast_2d(features)) @ self.weights + self.bias)

    def items(self) -> List[Tuple[str, str]]:
        out = [(f"weight.{name}", repr(float(w))) for name, w in zip(FEATURE_NAMES, self.weights)]
        out.append(("bias", repr(float(self.bias))))
        out += [(f"mean.{name}", repr(float(v))) for name, v in zip(FEATURE_NAMES, self.mean)]
        out += [(f"std.{name}", repr(float(v))) for name, v in zip(FEATURE_NAMES, self.std)]
        out += [("shadow_seed", str(self.shadow_seed)), ("iterations", str(self.iterations))]
        return out


def fit_attack(
    member_features: np.ndarray,
    nonmember_features: np.ndarray,
    lr: float = ATTACK_LR,
    iterations: int = ATTACK_ITERATIONS,
    shadow_seed: int = 0,
) -> AttackModel:
    """Full-batch gradient descent on the logistic loss, members labelled 1."""
    if len(member_features) < MIN_CLASS_SIZE or len(nonmember_features) < MIN_CLASS_SIZE:
        raise UsageError(
            f"attack training needs at least {MIN_CLASS_SIZE} samples per class, "
            f"got {len(member_features)} and {len(nonmember_features)}"
        )
    x = np.vstack([member_features, nonmember_features]).astype(np.float64)
    y = np.concatenate([np.ones(len(member_features)), np.zeros(len(nonmember_features))])
    mean, std = x.mean(axis=0), x.std(axis=0)
    active = std > ZERO_VARIANCE
    z = np.where(active, (x - mean) / np.where(active, std, 1.0), 0.0)
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(iterations):
        err = expit(z @ w + b) - y
        w -= lr * (z.T @ err / len(y)) * active
        b -= lr * float(err.mean())
    return AttackModel(w, b, mean, std, active, shadow_seed, iterations)


def train_shadow(
    members: SampleArrays,
    cfg: TrainConfig,
    seed: int,
    model_config: ModelConfig,
    index: int = 0,
) -> ParamSet:
    """Same architecture trained centrally on the shadow members for R rounds of E epochs."""
    params = build_model(model_config, rng.derive_seed(seed, "shadow-init", index))
    stream = rng.stream(seed, "shadow-train", index)
    velocity = None
    for r in range(1, cfg.rounds + 1):
        params, velocity = run_local_sgd(params, members, cfg, stream, r, velocity=velocity)
    return params


def train_attack(
    shadow_models: Union[ParamSet, Sequence[ParamSet]],
    shadow_members: SampleArrays,
    shadow_nonmembers: SampleArrays,
    shadow_seed: int = 0,
) -> AttackModel:
    models = [shadow_models] if isinstance(shadow_models, ParamSet) else list(shadow_models)
    xm = np.vstack([extract_feature_matrix(m, shadow_members) for m in models])
    xn = np.vstack([extract_feature_matrix(m, shadow_nonmembers) for m in models])
    attack = fit_attack(xm, xn, shadow_seed=shadow_seed)
    shadow_auc = auc_from_scores(attack.score(xm), attack.score(xn))
    logger.info(f"Attack trained on {len(models)} shadow model(s): shadow-set AUC {shadow_auc:.3f}")
    return attack


def attack_auc(attack: AttackModel, target_model: ParamSet, members: SampleArrays, nonmembers: SampleArrays) -> float:
    if len(members) == 0 or len(nonmembers) == 0:
        raise UsageError("attack_auc needs members and non-members")
    return auc_from_scores(
        attack.score(extract_feature_matrix(target_model, members)),
        attack.score(extract_feature_matrix(target_model, nonmembers)),
    )


def sample_targets(federation: Federation, count: int, seed: int) -> Tuple[SampleArrays, SampleArrays]:
    """Members drawn uniformly from the clients' training splits, non-members from their validation splits."""
    train = SampleArrays.concat([c.train for c in federation.clients])
    val = SampleArrays.concat([c.val for c in federation.clients])
    stream = rng.stream(seed, "mia-targets")
    n_members = min(count, len(train))
    n_nonmembers = min(count, len(val))
    members = np.sort(stream.choice(len(train), size=n_members, replace=False))
    nonmembers = np.sort(stream.choice(len(val), size=n_nonmembers, replace=False))
    return train.subset(members), val.subset(nonmembers)


@dataclass
class MiaTracker:
    """Scores the attack against model snapshots every ``cadence`` rounds and at the final round."""

    attack: AttackModel
    members: SampleArrays
    nonmembers: SampleArrays
    cadence: int = 1
    final_round: Optional[int] = None
    series: List[Tuple[int, float]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def due(self, round_index: int) -> bool:
        if self.cadence <= 0:
            return False
        return round_index % self.cadence == 0 or round_index == self.final_round

    def observe(self, round_index: int, models: Union[ParamSet, Sequence[ParamSet]]) -> Optional[float]:
        if not self.due(round_index):
            return None
        models = [models] if isinstance(models, ParamSet) else list(models)
        auc = float(np.mean([attack_auc(self.attack, m, self.members, self.nonmembers) for m in models]))
        self.record(round_index, auc)
        return auc

    def record(self, round_index: int, auc: float):
        with self._lock:
            if self.series and round_index <= self.series[-1][0]:
                raise UsageError(f"AUC for round {round_index} recorded after round {self.series[-1][0]}")
            self.series.append((round_index, auc))

    def fork(self) -> "MiaTracker":
        """Same attack and targets, empty series; one per independently trained model."""
        return MiaTracker(self.attack, self.members, self.nonmembers, cadence=self.cadence, final_round=self.final_round)

    @classmethod
    def build(
        cls,
        federation: Federation,
        cfg: TrainConfig,
        seed: int,
        model_config: ModelConfig,
        samples: int,
        cadence: int = 1,
        shadow_models: int = 1,
    ) -> "MiaTracker":
        shadows = [
            train_shadow(federation.shadow_members, cfg, seed, model_config, index=i) for i in range(shadow_models)
        ]
        attack = train_attack(shadows, federation.shadow_members, federation.shadow_nonmembers, shadow_seed=seed)
        members, nonmembers = sample_targets(federation, samples, seed)
        return cls(attack, members, nonmembers, cadence=cadence, final_round=cfg.rounds)

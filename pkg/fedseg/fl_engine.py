"""
Federated rounds and the two non-federated baselines.

A round broadcasts the global ParamSet, lets every client train locally (in parallel on
the worker pool), collects deltas over the method's aggregation segments, sums them
through masked fixed point and applies the sample-weighted average. Every random draw
comes from a stream named by (seed, purpose, round, client), so results do not depend
on thread scheduling.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import rng
from .config import TrainConfig
from .dp_mechanism import DpConfig, privatize
from .errors import NumericError, ProtocolError, UsageError
from .methods import MethodProfile, get_method
from .metrics_io import ExperimentHistory, RoundRecord, evaluate
from .secure_aggregation import PairSeeds, pairwise_seeds, secure_aggregate
from .segmentation_model import (
    ModelConfig,
    ParamSet,
    TRAINABLE_KINDS,
    build_model,
    loss_and_grad,
    recalibrate_bn,
)
from .synth_data import ClientData, Federation, SampleArrays
from .task_processor import ClientWorkerPool

logger = logging.getLogger(__name__)

__all__ = [
    "RoundUpdate",
    "FederatedClient",
    "FederatedResult",
    "LocalOnlyResult",
    "aggregate",
    "aggregation_mask",
    "local_train",
    "run_federated",
    "run_local_sgd",
    "train_centralized",
    "train_local_only",
    "weighted_delta",
]

RECALIBRATION_BATCHES = 2


@dataclass(frozen=True, eq=False)
class RoundUpdate:
    client_id: int
    delta: np.ndarray
    n_samples: int
    # positions of ``delta`` inside the full parameter vector
    agg_mask: np.ndarray = field(repr=False)
    bn_mask: np.ndarray = field(repr=False)

    @property
    def bn_payload(self) -> Optional[np.ndarray]:
        """BN part of the delta; ``None`` when BN stays on the client."""
        carried = self.bn_mask[self.agg_mask]
        if not carried.any():
            return None
        return self.delta[carried]


def aggregation_mask(params: ParamSet, profile: MethodProfile) -> np.ndarray:
    if profile.aggregates_bn:
        return np.ones(params.size, dtype=bool)
    return ~params.bn_mask


# local training --------------------------------------------------------------------


def run_local_sgd(
    start: ParamSet,
    data: SampleArrays,
    cfg: TrainConfig,
    stream: np.random.Generator,
    round_index: int,
    epochs: Optional[int] = None,
    client_id: int = 0,
    anchor: Optional[ParamSet] = None,
    velocity: Optional[np.ndarray] = None,
) -> Tuple[ParamSet, np.ndarray]:
    """Mini-batch SGD with momentum, L2 weight decay and an optional proximal pull.

    Returns the trained ParamSet (with updated BN running statistics) and the momentum
    buffer, so pooled training can carry it across rounds.
    """
    if len(data) == 0:
        raise UsageError(f"client {client_id} has no training data")
    epochs = cfg.local_epochs if epochs is None else epochs
    lr = cfg.lr_at(round_index)
    trainable = start.kind_mask(TRAINABLE_KINDS)
    running = ~trainable
    w = start.values.copy()
    v = np.zeros_like(w) if velocity is None else velocity.copy()
    mu = cfg.prox_mu if anchor is not None else 0.0
    n = len(data)

    for epoch in range(epochs):
        order = stream.permutation(n)
        for batch, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            params = start.with_values(w)
            try:
                loss, grad, after = loss_and_grad(params, data.images[idx], data.masks[idx])
            except NumericError as exc:
                logger.error(f"Round {round_index} client {client_id} batch {batch}: {exc}")
                raise NumericError(f"round {round_index}, client {client_id}, epoch {epoch}, batch {batch}: {exc}") from exc
            if cfg.weight_decay:
                grad = grad + np.float32(cfg.weight_decay) * w * trainable
            if mu:
                grad = grad + np.float32(mu) * (w - anchor.values) * trainable
            v = np.float32(cfg.momentum) * v + grad
            w = w - np.float32(lr) * v
            w[running] = after.values[running]
    return start.with_values(w), v


def local_train(
    global_params: ParamSet,
    client_data: SampleArrays,
    cfg: TrainConfig,
    stream: np.random.Generator,
    round_index: int = 1,
    client_id: int = 0,
    start: Optional[ParamSet] = None,
) -> RoundUpdate:
    """One round of local training from ``start`` (default: the global model) as a delta message."""
    profile = get_method(cfg.method)
    start = start or global_params
    anchor = start if profile.uses_prox else None
    trained, _ = run_local_sgd(start, client_data, cfg, stream, round_index, client_id=client_id, anchor=anchor)
    return _make_update(client_id, trained, global_params, len(client_data), profile)


def _make_update(
    client_id: int,
    trained: ParamSet,
    global_params: ParamSet,
    n_samples: int,
    profile: MethodProfile,
) -> RoundUpdate:
    agg = aggregation_mask(global_params, profile)
    delta = (trained.values - global_params.values)[agg]
    return RoundUpdate(client_id, delta, n_samples, agg, global_params.bn_mask)


# aggregation -----------------------------------------------------------------------


def _weights(updates: Sequence[RoundUpdate]) -> Dict[int, float]:
    total = sum(u.n_samples for u in updates)
    if total <= 0:
        return {u.client_id: 1.0 / len(updates) for u in updates}
    return {u.client_id: u.n_samples / total for u in updates}


def _check_layout(updates: Sequence[RoundUpdate], length: Optional[int] = None):
    if not updates:
        raise ProtocolError("aggregation needs at least one update")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in {ids}")
    expected = updates[0].delta.shape if length is None else (length,)
    for u in updates:
        if u.delta.shape != expected:
            raise ProtocolError(f"client {u.client_id} sent a delta of shape {u.delta.shape}, expected {expected}")


def weighted_delta(updates: Sequence[RoundUpdate], pair_seeds: Optional[PairSeeds] = None) -> np.ndarray:
    """``sum_k n_k/N * delta_k`` in float64, summed in client-id order.

    With ``pair_seeds`` and at least two clients the sum goes through masked fixed point.
    """
    _check_layout(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    weights = _weights(ordered)
    if pair_seeds is not None and len(ordered) >= 2:
        return secure_aggregate(
            {u.client_id: u.delta for u in ordered},
            pair_seeds,
            weights=weights,
            n_samples={u.client_id: u.n_samples for u in ordered},
        )
    total = np.zeros(ordered[0].delta.shape, dtype=np.float64)
    for u in ordered:
        total += weights[u.client_id] * u.delta.astype(np.float64)
    return total


def aggregate(
    updates: Sequence[RoundUpdate],
    global_params: ParamSet,
    method: Union[str, MethodProfile],
    pair_seeds: Optional[PairSeeds] = None,
) -> ParamSet:
    """New global model ``w + sum_k n_k/N * delta_k`` over the method's aggregation segments."""
    profile = get_method(method) if isinstance(method, str) else method
    agg = aggregation_mask(global_params, profile)
    _check_layout(updates, int(agg.sum()))
    values = global_params.values.astype(np.float64)
    values[agg] += weighted_delta(updates, pair_seeds)
    var = global_params.kind_mask({"bn_running_var"})
    values[var] = np.maximum(values[var], 0.0)
    return global_params.with_values(values.astype(np.float32))


# clients ---------------------------------------------------------------------------


class FederatedClient:
    """Holds one client's data and, under FedBN, its private BN segments between rounds."""

    def __init__(
        self,
        data: ClientData,
        cfg: TrainConfig,
        seed: int,
        dp: Optional[DpConfig] = None,
    ):
        self.client_id = data.client_id
        self.data = data
        self.cfg = cfg
        self.seed = seed
        self.profile = get_method(cfg.method)
        self.dp = dp if self.profile.uses_dp else None
        self.bn_state: Optional[np.ndarray] = None
        self.last_update_norm: Optional[float] = None

    def start_params(self, global_params: ParamSet) -> ParamSet:
        if self.profile.aggregates_bn or self.bn_state is None:
            start = global_params
        else:
            start = global_params.merged(self.bn_state, global_params.bn_mask)
        if not self.profile.aggregates_bn and self.cfg.bn_reset:
            values = start.values.copy()
            values[start.kind_mask({"bn_running_mean"})] = 0.0
            values[start.kind_mask({"bn_running_var"})] = 1.0
            start = start.with_values(values)
        return start

    def personalized(self, global_params: ParamSet) -> ParamSet:
        if self.bn_state is None:
            return global_params
        return global_params.merged(self.bn_state, global_params.bn_mask)

    def train_round(self, global_params: ParamSet, round_index: int) -> RoundUpdate:
        start = self.start_params(global_params)
        stream = rng.stream(self.seed, "local-train", round_index, self.client_id)
        anchor = start if self.profile.uses_prox else None
        trained, _ = run_local_sgd(
            start, self.data.train, self.cfg, stream, round_index, client_id=self.client_id, anchor=anchor
        )
        if not self.profile.aggregates_bn:
            self.bn_state = trained.values.copy()
        update = _make_update(self.client_id, trained, global_params, len(self.data.train), self.profile)
        if self.dp is not None:
            noise = rng.stream(self.seed, "dp-noise", round_index, self.client_id)
            private = privatize(update.delta, self.dp, noise)
            self.last_update_norm = float(np.linalg.norm(private.astype(np.float64)))
            update = RoundUpdate(self.client_id, private, update.n_samples, update.agg_mask, update.bn_mask)
        return update


# federated runs --------------------------------------------------------------------


@dataclass
class FederatedResult:
    history: ExperimentHistory
    params: ParamSet
    clients: List[FederatedClient]


def evaluation_models(
    global_params: ParamSet,
    clients: Sequence[FederatedClient],
    cfg: TrainConfig,
    test: SampleArrays,
) -> List[ParamSet]:
    """Models the server scores after a round; FedBN uses recalibrated or per-client BN."""
    profile = get_method(cfg.method)
    if profile.aggregates_bn:
        return [global_params]
    if cfg.fedbn_eval == "client_mean":
        return [c.personalized(global_params) for c in clients]
    bs = cfg.batch_size
    batches = [test.images[i * bs:(i + 1) * bs] for i in range(RECALIBRATION_BATCHES) if i * bs < len(test)]
    return [recalibrate_bn(global_params, batches)]


def _score(models: Sequence[ParamSet], test: SampleArrays, tracker, round_index: int) -> Tuple[float, float, Optional[float]]:
    scores = [evaluate(m, test) for m in models]
    dice = float(np.mean([s[0] for s in scores]))
    ce = float(np.mean([s[1] for s in scores]))
    auc = tracker.observe(round_index, models) if tracker is not None else None
    return dice, ce, auc


def run_federated(
    federation: Federation,
    cfg: TrainConfig,
    seed: int,
    model_config: ModelConfig,
    dp: Optional[DpConfig] = None,
    tracker=None,
    pool: Optional[ClientWorkerPool] = None,
    secure: bool = True,
) -> FederatedResult:
    """R rounds over every client; evaluates the global model on the test set after each."""
    profile = get_method(cfg.method)
    if not profile.federated:
        raise UsageError(f"{cfg.method} is not a federated method")
    if profile.uses_dp and dp is None:
        raise UsageError(f"{cfg.method} needs a DpConfig")
    global_params = build_model(model_config, seed)
    clients = [FederatedClient(data, cfg, seed, dp) for data in federation.clients]
    by_id = {c.client_id: c for c in clients}
    history = ExperimentHistory(cfg.method, seed)
    own_pool = pool is None
    pool = pool or ClientWorkerPool()
    try:
        for r in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            current = global_params
            updates = pool.map_clients(f"{cfg.method}-round-{r}", by_id, lambda cid: by_id[cid].train_round(current, r))
            seeds = pairwise_seeds(seed, r, by_id) if secure else None
            global_params = aggregate(updates, global_params, profile, seeds)
            models = evaluation_models(global_params, clients, cfg, federation.test)
            dice, ce, auc = _score(models, federation.test, tracker, r)
            wall_ms = (time.perf_counter() - started) * 1000.0
            history.append(RoundRecord(r, dice, ce, auc, wall_ms))
            auc_text = f", AUC {auc:.3f}" if auc is not None else ""
            logger.info(f"{cfg.method} seed {seed} round {r}/{cfg.rounds}: Dice {dice:.4f}, CE {ce:.4f}{auc_text}")
            if profile.uses_dp:
                norms = [c.last_update_norm for c in clients]
                logger.debug(f"{cfg.method} round {r}: noised update norms {norms}")
            if logger.isEnabledFor(logging.INFO):
                val = {
                    c.client_id: evaluate(c.personalized(global_params), c.data.val)[0]
                    for c in clients
                    if len(c.data.val)
                }
                logger.info(
                    f"{cfg.method} round {r} client validation Dice: "
                    + ", ".join(f"{cid}={d:.3f}" for cid, d in val.items())
                )
    finally:
        if own_pool:
            pool.stop_workers()
    return FederatedResult(history, global_params, clients)


# pooled baselines ------------------------------------------------------------------


def _train_pooled(
    data: SampleArrays,
    cfg: TrainConfig,
    seed: int,
    model_config: ModelConfig,
    stream_key: str,
    epochs_per_round: int,
    test: SampleArrays,
    tracker,
    label: str,
) -> Tuple[ExperimentHistory, ParamSet]:
    """Single model, momentum carried across epochs, evaluated every ``epochs_per_round`` epochs."""
    params = build_model(model_config, seed)
    stream = rng.stream(seed, "pooled-train", stream_key)
    history = ExperimentHistory(cfg.method, seed)
    velocity = None
    for r in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        params, velocity = run_local_sgd(params, data, cfg, stream, r, epochs=epochs_per_round, velocity=velocity)
        dice, ce, auc = _score([params], test, tracker, r)
        history.append(RoundRecord(r, dice, ce, auc, (time.perf_counter() - started) * 1000.0))
        logger.info(f"{label} seed {seed} round {r}/{cfg.rounds}: Dice {dice:.4f}, CE {ce:.4f}")
    return history, params


def _key(client_ids: Sequence[int]) -> str:
    return "-".join(str(c) for c in sorted(client_ids))


def train_centralized(
    federation: Federation,
    cfg: TrainConfig,
    seed: int,
    model_config: ModelConfig,
    tracker=None,
) -> FederatedResult:
    """Pools every client's training split; one round equals E epochs per client in the federation."""
    pooled = SampleArrays.concat([c.train for c in federation.clients])
    epochs_per_round = cfg.local_epochs * len(federation.clients)
    logger.info(
        f"centralized: {len(pooled)} pooled slices, {epochs_per_round * cfg.rounds} epochs, "
        f"evaluated every {epochs_per_round}"
    )
    history, params = _train_pooled(
        pooled, cfg, seed, model_config, _key(federation.client_ids), epochs_per_round, federation.test, tracker, "centralized"
    )
    return FederatedResult(history, params, [])


@dataclass
class LocalOnlyResult:
    per_client: Dict[int, ExperimentHistory]
    params: Dict[int, ParamSet]
    history: ExperimentHistory


def mean_history(method: str, seed: int, histories: Mapping[int, ExperimentHistory]) -> ExperimentHistory:
    """Round-wise mean over clients; wall time is the sum."""
    out = ExperimentHistory(method, seed)
    parts = [histories[k] for k in sorted(histories)]
    for records in zip(*(h.records for h in parts)):
        aucs = [r.mia_auc for r in records]
        out.append(
            RoundRecord(
                round=records[0].round,
                dice=float(np.mean([r.dice for r in records])),
                ce_loss=float(np.mean([r.ce_loss for r in records])),
                mia_auc=float(np.mean(aucs)) if all(a is not None for a in aucs) else None,
                wall_ms=float(sum(r.wall_ms for r in records)),
            )
        )
    return out


def train_local_only(
    federation: Federation,
    cfg: TrainConfig,
    seed: int,
    model_config: ModelConfig,
    tracker=None,
    pool: Optional[ClientWorkerPool] = None,
) -> LocalOnlyResult:
    """Each client trains alone for R*E epochs; per-client histories plus their mean.

    Every client scores the attack on its own fork of ``tracker``; the shared series gets
    one entry per evaluated round, the mean over clients in client-id order.
    """
    by_id = {c.client_id: c for c in federation.clients}
    forks = {cid: tracker.fork() for cid in by_id} if tracker is not None else {}

    def train(cid: int):
        return _train_pooled(
            by_id[cid].train, cfg, seed, model_config, _key([cid]), cfg.local_epochs, federation.test, forks.get(cid),
            f"local_only client {cid}",
        )

    own_pool = pool is None
    pool = pool or ClientWorkerPool()
    try:
        results = pool.map_clients("local-only", by_id, train)
    finally:
        if own_pool:
            pool.stop_workers()
    ids = sorted(by_id)
    per_client = {cid: res[0] for cid, res in zip(ids, results)}
    params = {cid: res[1] for cid, res in zip(ids, results)}
    if tracker is not None and ids:
        per_round = [dict(forks[cid].series) for cid in ids]
        for r in sorted(per_round[0]):
            tracker.record(r, float(np.mean([aucs[r] for aucs in per_round])))
    for cid, h in per_client.items():
        if h.final is not None:
            logger.info(f"local_only seed {seed} client {cid}: final Dice {h.final.dice:.4f}")
    return LocalOnlyResult(per_client, params, mean_history(cfg.method, seed, per_client))

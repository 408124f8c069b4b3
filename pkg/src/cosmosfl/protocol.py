"""Round orchestration: pre-training and clustering, then iterative fine-tuning.

Clients and server exchange nothing but pseudo-label matrices over the
public pool. Every matrix crosses the boundary as an encoded message so
the communication ledger counts real bytes.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import streams
from .clustering import (
    ClusterAssignment,
    Calibration,
    calibrate_b0,
    cluster_diameter,
    distance_matrix,
    greedy_cluster,
)
from .data import Dataset, Partition
from .errors import ParameterError, ValidationError
from .metrics import ClientRecord, RoundMetrics, err, lemma1_check, model_err, support_mask
from .models import (
    DEFAULT_LR_HARD,
    DEFAULT_LR_SOFT,
    Predictor,
    RegConfig,
    build_model,
    check_simplex,
    predict_pseudolabels,
    rescale_probs,
)

logger = logging.getLogger(__name__)

MAGIC = b"CPLM"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
HEADER_BYTES = _HEADER.size  # 14
MB = 2**20

AGGREGATION_RULES = ("mean", "median", "max")


# -- wire format ---------------------------------------------------------

def encode_message(probs: np.ndarray) -> bytes:
    probs = check_simplex(probs)
    n, m = probs.shape
    return _HEADER.pack(MAGIC, VERSION, n, m) + np.asarray(probs, dtype="<f4").tobytes()


def decode_message(blob: bytes) -> np.ndarray:
    if len(blob) < HEADER_BYTES:
        raise ValidationError("message shorter than its header")
    magic, version, n, m = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValidationError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValidationError(f"unsupported message version {version}")
    if len(blob) != HEADER_BYTES + 4 * n * m:
        raise ValidationError(f"payload length {len(blob) - HEADER_BYTES} != {4 * n * m}")
    probs = np.frombuffer(blob, dtype="<f4", offset=HEADER_BYTES).astype(np.float64).reshape(n, m)
    # float32 rounding moves row sums by at most ~m * 2^-24
    check_simplex(probs, tol=max(1e-6, m * 2.0**-22))
    return probs / probs.sum(axis=1, keepdims=True)


def comm_bytes(n: int, m: int, precision_bytes: int = 4) -> int:
    """Payload bytes of one pseudo-label message."""
    if n < 1 or m < 1:
        raise ParameterError("n and M must be >= 1")
    return n * m * precision_bytes


def message_bytes(n: int, m: int) -> int:
    return HEADER_BYTES + comm_bytes(n, m)


def to_mb(num_bytes: int) -> float:
    return num_bytes / MB


@dataclass
class CommLedger:
    """Bytes moved per (round, client) in each direction."""

    uplink: dict[tuple[int, int], int] = field(default_factory=dict)
    downlink: dict[tuple[int, int], int] = field(default_factory=dict)
    messages: int = 0

    def record(self, direction: str, round_: int, client: int, blob: bytes):
        book = self.uplink if direction == "up" else self.downlink
        book[(round_, client)] = book.get((round_, client), 0) + len(blob)
        self.messages += 1

    def round_bytes(self, round_: int, client: int) -> tuple[int, int]:
        return self.uplink.get((round_, client), 0), self.downlink.get((round_, client), 0)

    @property
    def total_uplink(self) -> int:
        return sum(self.uplink.values())

    @property
    def total_downlink(self) -> int:
        return sum(self.downlink.values())

    @property
    def total(self) -> int:
        return self.total_uplink + self.total_downlink


def expected_total_bytes(rounds: int, num_clients: int, n: int, m: int) -> int:
    """Closed form: one uplink and one downlink message per client per round."""
    return 2 * rounds * num_clients * message_bytes(n, m)


# -- aggregation ---------------------------------------------------------

def aggregate_cluster(pseudolabels: Sequence[np.ndarray], rule: str = "mean") -> np.ndarray:
    if not pseudolabels:
        raise ValidationError("cannot aggregate an empty cluster")
    shapes = {np.shape(p) for p in pseudolabels}
    if len(shapes) != 1:
        raise ValidationError("pseudo-label matrices disagree in shape")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in pseudolabels])
    if rule == "mean":
        return stack.mean(axis=0)
    if rule == "median":
        out = np.median(stack, axis=0)
    elif rule == "max":
        out = stack.max(axis=0)
    else:
        raise ParameterError(f"unknown aggregation rule {rule!r}")
    sums = out.sum(axis=1, keepdims=True)
    # an all-zero median row carries no preference; fall back to uniform
    safe = np.where(sums > 0, out / np.where(sums > 0, sums, 1.0), 1.0 / out.shape[1])
    return safe


# -- configuration -------------------------------------------------------

@dataclass(frozen=True)
class ProtocolConfig:
    num_rounds: int = 5
    local_pretrain_epochs: int = 20
    local_finetune_epochs: int = 5
    server_distill_epochs: int = 20
    client_distill_epochs: int = 5
    lam: float = 5.0
    temperature: float = 1.0
    b0: float | None = None  # None: calibrate on round-1 distances to target_k
    target_k: int | None = None  # None: number of label groups
    b0_rule: str = "tightest"
    aggregation: str = "mean"
    cluster_on_hard_labels: bool = False
    lr_hard: float = DEFAULT_LR_HARD
    lr_soft: float = DEFAULT_LR_SOFT
    batch_size: int = 32
    reg_radius: float | None = None  # None: 0.1 x median pairwise pool distance
    reg_neighbors: int = 2
    reg_kind: str = "gaussian_ball"
    client_models: tuple[str, ...] = ("softmax", "mlp:32")
    server_model: str = "mlp:64"
    seed: int = 0
    workers: int = 1

    def validate(self):
        if self.num_rounds < 1:
            raise ParameterError("num_rounds must be >= 1")
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if self.temperature < 0:
            raise ParameterError("temperature must be >= 0")
        for name in ("local_pretrain_epochs", "local_finetune_epochs",
                     "server_distill_epochs", "client_distill_epochs"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.aggregation not in AGGREGATION_RULES:
            raise ParameterError(f"aggregation must be one of {AGGREGATION_RULES}")
        if self.b0 is not None and self.b0 < 0:
            raise ParameterError("b0 must be >= 0")
        if not self.client_models:
            raise ParameterError("at least one client model kind is required")


def median_pairwise_distance(features: np.ndarray, limit: int = 2000) -> float:
    x = np.asarray(features, dtype=np.float64)[:limit]
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(x.shape[0], k=1)
    return float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0


# -- state ---------------------------------------------------------------

@dataclass
class ClientState:
    id: int
    model: Predictor
    data: Dataset
    test: Dataset
    group: int  # evaluation only
    last_pseudolabels: np.ndarray | None = None
    pending_download: np.ndarray | None = None


@dataclass
class ServerState:
    assignment: ClusterAssignment
    cluster_models: list[Predictor]
    aggregates: list[np.ndarray] = field(default_factory=list)
    outgoing: list[np.ndarray] = field(default_factory=list)
    distances: np.ndarray | None = None
    calibration: Calibration | None = None


# -- evaluation (sole reader of the sealed pool labels) ------------------

class Evaluator:
    def __init__(self, partition: Partition):
        self._labels = np.asarray(partition.sealed.labels)
        self.masks = [
            support_mask(partition.group_classes[partition.group_of_client[i]], self._labels)
            for i in range(partition.num_clients)
        ]

    def round_metrics(self, t, clients, server, uploads, ledger, lemma=True) -> RoundMetrics:
        dist = distance_matrix(uploads)
        bounds = [cluster_diameter(m, dist) for m in server.assignment.clusters]
        report = (
            lemma1_check(uploads, server.assignment, self._labels, self.masks, dist) if lemma else None
        )
        records = []
        for c in clients:
            k = server.assignment.pi[c.id]
            eval_set = c.test if len(c.test) else c.data
            mask = self.masks[c.id]
            up, down = ledger.round_bytes(t, c.id)
            rec = ClientRecord(
                round=t,
                client_id=c.id,
                cluster_id=k,
                acc_server_model=1.0 - model_err(server.cluster_models[k], eval_set),
                acc_client_model=1.0 - model_err(c.model, eval_set),
                err_on_ui=err(uploads[c.id][mask], self._labels[mask]) if mask.any() else math.nan,
                uplink_bytes=up,
                downlink_bytes=down,
            )
            if report is not None:
                entry = report.for_client(c.id)
                rec.lemma_lhs, rec.lemma_rhs, rec.lemma_holds = entry.lhs, entry.rhs, entry.holds
                rec.gamma_hat = entry.gamma
            records.append(rec)
        return RoundMetrics(
            round=t,
            records=records,
            cluster_bounds=bounds,
            uplink_total=ledger.total_uplink,
            downlink_total=ledger.total_downlink,
            K=server.assignment.K,
        )

    def local_metrics(self, t, clients, pool) -> RoundMetrics:
        records = []
        for c in clients:
            eval_set = c.test if len(c.test) else c.data
            acc = 1.0 - model_err(c.model, eval_set)
            mask = self.masks[c.id]
            u = predict_pseudolabels(c.model, pool, 1.0) if mask.any() else None
            records.append(
                ClientRecord(
                    round=t,
                    client_id=c.id,
                    cluster_id=c.id,
                    acc_server_model=acc,
                    acc_client_model=acc,
                    err_on_ui=err(u[mask], self._labels[mask]) if u is not None else math.nan,
                    uplink_bytes=0,
                    downlink_bytes=0,
                )
            )
        return RoundMetrics(round=t, records=records, K=len(clients))


# -- the federation ------------------------------------------------------

class Federation:
    """Holds all client/server state for one run and drives the rounds."""

    def __init__(self, partition: Partition, config: ProtocolConfig):
        config.validate()
        self.config = config
        self.pool = partition.public_pool.features
        self.num_classes = partition.num_classes
        self.num_groups = len(partition.group_classes)
        self.evaluator = Evaluator(partition)
        self.ledger = CommLedger()
        self.history: list[RoundMetrics] = []
        self.server: ServerState | None = None
        self.round = 0
        f = self.pool.shape[1]
        self.clients = [
            ClientState(
                id=i,
                model=build_model(
                    config.client_models[i % len(config.client_models)], f, self.num_classes,
                    streams.client_stream(config.seed, i),
                ),
                data=ds,
                test=partition.client_tests[i] if partition.client_tests else ds.subset([]),
                group=partition.group_of_client[i],
            )
            for i, ds in enumerate(partition.client_datasets)
        ]
        radius = config.reg_radius
        if radius is None:
            radius = 0.1 * median_pairwise_distance(self.pool)
        self.reg_radius = radius

    # -- helpers ---------------------------------------------------------
    def _map(self, fn: Callable, items):
        items = list(items)
        if self.config.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as ex:
                return list(ex.map(fn, items))
        return [fn(x) for x in items]

    def _reg(self, owner_key: int, t: int) -> tuple[RegConfig, np.random.Generator]:
        cfg = RegConfig(radius=self.reg_radius, num_neighbors=self.config.reg_neighbors,
                        kind=self.config.reg_kind, seed=self.config.seed)
        return cfg, streams.regularizer_stream(self.config.seed, owner_key, t)

    def _local_train(self, c: ClientState, epochs: int, t: int):
        c.model.fit_hard(c.data.features, c.data.labels, epochs, self.config.lr_hard,
                         self.config.batch_size, streams.client_stream(self.config.seed, c.id, t, 1))

    def _upload(self, t: int) -> list[np.ndarray]:
        """Every client predicts on the pool and sends; returns what the server received."""
        temp = self.config.temperature

        def predict(c):
            return predict_pseudolabels(c.model, self.pool, temp)

        received = []
        for c, probs in zip(self.clients, self._map(predict, self.clients)):
            blob = encode_message(probs)
            self.ledger.record("up", t, c.id, blob)
            c.last_pseudolabels = probs
            received.append(decode_message(blob))
        return received

    def _server_distill(self, received: list[np.ndarray], t: int):
        cfg, server = self.config, self.server
        server.aggregates = [
            aggregate_cluster([received[i] for i in members], cfg.aggregation)
            for members in server.assignment.clusters
        ]

        def distill(k):
            rc, rng = self._reg(streams.SERVER_BASE + k, t)
            server.cluster_models[k].fit_soft(
                self.pool, server.aggregates[k], None, cfg.lam, rc, cfg.server_distill_epochs,
                cfg.lr_soft, cfg.batch_size, rng,
            )
            return predict_pseudolabels(server.cluster_models[k], self.pool, cfg.temperature)

        server.outgoing = self._map(distill, range(server.assignment.K))
        for c in self.clients:
            blob = encode_message(server.outgoing[server.assignment.pi[c.id]])
            self.ledger.record("down", t, c.id, blob)
            c.pending_download = decode_message(blob)

    def _client_distill(self, t: int):
        cfg = self.config

        def distill(c):
            rc, rng = self._reg(streams.CLIENT_BASE + c.id, t)
            c.model.fit_soft(self.pool, c.pending_download, None, cfg.lam, rc,
                             cfg.client_distill_epochs, cfg.lr_soft, cfg.batch_size, rng)

        self._map(distill, self.clients)

    # -- phases ----------------------------------------------------------
    def _pretrain_and_measure(self) -> tuple[list[np.ndarray], np.ndarray]:
        """Round-1 local pre-training and upload; returns (received, distances)."""
        t = 1
        self._map(lambda c: self._local_train(c, self.config.local_pretrain_epochs, t), self.clients)
        received = self._upload(t)
        cluster_input = received
        if self.config.cluster_on_hard_labels:
            cluster_input = [rescale_probs(p, 0) for p in received]
        return received, distance_matrix(cluster_input)

    def round1_distances(self) -> np.ndarray:
        """Distance matrix the round-1 clustering would see. Consumes the federation."""
        if self.round or self.server is not None:
            raise RuntimeError("round1_distances needs a fresh federation")
        return self._pretrain_and_measure()[1]

    def run_ptc(self, assignment: ClusterAssignment | None = None) -> RoundMetrics:
        """Round 1: local pre-training, clustering, server and client distillation."""
        cfg, t = self.config, 1
        received, dist = self._pretrain_and_measure()
        calibration = None
        if assignment is None:
            b0 = cfg.b0
            if b0 is None:
                target = cfg.target_k if cfg.target_k is not None else self.num_groups
                target = min(target, len(self.clients))
                try:
                    calibration = calibrate_b0(dist, target, cfg.b0_rule)
                except ParameterError:
                    # e.g. identical clients: no threshold separates them
                    reachable = max(k for _, k in calibrate_b0(dist, 1).sweep)
                    logger.warning("target K=%d unreachable, using K=%d", target, reachable)
                    calibration = calibrate_b0(dist, reachable, cfg.b0_rule)
                b0 = calibration.b0
                logger.info("calibrated b0=%.6g for target K=%d (got K=%d)", b0, target, calibration.K)
            assignment = greedy_cluster(dist, b0)
        assignment.validate(len(self.clients))
        f = self.pool.shape[1]
        models = [
            build_model(cfg.server_model, f, self.num_classes, streams.server_stream(cfg.seed, k))
            for k in range(assignment.K)
        ]
        self.server = ServerState(assignment, models, distances=dist, calibration=calibration)
        self._frozen = assignment
        self._server_distill(received, t)
        self._client_distill(t)
        self.round = t
        metrics = self.evaluator.round_metrics(t, self.clients, self.server, received, self.ledger)
        self.history.append(metrics)
        return metrics

    def run_ifft_round(self) -> RoundMetrics:
        if self.server is None:
            raise RuntimeError("run_ptc must complete before fine-tuning rounds")
        cfg = self.config
        t = self.round + 1
        if self.server.assignment != self._frozen:
            raise RuntimeError("cluster assignment changed after the first round")
        self._map(lambda c: self._local_train(c, cfg.local_finetune_epochs, t), self.clients)
        received = self._upload(t)
        # warm start: cluster models keep their parameters from round t-1
        self._server_distill(received, t)
        self._client_distill(t)
        self.round = t
        metrics = self.evaluator.round_metrics(t, self.clients, self.server, received, self.ledger)
        self.history.append(metrics)
        return metrics

    def run(self, assignment: ClusterAssignment | None = None, on_round=None) -> list[RoundMetrics]:
        m = self.run_ptc(assignment)
        if on_round:
            on_round(m)
        for _ in range(self.config.num_rounds - 1):
            m = self.run_ifft_round()
            if on_round:
                on_round(m)
        return self.history

    # -- control arm -----------------------------------------------------
    def run_local_only(self, on_round=None) -> list[RoundMetrics]:
        """Clients never communicate. Each round spends the same client-side
        epoch count COSMOS would (local plus distillation epochs) on local data."""
        cfg = self.config
        for t in range(1, cfg.num_rounds + 1):
            local = cfg.local_pretrain_epochs if t == 1 else cfg.local_finetune_epochs
            epochs = local + cfg.client_distill_epochs
            self._map(lambda c: self._local_train(c, epochs, t), self.clients)
            self.round = t
            m = self.evaluator.local_metrics(t, self.clients, self.pool)
            self.history.append(m)
            if on_round:
                on_round(m)
        return self.history


def run_ptc(partition: Partition, config: ProtocolConfig):
    fed = Federation(partition, config)
    metrics = fed.run_ptc()
    return fed.clients, fed.server, metrics


def run_cosmos(partition: Partition, config: ProtocolConfig, on_round=None) -> Federation:
    fed = Federation(partition, config)
    fed.run(on_round=on_round)
    return fed


def run_baseline_local_only(partition: Partition, config: ProtocolConfig, on_round=None) -> Federation:
    fed = Federation(partition, config)
    fed.run_local_only(on_round=on_round)
    return fed


def run_ablation_single_cluster(partition: Partition, config: ProtocolConfig, on_round=None) -> Federation:
    fed = Federation(partition, replace(config, b0=math.inf))
    fed.run(on_round=on_round)
    return fed

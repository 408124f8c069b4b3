"""Evaluation quantities: 0-1 error, personalization risk, margins and the
aggregation-error bound checker."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .clustering import ClusterAssignment, distance_matrix, within_cluster_bound
from .errors import EmptyDatasetError, ParameterError

logger = logging.getLogger(__name__)

LEMMA_TOL = 1e-9


def err(predictions: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) differs from the label."""
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyDatasetError("Err over an empty set is undefined")
    return float(np.count_nonzero(kernels.argmax_rows(predictions) != labels)) / labels.size


def topk_accuracy(predictions: np.ndarray, labels, k: int = 1) -> float:
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyDatasetError("accuracy over an empty set is undefined")
    if k == 1:
        return 1.0 - err(predictions, labels)
    # stable sort keeps the lowest index first among equal scores
    top = np.argsort(-predictions, axis=1, kind="stable")[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean())


def model_err(model, dataset) -> float:
    return err(model.predict_proba(dataset.features), dataset.labels)


def personalization_risk(cluster_models: Sequence, assignment: ClusterAssignment, eval_sets: Sequence) -> float:
    """Mean over clients of the error of their cluster's model on their eval set."""
    if len(eval_sets) != len(assignment.pi):
        raise ParameterError("one evaluation set per client is required")
    risks = []
    for i, ds in enumerate(eval_sets):
        if ds is None or len(ds) == 0:
            raise EmptyDatasetError(f"client {i} has no evaluation data")
        risks.append(model_err(cluster_models[assignment.pi[i]], ds))
    return float(np.mean(risks))


def support_mask(client_classes: Sequence[int], pool_labels) -> np.ndarray:
    """Pool points whose (sealed) label is one of the client's group classes."""
    pool_labels = np.asarray(pool_labels, dtype=np.int64)
    mask = np.isin(pool_labels, np.asarray(list(client_classes), dtype=np.int64))
    if pool_labels.size and not mask.any():
        logger.warning("client support does not intersect the public pool")
    return mask


def min_margin(probs: np.ndarray) -> tuple[float, int]:
    """(smallest positive margin, number of zero-margin rows)."""
    margins = kernels.top2_margin(np.atleast_2d(probs))
    zero = int(np.count_nonzero(margins <= 0.0))
    positive = margins[margins > 0.0]
    return (float(positive.min()) if positive.size else 0.0), zero


@dataclass
class LemmaEntry:
    client: int
    cluster: int
    lhs: float
    rhs: float
    gamma: float
    bound: float
    support: int
    zero_margin_rows: int
    holds: bool | None  # None = inconclusive (assumption not met)


@dataclass
class LemmaReport:
    entries: list[LemmaEntry] = field(default_factory=list)

    @property
    def violations(self) -> list[LemmaEntry]:
        return [e for e in self.entries if e.holds is False]

    @property
    def inconclusive(self) -> list[LemmaEntry]:
        return [e for e in self.entries if e.holds is None]

    @property
    def all_hold(self) -> bool:
        return not self.violations

    def for_client(self, client: int) -> LemmaEntry:
        return next(e for e in self.entries if e.client == client)


def lemma1_check(
    client_pseudolabels: Sequence[np.ndarray],
    assignment: ClusterAssignment,
    pool_labels,
    masks: Sequence[np.ndarray],
    dist: np.ndarray | None = None,
) -> LemmaReport:
    """Check Err_{U_i}(mean of cluster) <= Err_{U_i}(f_i) + 2B / (gamma_i |U_i|) per client.

    ``B`` is the measured within-cluster bound; ``gamma_i`` the smallest
    positive margin of client i's pseudo-labels on its supported pool part.
    Clients with an empty support or any zero-margin supported row are
    reported as inconclusive.
    """
    pool_labels = np.asarray(pool_labels, dtype=np.int64)
    if dist is None:
        dist = distance_matrix(client_pseudolabels)
    bound = within_cluster_bound(assignment, dist)
    means = [
        np.mean([client_pseudolabels[i] for i in members], axis=0) for members in assignment.clusters
    ]
    report = LemmaReport()
    for i, p_i in enumerate(client_pseudolabels):
        k = assignment.pi[i]
        mask = np.asarray(masks[i], dtype=bool)
        n_sup = int(mask.sum())
        if n_sup == 0:
            report.entries.append(LemmaEntry(i, k, math.nan, math.nan, 0.0, bound, 0, 0, None))
            continue
        own = err(p_i[mask], pool_labels[mask])
        agg = err(means[k][mask], pool_labels[mask])
        gamma, zeros = min_margin(p_i[mask])
        if zeros or gamma <= 0:
            report.entries.append(LemmaEntry(i, k, agg, math.nan, gamma, bound, n_sup, zeros, None))
            continue
        rhs = own + 2.0 * bound / (gamma * n_sup)
        report.entries.append(
            LemmaEntry(i, k, agg, rhs, gamma, bound, n_sup, zeros, agg <= rhs + LEMMA_TOL)
        )
    return report


@dataclass
class LemmaInstance:
    pseudolabels: list[np.ndarray]
    labels: np.ndarray
    mask: np.ndarray
    gamma: float
    budget: float

    def to_json(self) -> dict:
        return {
            "pseudolabels": [p.tolist() for p in self.pseudolabels],
            "labels": self.labels.tolist(),
            "mask": self.mask.tolist(),
            "gamma": self.gamma,
            "budget": self.budget,
        }


def _enforce_margin(rows: np.ndarray, gamma: float) -> np.ndarray:
    """Mix each row toward its argmax corner until its margin is >= gamma."""
    top = kernels.argmax_rows(rows)
    corner = np.zeros_like(rows)
    corner[np.arange(rows.shape[0]), top] = 1.0
    margins = kernels.top2_margin(rows)
    mix = np.clip((gamma - margins) / np.maximum(1.0 - margins, 1e-300), 0.0, 1.0)
    # nudge past gamma so rounding never leaves a row just under it
    mix = np.where(mix > 0, np.minimum(mix + 1e-9, 1.0), 0.0)
    return (1.0 - mix[:, None]) * rows + mix[:, None] * corner


def random_lemma_instance(rng: np.random.Generator, violate_margin: bool = False) -> LemmaInstance:
    """One cluster around a reference client i=0 whose pseudo-labels have margin >= gamma
    on the supported pool part; other members are mixtures of it with random
    (often adversarial) rows under a random total l1 budget."""
    m = int(rng.choice([2, 5, 10]))
    n_sup = int(rng.integers(10, 501))
    n_extra = int(rng.integers(0, 51))
    gamma = float(rng.uniform(0.05, 0.9))
    members = int(rng.integers(2, 7))
    n = n_sup + n_extra

    base = rng.dirichlet(np.full(m, float(rng.uniform(0.2, 2.0))), size=n)
    base = _enforce_margin(base, gamma)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_sup]] = True
    if violate_margin:
        tied = rng.choice(np.flatnonzero(mask), size=max(1, n_sup // 10), replace=False)
        base[tied] = 0.0
        base[tied, 0] = base[tied, 1] = 0.5

    top = kernels.argmax_rows(base)
    # labels agree with the reference argmax with a random rate
    agree = rng.random(n) < rng.uniform(0.3, 1.0)
    labels = np.where(agree, top, rng.integers(0, m, size=n))

    budget = float(rng.uniform(0.0, 3.0 * gamma * max(1, n_sup // 20)))
    pseudolabels = [base]
    for _ in range(members - 1):
        adversarial = rng.random() < 0.5
        if adversarial:
            # push mass toward the runner-up class to try to flip argmaxes
            second = np.argsort(-base, axis=1, kind="stable")[:, 1]
            other = np.zeros_like(base)
            other[np.arange(n), second] = 1.0
        else:
            other = rng.dirichlet(np.ones(m), size=n)
        share = rng.dirichlet(np.full(n, 0.3))
        eps = np.minimum(budget * share / 2.0, 1.0)
        pseudolabels.append((1.0 - eps[:, None]) * base + eps[:, None] * other)
    return LemmaInstance(pseudolabels, labels.astype(np.int64), mask, gamma, budget)


def check_lemma_instance(inst: LemmaInstance) -> LemmaEntry:
    n_members = len(inst.pseudolabels)
    assignment = ClusterAssignment.single(n_members)
    masks = [inst.mask] * n_members
    return lemma1_check(inst.pseudolabels, assignment, inst.labels, masks).for_client(0)


@dataclass
class ClientRecord:
    round: int
    client_id: int
    cluster_id: int
    acc_server_model: float
    acc_client_model: float
    err_on_ui: float
    uplink_bytes: int
    downlink_bytes: int
    lemma_lhs: float = math.nan
    lemma_rhs: float = math.nan
    lemma_holds: bool | None = None
    gamma_hat: float = math.nan


@dataclass
class RoundMetrics:
    round: int
    records: list[ClientRecord]
    cluster_bounds: list[float] = field(default_factory=list)
    uplink_total: int = 0
    downlink_total: int = 0
    K: int = 1

    @property
    def mean_server_acc(self) -> float:
        return float(np.mean([r.acc_server_model for r in self.records]))

    @property
    def mean_client_acc(self) -> float:
        return float(np.mean([r.acc_client_model for r in self.records]))

    @property
    def personalization_risk(self) -> float:
        return 1.0 - self.mean_server_acc


CSV_COLUMNS = [
    "round",
    "client_id",
    "cluster_id",
    "acc_server_model",
    "acc_client_model",
    "err_on_Ui",
    "uplink_bytes",
    "downlink_bytes",
    "lemma_lhs",
    "lemma_rhs",
    "lemma_holds",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def csv_rows(rm: RoundMetrics) -> list[list[str]]:
    rows = []
    for r in rm.records:
        holds = r.lemma_holds
        if holds is None and not math.isnan(r.lemma_lhs):
            holds = "inconclusive"
        values = (
            r.round, r.client_id, r.cluster_id, r.acc_server_model, r.acc_client_model,
            r.err_on_ui, r.uplink_bytes, r.downlink_bytes, r.lemma_lhs, r.lemma_rhs, holds,
        )
        rows.append([_fmt(v) for v in values])
    return rows


def write_metrics_csv(rounds: Sequence[RoundMetrics], fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rm in rounds:
        writer.writerows(csv_rows(rm))

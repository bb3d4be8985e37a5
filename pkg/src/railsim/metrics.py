"""Evaluation metrics derived from a simulation result.

Percentiles use the nearest-rank method. BusBw is aggregate inter-domain
payload divided by total completion time; it is mostly reported relative to
a reference policy on the same workload, which makes the absolute definition
irrelevant for comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import normalized_mse
from .flowsim import SimResult

PERCENTILE_METHOD = "nearest-rank"


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class CctStats:
    avg: float
    p80: float
    p95: float
    p99: float
    total: float


@dataclass
class MetricsReport:
    cct_avg: float
    cct_p80: float
    cct_p95: float
    cct_p99: float
    cct_total: float
    msg_cct_avg: float
    msg_cct_p99: float
    busbw: float
    sender_mse: list[float]
    receiver_mse: list[float]
    sender_mse_mean: float
    receiver_mse_mean: float
    sender_mse_max: float
    receiver_mse_max: float
    sender_mse_hot: float
    receiver_mse_hot: float
    busbw_normalized: Optional[float] = None
    iteration_time: Optional[float] = None
    extra: dict = field(default_factory=dict)


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    n = sorted_values.size
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


def percentiles(times: Sequence[float]) -> CctStats:
    t = np.sort(np.asarray(times, dtype=float))
    if t.size == 0:
        raise MetricsError("no completion times")
    return CctStats(
        avg=float(t.mean()),
        p80=nearest_rank(t, 80),
        p95=nearest_rank(t, 95),
        p99=nearest_rank(t, 99),
        total=float(t[-1]),
    )


def cct_percentiles(result: SimResult, per: str = "flow") -> CctStats:
    """Percentiles over simulated flows (chunks for chunked policies) or over messages."""
    if per == "flow":
        return percentiles(result.completion)
    if per == "message":
        return percentiles(result.message_completion)
    raise MetricsError(f"unknown percentile population {per!r}")


def busbw(result: SimResult) -> float:
    if not result.total_time > 0:
        raise MetricsError("zero-duration result")
    return result.total_bytes / result.total_time


def busbw_normalized(result: SimResult, reference: SimResult) -> float:
    return busbw(result) / busbw(reference)


def nic_volume_matrices(result: SimResult) -> tuple[np.ndarray, np.ndarray]:
    return result.send_volume.copy(), result.recv_volume.copy()


def per_domain_mse(volumes: np.ndarray) -> list[float]:
    return [normalized_mse(row) for row in volumes]


def _mse_summary(volumes: np.ndarray) -> tuple[list[float], float, float, float]:
    """(per-domain MSE, mean over active domains, max, MSE of the busiest domain)."""
    per = per_domain_mse(volumes)
    totals = volumes.sum(axis=1)
    active = [m for m, tot in zip(per, totals) if tot > 0]
    mean = float(np.mean(active)) if active else 0.0
    hot = per[int(np.argmax(totals))]
    return per, mean, max(per), hot


def iteration_time(cct_a2a_1: float, cct_a2a_2: float, compute_time: float) -> float:
    """Serialized iteration: compute plus both all-to-all collectives, no overlap."""
    for name, v in (("cct_a2a_1", cct_a2a_1), ("cct_a2a_2", cct_a2a_2), ("compute_time", compute_time)):
        if v < 0:
            raise MetricsError(f"{name} must be non-negative")
    return compute_time + cct_a2a_1 + cct_a2a_2


def report(
    result: SimResult,
    reference: Optional[SimResult] = None,
    second: Optional[SimResult] = None,
    compute_time: Optional[float] = None,
) -> MetricsReport:
    """Build the metrics row for one run.

    ``second`` is the returning all-to-all; when omitted and a compute time is
    given, the first collective's time is used for both.
    """
    flows = cct_percentiles(result, "flow")
    msgs = cct_percentiles(result, "message")
    s_per, s_mean, s_max, s_hot = _mse_summary(result.send_volume)
    r_per, r_mean, r_max, r_hot = _mse_summary(result.recv_volume)
    rep = MetricsReport(
        cct_avg=flows.avg,
        cct_p80=flows.p80,
        cct_p95=flows.p95,
        cct_p99=flows.p99,
        cct_total=flows.total,
        msg_cct_avg=msgs.avg,
        msg_cct_p99=msgs.p99,
        busbw=busbw(result),
        sender_mse=s_per,
        receiver_mse=r_per,
        sender_mse_mean=s_mean,
        receiver_mse_mean=r_mean,
        sender_mse_max=s_max,
        receiver_mse_max=r_max,
        sender_mse_hot=s_hot,
        receiver_mse_hot=r_hot,
    )
    if reference is not None:
        rep.busbw_normalized = busbw_normalized(result, reference)
    if compute_time is not None:
        back = second.total_time if second is not None else result.total_time
        rep.iteration_time = iteration_time(result.total_time, back, compute_time)
    return rep

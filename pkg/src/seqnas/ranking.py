"""Performance records, cross-task z-score ranking and top-k selection."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .data import TaskSpec


class EvalProtocol(str, Enum):
    ONLY_FT = "only-ft"
    MASK_FT = "mask-ft"
    CON_FT = "con-ft"
    NTP_FT = "ntp-ft"
    FOUNDATION = "foundation"

    @property
    def objective(self) -> str | None:
        """Pretraining objective whose supernet this protocol inherits from."""
        return {"mask-ft": "mm", "con-ft": "cl", "ntp-ft": "ntp"}.get(self.value)

    @property
    def inherits(self) -> bool:
        return self is not EvalProtocol.ONLY_FT


@dataclass(frozen=True)
class PerfRecord:
    path_id: str
    task_id: int
    protocol: str
    tokenizer_id: str
    metric_value: float
    seed: int

    def __post_init__(self):
        if not math.isfinite(self.metric_value):
            raise ValueError(f"non-finite metric for {self.path_id} on task {self.task_id}")
        object.__setattr__(self, "protocol", EvalProtocol(self.protocol).value)

    @property
    def key(self) -> tuple:
        return (self.path_id, self.task_id, self.protocol, self.tokenizer_id, self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str | dict) -> PerfRecord:
        d = json.loads(line) if isinstance(line, str) else line
        return cls(**d)


@dataclass
class RankTable:
    mu: dict[int, float]
    sigma: dict[int, float]
    scores: dict[str, float]
    order: list[str]

    def rank_of(self) -> dict[str, int]:
        return {pid: i + 1 for i, pid in enumerate(self.order)}


class MissingRecords(ValueError):
    pass


def zscore_rank(records: Iterable[PerfRecord], tasks: Sequence[TaskSpec]) -> RankTable:
    """Score(a) = mean over tasks of direction * (P_t(a) - mu_t) / sigma_t.

    sigma_t is the population standard deviation; a task with sigma_t = 0
    contributes 0 to every architecture.  Ties are broken by path_id, where
    scores equal to 12 decimals count as tied so that rounding residue from
    rescaled metrics cannot reorder architectures whose exact scores coincide.
    """
    records = list(records)
    perf: dict[tuple[str, int], float] = {}
    for r in records:
        k = (r.path_id, r.task_id)
        if k in perf:
            raise ValueError(f"duplicate record for {k}; filter to one protocol/tokenizer/seed first")
        perf[k] = r.metric_value
    archs = sorted({r.path_id for r in records})
    if not tasks:
        raise ValueError("no tasks to rank over")
    missing = [(a, t.task_id) for a in archs for t in tasks if (a, t.task_id) not in perf]
    if missing:
        raise MissingRecords(f"{len(missing)} (arch, task) pairs missing, e.g. {missing[:5]}")
    if len(archs) < 2:
        raise ValueError("ranking needs at least 2 architectures")
    mu, sigma = {}, {}
    total = np.zeros(len(archs))
    for t in tasks:
        vals = np.array([perf[(a, t.task_id)] for a in archs])
        mu[t.task_id] = float(np.mean(vals))
        sigma[t.task_id] = float(np.std(vals))
        if sigma[t.task_id] > 0:
            total += t.direction * ((vals - mu[t.task_id]) / sigma[t.task_id])
    scores = {a: float(s) / len(tasks) for a, s in zip(archs, total)}
    order = sorted(archs, key=lambda a: (-round(scores[a], 12), a))
    return RankTable(mu, sigma, scores, order)


def select_top_k(table: RankTable, k: int) -> list[str]:
    if k > len(table.order):
        raise ValueError(f"k={k} exceeds {len(table.order)} ranked architectures")
    return table.order[:k]


def filter_records(records: Iterable[PerfRecord], protocol: str | None = None,
                   tokenizer_id: str | None = None) -> list[PerfRecord]:
    out = []
    for r in records:
        if protocol is not None and r.protocol != EvalProtocol(protocol).value:
            continue
        if tokenizer_id is not None and r.tokenizer_id != tokenizer_id:
            continue
        out.append(r)
    return out

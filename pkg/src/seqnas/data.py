"""Sequences, task definitions, labeled datasets and synthetic motif tasks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


class EmptyDataset(DatasetError):
    pass


class InvalidResidue(DatasetError):
    def __init__(self, residue: str, position: int | None = None, line: int | None = None):
        self.residue = residue
        where = ""
        if line is not None:
            where += f" on line {line}"
        if position is not None:
            where += f" at position {position}"
        super().__init__(f"InvalidResidue({residue!r}){where}")


class MalformedLine(DatasetError):
    pass


class Alphabet(str, Enum):
    DNA = "DNA"
    PROTEIN = "PROTEIN"

    @property
    def core(self) -> str:
        return "ACGT" if self is Alphabet.DNA else "ACDEFGHIKLMNPQRSTVWY"

    @property
    def wildcard(self) -> str:
        return "N" if self is Alphabet.DNA else "X"

    @property
    def chars(self) -> str:
        return self.core + self.wildcard


@dataclass(frozen=True)
class Sequence:
    residues: str
    alphabet: Alphabet = Alphabet.DNA

    def __post_init__(self):
        object.__setattr__(self, "alphabet", Alphabet(self.alphabet))
        if not self.residues:
            raise DatasetError("sequence must have length >= 1")
        allowed = self.alphabet.chars
        for i, ch in enumerate(self.residues):
            if ch not in allowed:
                raise InvalidResidue(ch, position=i)

    def __len__(self):
        return len(self.residues)

    def __str__(self):
        return self.residues


class Problem(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    REGRESSION = "regression"


class Metric(str, Enum):
    ACCURACY = "accuracy"
    MCC = "mcc"
    RMSE = "rmse"
    SPEARMAN = "spearman"

    @property
    def error_like(self) -> bool:
        return self is Metric.RMSE


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    description: str
    modality: Alphabet = Alphabet.DNA
    problem: Problem = Problem.BINARY
    metric: Metric = Metric.ACCURACY
    direction: int = 1
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "modality", Alphabet(self.modality))
        object.__setattr__(self, "problem", Problem(self.problem))
        object.__setattr__(self, "metric", Metric(self.metric))
        if not self.description.strip():
            raise ValueError("task description must be non-empty")
        if self.direction not in (1, -1):
            raise ValueError(f"direction must be +1 or -1, got {self.direction}")
        if (self.direction == -1) != self.metric.error_like:
            raise ValueError(f"direction {self.direction} inconsistent with metric {self.metric.value}")
        if self.problem is Problem.BINARY and self.n_classes != 2:
            raise ValueError("binary tasks have exactly 2 classes")
        if self.problem is Problem.REGRESSION and self.metric in (Metric.ACCURACY, Metric.MCC):
            raise ValueError(f"metric {self.metric.value} needs a classification problem")

    @property
    def output_dim(self) -> int:
        return 1 if self.problem is Problem.REGRESSION else self.n_classes

    def to_json(self) -> dict:
        d = asdict(self)
        d["modality"], d["problem"], d["metric"] = (self.modality.value, self.problem.value,
                                                    self.metric.value)
        return d

    @classmethod
    def from_json(cls, d: dict) -> TaskSpec:
        return cls(**{k: d[k] for k in ("task_id", "description", "modality", "problem", "metric",
                                        "direction") if k in d},
                   n_classes=d.get("n_classes", 2))


def save_manifests(tasks: list[TaskSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps([t.to_json() for t in tasks], indent=1))


def load_manifests(path: str | Path) -> list[TaskSpec]:
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = [raw]
    return [TaskSpec.from_json(d) for d in raw]


SPLITS = ("train", "valid", "test")


@dataclass
class LabeledDataset:
    items: list[tuple[Sequence, float]]
    split: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.items:
            raise EmptyDataset("dataset has no items")
        if not self.split:
            self.split = split_indices(len(self.items), seed=0)
        check_split(self.split, len(self.items))

    def __len__(self):
        return len(self.items)

    def subset(self, name: str) -> list[tuple[Sequence, float]]:
        return [self.items[i] for i in self.split[name]]

    def labels(self, name: str | None = None) -> np.ndarray:
        idx = range(len(self.items)) if name is None else self.split[name]
        return np.array([self.items[i][1] for i in idx], dtype=float)

    def to_tsv(self) -> str:
        return "".join(f"{s.residues}\t{_fmt_label(y)}\n" for s, y in self.items)


def _fmt_label(y: float) -> str:
    return str(int(y)) if float(y).is_integer() else repr(float(y))


def check_split(split: dict[str, np.ndarray], n: int) -> None:
    seen = np.concatenate([np.asarray(split[k], dtype=int) for k in SPLITS])
    if len(seen) != n or len(np.unique(seen)) != n or (n and (seen.min() < 0 or seen.max() >= n)):
        raise DatasetError("splits must be disjoint and cover every item exactly once")


def split_indices(n: int, seed: int, ratios=(8, 1, 1)) -> dict[str, np.ndarray]:
    """Seeded shuffle cut by ``ratios``; every split gets at least one item when n >= 3."""
    order = np.random.default_rng(seed).permutation(n)
    total = sum(ratios)
    n_valid = max(int(round(n * ratios[1] / total)), 1 if n >= 3 else 0)
    n_test = max(int(round(n * ratios[2] / total)), 1 if n >= 3 else 0)
    n_train = n - n_valid - n_test
    return {"train": np.sort(order[:n_train]),
            "valid": np.sort(order[n_train:n_train + n_valid]),
            "test": np.sort(order[n_train + n_valid:])}


def load_plain(path: str | Path, alphabet: Alphabet | str = Alphabet.DNA, seed: int = 0) -> LabeledDataset:
    """Read ``sequence<TAB>label`` lines; blank lines are skipped."""
    alphabet = Alphabet(alphabet)
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedLine(f"line {lineno}: expected 'sequence<TAB>label', got {line!r}")
            seq, label = parts
            try:
                y = float(label)
            except ValueError:
                raise MalformedLine(f"line {lineno}: label {label!r} is not a number") from None
            try:
                items.append((Sequence(seq.strip().upper(), alphabet), y))
            except InvalidResidue as e:
                raise InvalidResidue(e.residue, line=lineno) from None
    if not items:
        raise EmptyDataset(f"{path} contains no records")
    return LabeledDataset(items, split_indices(len(items), seed))


def truncate(seq: str, max_len: int) -> str:
    """Keep the head of over-long sequences."""
    return seq[:max_len]


def gen_motif_task(seed: int, n: int, length: int, motif: str, noise: float, task_id: int = 0,
                   description: str | None = None) -> tuple[TaskSpec, LabeledDataset]:
    """Balanced binary DNA task: positives carry ``motif`` at a uniform position.

    Each planted motif residue is replaced by a different random base with
    probability ``noise``.  Negatives are rejection-sampled so they never
    contain the motif.
    """
    if len(motif) > length:
        raise ValueError(f"motif of length {len(motif)} longer than sequence length {length}")
    if not 0.0 <= noise < 0.5:
        raise ValueError(f"noise must lie in [0, 0.5), got {noise}")
    core = Alphabet.DNA.core
    if any(ch not in core for ch in motif):
        raise InvalidResidue(next(ch for ch in motif if ch not in core))
    rng = np.random.default_rng(seed)
    bases = np.array(list(core))

    def background() -> str:
        return "".join(bases[rng.integers(0, 4, size=length)])

    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    rng.shuffle(labels)
    items = []
    for y in labels:
        if y == 1:
            s = list(background())
            pos = int(rng.integers(0, length - len(motif) + 1))
            for j, ch in enumerate(motif):
                if rng.random() < noise:
                    ch = str(rng.choice([b for b in core if b != ch]))
                s[pos + j] = ch
            seq = "".join(s)
        else:
            seq = background()
            while motif in seq:
                seq = background()
        items.append((Sequence(seq), float(y)))
    spec = TaskSpec(task_id=task_id,
                    description=description or f"detect the binding motif {motif} in DNA sequences",
                    modality=Alphabet.DNA, problem=Problem.BINARY, metric=Metric.ACCURACY,
                    direction=1)
    return spec, LabeledDataset(items, split_indices(n, seed))


def repeat_corpus(pattern: str, n: int, length: int, seed: int = 0) -> list[Sequence]:
    """Unlabeled corpus of ``pattern`` repeated with a random phase."""
    rng = np.random.default_rng(seed)
    reps = pattern * (length // len(pattern) + 2)
    out = []
    for _ in range(n):
        off = int(rng.integers(0, len(pattern)))
        out.append(Sequence(reps[off:off + length]))
    return out

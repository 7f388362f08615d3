"""Event-sequence data model, JSONL persistence, splitting and statistics.

The on-disk format is one JSON record per line:

    {"seq_id": "s0", "t_end": 67.0,
     "events": [{"t": 1.5, "k": 0}, ...],
     "static": [0.1, -1.2]}          # optional

Times are 64-bit reals in abstract units; marks are integers in [0, K).
Datasets are immutable after construction and safe to share across threads.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from tppkit import rng as rngmod


class DataError(ValueError):
    """Raised when a dataset violates a structural invariant."""


@dataclass(frozen=True)
class Event:
    time: float
    mark: int

    def __post_init__(self):
        if not math.isfinite(self.time) or self.time < 0:
            raise DataError(f"event time must be finite and >= 0, got {self.time}")
        if self.mark < 0:
            raise DataError(f"event mark must be >= 0, got {self.mark}")


@dataclass(frozen=True)
class EventSequence:
    """Ordered events on [0, t_end] with optional per-sequence static features."""

    events: tuple[Event, ...]
    t_end: float
    static_features: tuple[float, ...] | None = None
    seq_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.static_features is not None:
            object.__setattr__(self, "static_features", tuple(float(x) for x in self.static_features))
        if not math.isfinite(self.t_end) or self.t_end < 0:
            raise DataError(f"t_end must be finite and >= 0, got {self.t_end}")
        prev = -math.inf
        for ev in self.events:
            if ev.time <= prev:
                raise DataError(f"non-monotone times: {ev.time} after {prev} (ties forbidden)")
            prev = ev.time
        if self.events and self.events[-1].time > self.t_end:
            raise DataError(f"event time {self.events[-1].time} exceeds t_end {self.t_end}")

    def __len__(self) -> int:
        return len(self.events)

    def times(self) -> np.ndarray:
        return np.array([ev.time for ev in self.events], dtype=np.float64)

    def marks(self) -> np.ndarray:
        return np.array([ev.mark for ev in self.events], dtype=np.int64)


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[EventSequence, ...]
    class_count: int
    class_names: tuple[str, ...] | None = None
    time_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
            if len(self.class_names) != self.class_count:
                raise DataError("class_names length must equal class_count")
        if self.class_count < 1:
            raise DataError("class_count must be >= 1")
        if not (self.time_scale > 0):
            raise DataError("time_scale must be > 0")
        dim = None
        for i, seq in enumerate(self.sequences):
            for ev in seq.events:
                if ev.mark >= self.class_count:
                    raise DataError(f"sequence {i}: mark {ev.mark} >= class_count {self.class_count}")
            if seq.static_features is not None:
                if dim is None:
                    dim = len(seq.static_features)
                elif len(seq.static_features) != dim:
                    raise DataError(
                        f"sequence {i}: static feature length {len(seq.static_features)} != {dim}"
                    )

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    @property
    def static_dim(self) -> int | None:
        for seq in self.sequences:
            if seq.static_features is not None:
                return len(seq.static_features)
        return None

    def label(self, k: int) -> str:
        return self.class_names[k] if self.class_names else str(k)


@dataclass(frozen=True)
class StatsReport:
    n_sequences: int
    n_events: int
    avg_length: float
    class_counts: tuple[int, ...]
    class_names: tuple[str, ...] | None = None
    split_sizes: dict = field(default_factory=dict)  # name -> (n_sequences, n_events)

    def format_table(self) -> str:
        rows = [
            ("# sequences", f"{self.n_sequences:,}"),
            ("# events", f"{self.n_events:,}"),
            ("avg. length", f"{self.avg_length:.2f}"),
        ]
        for k, c in enumerate(self.class_counts):
            name = self.class_names[k] if self.class_names else f"class {k}"
            rows.append((f"# events [{name}]", f"{c:,}"))
        for name, (nseq, nev) in self.split_sizes.items():
            rows.append((f"{name} size (seq / events)", f"{nseq:,} / {nev:,}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v:>14}" for k, v in rows)

    def to_dict(self) -> dict:
        return {
            "n_sequences": self.n_sequences,
            "n_events": self.n_events,
            "avg_length": self.avg_length,
            "class_counts": list(self.class_counts),
            "class_names": list(self.class_names) if self.class_names else None,
            "split_sizes": {k: list(v) for k, v in self.split_sizes.items()},
        }


def _parse_record(obj: dict, lineno: int) -> EventSequence:
    try:
        raw_events = obj["events"]
        t_end = float(obj["t_end"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: missing or malformed field: {exc}") from exc
    events = []
    for j, ev in enumerate(raw_events):
        try:
            events.append(Event(time=float(ev["t"]), mark=int(ev["k"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: event {j} malformed: {exc}") from exc
    static = obj.get("static")
    if static is not None:
        static = tuple(float(x) for x in static)
    try:
        return EventSequence(
            events=tuple(events),
            t_end=t_end,
            static_features=static,
            seq_id=str(obj.get("seq_id", f"seq{lineno}")),
        )
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from exc


def load_jsonl(path, class_count: int | None = None, class_names=None) -> Dataset:
    """Load a dataset from a JSONL file, validating all invariants.

    `class_count` defaults to 1 + max mark found in the file.
    Errors report the offending line number.
    """
    sequences = []
    max_mark = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON: {exc}") from exc
            seq = _parse_record(obj, lineno)
            if seq.events:
                max_mark = max(max_mark, max(ev.mark for ev in seq.events))
            sequences.append(seq)
    if class_count is None:
        class_count = max(max_mark + 1, 1)
    return Dataset(sequences=tuple(sequences), class_count=class_count, class_names=class_names)


def save_jsonl(dataset: Dataset, path) -> None:
    """Write a dataset as one JSON record per line (inverse of load_jsonl)."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset.sequences:
            rec = {
                "seq_id": seq.seq_id,
                "t_end": seq.t_end,
                "events": [{"t": ev.time, "k": ev.mark} for ev in seq.events],
            }
            if seq.static_features is not None:
                rec["static"] = list(seq.static_features)
            fh.write(json.dumps(rec) + "\n")


def mean_interevent_time(dataset: Dataset) -> float:
    """Mean gap between consecutive events within a sequence, over the dataset."""
    total, count = 0.0, 0
    for seq in dataset.sequences:
        if len(seq) >= 2:
            t = seq.times()
            total += float(t[-1] - t[0])
            count += len(seq) - 1
    if count == 0:
        raise DataError("normalization requires at least one inter-event interval")
    return total / count


def normalize_times(dataset: Dataset, reference: Dataset | None = None) -> Dataset:
    """Divide all times by the mean inter-event time of `reference` (default: itself).

    The scale is recorded in `time_scale`; `denormalize_times` undoes it.
    In cross-validation, pass the training split as the reference.
    """
    scale = mean_interevent_time(reference if reference is not None else dataset)
    if scale <= 0:
        raise DataError("mean inter-event time is zero; cannot normalize")
    sequences = tuple(
        EventSequence(
            events=tuple(Event(ev.time / scale, ev.mark) for ev in seq.events),
            t_end=seq.t_end / scale,
            static_features=seq.static_features,
            seq_id=seq.seq_id,
        )
        for seq in dataset.sequences
    )
    return replace(dataset, sequences=sequences, time_scale=dataset.time_scale * scale)


def denormalize_times(dataset: Dataset) -> Dataset:
    """Map times back to original units using the recorded time_scale."""
    scale = dataset.time_scale
    sequences = tuple(
        EventSequence(
            events=tuple(Event(ev.time * scale, ev.mark) for ev in seq.events),
            t_end=seq.t_end * scale,
            static_features=seq.static_features,
            seq_id=seq.seq_id,
        )
        for seq in dataset.sequences
    )
    return replace(dataset, sequences=sequences, time_scale=1.0)


def kfold_split(
    dataset: Dataset,
    n_folds: int,
    fold_index: int,
    valid_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[Dataset, Dataset, Dataset]:
    """Sequence-level split: fold `fold_index` is the test set, the remaining
    sequences are split into train/valid by `valid_fraction`.

    Deterministic for a fixed seed; the folds partition the dataset. The first
    (n mod n_folds) folds receive one extra sequence.
    """
    n = len(dataset.sequences)
    if n_folds < 2:
        raise DataError("n_folds must be >= 2")
    if not (0 <= fold_index < n_folds):
        raise DataError(f"fold_index {fold_index} out of range for {n_folds} folds")
    if n_folds > n:
        raise DataError(f"n_folds {n_folds} exceeds number of sequences {n}")

    rng = rngmod.make_rng(seed)
    order = rng.permutation(n)
    base, extra = divmod(n, n_folds)
    sizes = [base + 1 if f < extra else base for f in range(n_folds)]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    test_idx = order[starts[fold_index] : starts[fold_index + 1]]
    rest = np.concatenate([order[: starts[fold_index]], order[starts[fold_index + 1] :]])
    n_valid = int(round(valid_fraction * len(rest)))
    valid_idx, train_idx = rest[:n_valid], rest[n_valid:]

    def subset(idx):
        return replace(dataset, sequences=tuple(dataset.sequences[i] for i in sorted(idx)))

    return subset(train_idx), subset(valid_idx), subset(test_idx)


def dataset_stats(dataset: Dataset, splits: dict | None = None) -> StatsReport:
    """Table-style summary: counts, average length, per-class counts, split sizes."""
    counts = np.zeros(dataset.class_count, dtype=np.int64)
    for seq in dataset.sequences:
        for ev in seq.events:
            counts[ev.mark] += 1
    n_seq = len(dataset.sequences)
    n_ev = int(counts.sum())
    split_sizes = {}
    if splits:
        for name, part in splits.items():
            split_sizes[name] = (len(part.sequences), part.n_events)
    return StatsReport(
        n_sequences=n_seq,
        n_events=n_ev,
        avg_length=(n_ev / n_seq) if n_seq else 0.0,
        class_counts=tuple(int(c) for c in counts),
        class_names=dataset.class_names,
        split_sizes=split_sizes,
    )

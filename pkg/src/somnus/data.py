"""Patient-night records, CSV parsing and sufficient statistics.

Stages are coded as integers throughout the package::

    AWAKE = 0, REM = 1, NREM = 2

Sleep-stage-indexed arrays (transition origins, event rates) use the
two-element sleep index ``0 = REM, 1 = NonREM`` (``stage - 1``).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

AWAKE, REM, NREM = 0, 1, 2
STAGE_CODES = {"A": AWAKE, "R": REM, "N": NREM}
STAGE_LETTERS = {v: k for k, v in STAGE_CODES.items()}
SLEEP_STAGES = (REM, NREM)
EPOCH_SEC = 30.0
MIN_EVENT_SEC = 10.0


class RecordError(ValueError):
    """Malformed or inconsistent input row."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += source
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ExclusionError(RecordError):
    """Patient is valid CSV but fails the cohort inclusion rule."""

    def __init__(self, patient_id: str, reason: str):
        self.patient_id = patient_id
        self.reason = reason
        super().__init__(f"patient {patient_id!r} excluded: {reason}")


@dataclass(frozen=True)
class Event:
    start_sec: float
    duration_sec: float
    stage: int

    @property
    def end_sec(self) -> float:
        return self.start_sec + self.duration_sec


@dataclass(eq=False)
class SleepRecord:
    """One patient-night: a stage per 30 s epoch plus scored events."""

    patient_id: str
    stages: np.ndarray
    events: list[Event] = field(default_factory=list)
    epoch_len_sec: float = EPOCH_SEC

    def __post_init__(self):
        self.stages = np.asarray(self.stages, dtype=np.int8)
        self.events = sorted(self.events, key=lambda e: e.start_sec)

    @property
    def n_epochs(self) -> int:
        return int(self.stages.size)

    def __eq__(self, other):
        if not isinstance(other, SleepRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and np.array_equal(self.stages, other.stages)
            and self.events == other.events
            and self.epoch_len_sec == other.epoch_len_sec
        )

    def validate(self) -> None:
        """Raise :class:`RecordError` / :class:`ExclusionError` on invariant failure."""
        s = self.stages
        if s.size == 0:
            raise RecordError(f"patient {self.patient_id!r} has no epochs")
        if np.any((s < AWAKE) | (s > NREM)):
            raise RecordError(f"patient {self.patient_id!r} has an unknown stage code")
        if not np.any(s == REM):
            raise ExclusionError(self.patient_id, "never entered REM sleep")
        if not np.any(s == NREM):
            raise ExclusionError(self.patient_id, "never entered NonREM sleep")
        span = s.size * self.epoch_len_sec
        prev_end = -math.inf
        for ev in self.events:
            if ev.duration_sec < MIN_EVENT_SEC:
                raise RecordError(
                    f"patient {self.patient_id!r}: event at {ev.start_sec}s shorter than {MIN_EVENT_SEC:g}s"
                )
            if ev.start_sec < 0 or ev.end_sec > span:
                raise RecordError(
                    f"patient {self.patient_id!r}: event at {ev.start_sec}s outside the recording"
                )
            if ev.start_sec < prev_end:
                raise RecordError(
                    f"patient {self.patient_id!r}: event at {ev.start_sec}s overlaps the previous event"
                )
            prev_end = ev.end_sec
            epoch_stage = s[int(ev.start_sec // self.epoch_len_sec)]
            if epoch_stage == AWAKE:
                raise RecordError(
                    f"patient {self.patient_id!r}: event at {ev.start_sec}s starts in an Awake epoch"
                )
            if epoch_stage != ev.stage:
                raise RecordError(
                    f"patient {self.patient_id!r}: event at {ev.start_sec}s labelled "
                    f"{STAGE_LETTERS[ev.stage]} but its epoch is {STAGE_LETTERS[int(epoch_stage)]}"
                )


# ---------------------------------------------------------------------------
# CSV I/O


def _text(stream) -> IO[str]:
    if isinstance(stream, (bytes, bytearray)):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", newline="")


def _number(token: str, line: int, source: str, name: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise RecordError(f"{name} {token!r} is not a number", line, source) from None
    if not math.isfinite(value):
        raise RecordError(f"{name} {token!r} is not finite", line, source)
    return value


def format_number(x: float) -> str:
    """Canonical text form: integers without a decimal point, else ``repr``."""
    x = float(x)
    if x.is_integer():
        return str(int(x))
    return repr(x)


def parse_records(
    epoch_file,
    event_file=None,
    exclusions: list[ExclusionError] | None = None,
) -> list[SleepRecord]:
    """Read ``epochs.csv`` and ``events.csv`` into validated records.

    Parameters
    ----------
    epoch_file, event_file
        Byte or text streams (or raw ``bytes``/``str`` contents). ``event_file``
        may be omitted when no events were scored.
    exclusions
        When a list is given, patients failing the inclusion rule (no REM or
        no NonREM epoch) are dropped and their :class:`ExclusionError` is
        appended here. Otherwise the first exclusion is raised.
    """
    stages_by_pid: dict[str, list[int]] = {}
    order: list[str] = []
    reader = csv.reader(_text(epoch_file))
    header = next(reader, None)
    if header != ["patient_id", "epoch", "stage"]:
        raise RecordError(f"bad header {header!r}", 1, "epochs.csv")
    current = None
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise RecordError(f"expected 3 fields, got {len(row)}", lineno, "epochs.csv")
        pid, epoch_tok, stage_tok = row
        if stage_tok not in STAGE_CODES:
            raise RecordError(f"unknown stage code {stage_tok!r}", lineno, "epochs.csv")
        try:
            epoch = int(epoch_tok)
        except ValueError:
            raise RecordError(f"epoch {epoch_tok!r} is not an integer", lineno, "epochs.csv") from None
        if pid != current:
            if pid in stages_by_pid:
                raise RecordError(f"rows for patient {pid!r} are not contiguous", lineno, "epochs.csv")
            stages_by_pid[pid] = []
            order.append(pid)
            current = pid
        seq = stages_by_pid[pid]
        if epoch != len(seq):
            raise RecordError(f"expected epoch {len(seq)} for patient {pid!r}, got {epoch}", lineno, "epochs.csv")
        seq.append(STAGE_CODES[stage_tok])

    events_by_pid: dict[str, list[Event]] = {pid: [] for pid in order}
    if event_file is not None:
        reader = csv.reader(_text(event_file))
        header = next(reader, None)
        if header != ["patient_id", "start_sec", "duration_sec", "stage"]:
            raise RecordError(f"bad header {header!r}", 1, "events.csv")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise RecordError(f"expected 4 fields, got {len(row)}", lineno, "events.csv")
            pid, start_tok, dur_tok, stage_tok = row
            if pid not in events_by_pid:
                raise RecordError(f"event for unknown patient {pid!r}", lineno, "events.csv")
            if stage_tok not in ("R", "N"):
                raise RecordError(f"unknown event stage code {stage_tok!r}", lineno, "events.csv")
            start = _number(start_tok, lineno, "events.csv", "start_sec")
            dur = _number(dur_tok, lineno, "events.csv", "duration_sec")
            events_by_pid[pid].append(Event(start, dur, STAGE_CODES[stage_tok]))

    records = []
    for pid in order:
        rec = SleepRecord(pid, np.array(stages_by_pid[pid], dtype=np.int8), events_by_pid[pid])
        try:
            rec.validate()
        except ExclusionError as exc:
            if exclusions is None:
                raise
            exclusions.append(exc)
            continue
        records.append(rec)
    return records


def read_records(epoch_path, event_path=None, exclusions=None) -> list[SleepRecord]:
    with open(epoch_path, "rb") as fe:
        if event_path is None:
            return parse_records(fe, None, exclusions)
        with open(event_path, "rb") as fv:
            return parse_records(fe, fv, exclusions)


def serialize_records(records: Sequence[SleepRecord]) -> tuple[str, str]:
    """Return ``(epochs_csv, events_csv)`` text in the canonical layout."""
    ep = io.StringIO()
    ev = io.StringIO()
    ep.write("patient_id,epoch,stage\n")
    ev.write("patient_id,start_sec,duration_sec,stage\n")
    for rec in records:
        pid = rec.patient_id
        ep.writelines(f"{pid},{j},{STAGE_LETTERS[int(s)]}\n" for j, s in enumerate(rec.stages))
        for e in rec.events:
            ev.write(f"{pid},{format_number(e.start_sec)},{format_number(e.duration_sec)},{STAGE_LETTERS[e.stage]}\n")
    return ep.getvalue(), ev.getvalue()


def write_records(records: Sequence[SleepRecord], epoch_path, event_path) -> None:
    epochs, events = serialize_records(records)
    with open(epoch_path, "w", newline="") as f:
        f.write(epochs)
    with open(event_path, "w", newline="") as f:
        f.write(events)


# ---------------------------------------------------------------------------
# Reductions


def _event_epoch_overlap(record: SleepRecord) -> np.ndarray:
    """Seconds of event time inside each epoch (half-open windows)."""
    L = record.epoch_len_sec
    overlap = np.zeros(record.n_epochs)
    for e in record.events:
        first = int(e.start_sec // L)
        last = min(int(math.ceil(e.end_sec / L)), record.n_epochs)
        for j in range(first, last):
            lo = max(e.start_sec, j * L)
            hi = min(e.end_sec, (j + 1) * L)
            if hi > lo:
                overlap[j] += hi - lo
    return overlap


def epoch_event_indicator(record: SleepRecord) -> np.ndarray:
    """1 for each sleep epoch intersected by an event, else 0."""
    overlap = _event_epoch_overlap(record)
    return ((overlap > 0) & (record.stages != AWAKE)).astype(np.int8)


@dataclass
class TransitionStats:
    counts: np.ndarray  # (2 event status, 2 origin sleep stage, 3 destination stage)
    at_risk: np.ndarray  # (2, 2)


@dataclass
class EventStats:
    event_count: np.ndarray  # (2,) REM, NonREM
    exposure_sec: np.ndarray  # (2,)


@dataclass
class SufficientStats:
    """Stacked per-patient statistics; row ``i`` belongs to ``patient_ids[i]``."""

    patient_ids: list[str]
    counts: np.ndarray  # (n, 2, 2, 3)
    events: np.ndarray  # (n, 2)
    exposure: np.ndarray  # (n, 2)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float).reshape(-1, 2, 2, 3)
        self.events = np.asarray(self.events, dtype=float).reshape(-1, 2)
        self.exposure = np.asarray(self.exposure, dtype=float).reshape(-1, 2)
        n = len(self.patient_ids)
        if not (self.counts.shape[0] == self.events.shape[0] == self.exposure.shape[0] == n):
            raise ValueError("per-patient arrays disagree on the number of patients")
        if len(set(self.patient_ids)) != n:
            raise ValueError("duplicate patient ids")

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def at_risk(self) -> np.ndarray:
        return self.counts.sum(axis=-1)

    def index(self, patient_id: str) -> int:
        return self.patient_ids.index(patient_id)

    def patient(self, i: int) -> tuple[TransitionStats, EventStats]:
        return (
            TransitionStats(self.counts[i].astype(int), self.at_risk[i].astype(int)),
            EventStats(self.events[i].astype(int), self.exposure[i].copy()),
        )

    def subset(self, rows: Iterable[int]) -> "SufficientStats":
        rows = list(rows)
        return SufficientStats(
            [self.patient_ids[i] for i in rows], self.counts[rows], self.events[rows], self.exposure[rows]
        )

    @classmethod
    def empty(cls) -> "SufficientStats":
        return cls([], np.zeros((0, 2, 2, 3)), np.zeros((0, 2)), np.zeros((0, 2)))

    def to_json(self) -> dict:
        out = {}
        for i, pid in enumerate(self.patient_ids):
            out[pid] = {
                "c": self.counts[i].astype(int).tolist(),
                "n": self.at_risk[i].astype(int).tolist(),
                "v": self.events[i].astype(int).tolist(),
                "t": [float(x) for x in self.exposure[i]],
            }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SufficientStats":
        pids = list(obj)
        if not pids:
            return cls.empty()
        counts = np.array([obj[p]["c"] for p in pids], dtype=float)
        at_risk = np.array([obj[p]["n"] for p in pids], dtype=float)
        if not np.array_equal(counts.sum(axis=-1), at_risk):
            raise RecordError("sufficient statistics violate sum(c) == n")
        return cls(
            pids,
            counts,
            np.array([obj[p]["v"] for p in pids], dtype=float),
            np.array([obj[p]["t"] for p in pids], dtype=float),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def record_stats(record: SleepRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Transition counts (2, 2, 3), event counts (2,) and exposure (2,) for one record."""
    s = record.stages.astype(np.int64)
    overlap = _event_epoch_overlap(record)
    v = ((overlap > 0) & (s != AWAKE)).astype(np.int64)
    counts = np.zeros((2, 2, 3))
    origin, dest, h = s[:-1], s[1:], v[:-1]
    asleep = origin != AWAKE
    np.add.at(counts, (h[asleep], origin[asleep] - 1, dest[asleep]), 1)
    n_events = np.zeros(2)
    for e in record.events:
        n_events[e.stage - 1] += 1
    exposure = np.zeros(2)
    for k in SLEEP_STAGES:
        in_k = s == k
        exposure[k - 1] = record.epoch_len_sec * in_k.sum() - overlap[in_k].sum()
    return counts, n_events, exposure


def derive_sufficient_stats(records: Sequence[SleepRecord]) -> SufficientStats:
    if not records:
        return SufficientStats.empty()
    parts = [record_stats(r) for r in records]
    return SufficientStats(
        [r.patient_id for r in records],
        np.stack([p[0] for p in parts]),
        np.stack([p[1] for p in parts]),
        np.stack([p[2] for p in parts]),
    )


def sleep_summaries(record: SleepRecord) -> dict[str, float]:
    """Hours in each sleep stage, stage event counts and stage-specific AHI."""
    L = record.epoch_len_sec
    hours_rem = float(np.sum(record.stages == REM)) * L / 3600.0
    hours_nrem = float(np.sum(record.stages == NREM)) * L / 3600.0
    n_rem = sum(e.stage == REM for e in record.events)
    n_nrem = sum(e.stage == NREM for e in record.events)
    asleep = hours_rem + hours_nrem
    return {
        "hours_rem": hours_rem,
        "hours_nrem": hours_nrem,
        "events_rem": float(n_rem),
        "events_nrem": float(n_nrem),
        "ahi_rem": n_rem / hours_rem if hours_rem > 0 else math.nan,
        "ahi_nrem": n_nrem / hours_nrem if hours_nrem > 0 else math.nan,
        "ahi": (n_rem + n_nrem) / asleep if asleep > 0 else math.nan,
    }

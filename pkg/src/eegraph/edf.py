"""Minimal EDF/EDF+ reader for 64-channel motor-imagery recordings.

Covers only the subset of the container the source archive uses: 16-bit
little-endian samples, one optional 'EDF Annotations' channel holding
time-stamped T0/T1/T2 event codes, continuous records.  Run numbers (from
the SxxxRyy file naming convention) select how T1/T2 map onto the four
motor-imagery task labels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from eegraph.data import Recording


class EdfParseError(ValueError):
    """Structurally invalid or unsupported EDF content."""


VALID_EVENT_CODES = ("T0", "T1", "T2")

# imagined-movement runs: left/right fist, then both fists / both feet
RUN_TASKS: dict[int, dict[str, int]] = {
    4: {"T1": 1, "T2": 2}, 8: {"T1": 1, "T2": 2}, 12: {"T1": 1, "T2": 2},
    6: {"T1": 3, "T2": 4}, 10: {"T1": 3, "T2": 4}, 14: {"T1": 3, "T2": 4},
}


@dataclass
class EdfFile:
    n_records: int
    record_duration: float
    labels: list[str]
    sample_rates: list[float]
    signals: list[np.ndarray]                 # physical units, per channel
    annotations: list[tuple[float, float, str]]  # (onset s, duration s, text)


def _ascii_field(fh, width: int, offset: int, what: str) -> str:
    raw = fh.read(width)
    if len(raw) != width:
        raise EdfParseError(f"truncated header at byte {offset}: expected {what}")
    return raw.decode("latin-1").strip()


def read_edf(path) -> EdfFile:
    path = Path(path)
    with open(path, "rb") as fh:
        pos = 0

        def take(width: int, what: str) -> str:
            nonlocal pos
            field = _ascii_field(fh, width, pos, what)
            pos += width
            return field

        def take_num(width: int, what: str, cast):
            field = take(width, what)
            try:
                return cast(field)
            except ValueError:
                raise EdfParseError(
                    f"{path}: bad {what} field {field!r} at byte {pos - width}") from None

        take_num(8, "version", int)
        take(80, "patient id")
        take(80, "recording id")
        take(8, "start date")
        take(8, "start time")
        header_bytes = take_num(8, "header size", int)
        take(44, "reserved")
        n_records = take_num(8, "record count", int)
        duration = take_num(8, "record duration", float)
        ns = take_num(4, "signal count", int)

        labels = [take(16, f"label[{i}]") for i in range(ns)]
        for i in range(ns):
            take(80, f"transducer[{i}]")
        for i in range(ns):
            take(8, f"unit[{i}]")
        phys_min = [take_num(8, f"phys min[{i}]", float) for i in range(ns)]
        phys_max = [take_num(8, f"phys max[{i}]", float) for i in range(ns)]
        dig_min = [take_num(8, f"dig min[{i}]", int) for i in range(ns)]
        dig_max = [take_num(8, f"dig max[{i}]", int) for i in range(ns)]
        for i in range(ns):
            take(80, f"prefilter[{i}]")
        samples = [take_num(8, f"samples per record[{i}]", int) for i in range(ns)]
        for i in range(ns):
            take(32, f"signal reserved[{i}]")
        if header_bytes != pos:
            raise EdfParseError(f"{path}: header claims {header_bytes} bytes, parsed {pos}")

        record_words = sum(samples)
        payload = fh.read()
    expected = n_records * record_words * 2
    if len(payload) < expected:
        raise EdfParseError(
            f"{path}: truncated data at byte {header_bytes + len(payload)}: expected "
            f"{expected} payload bytes, got {len(payload)}")
    words = np.frombuffer(payload[:expected], dtype="<i2").reshape(n_records, record_words)

    signals: list[np.ndarray] = []
    ann_chunks: list[bytes] = []
    col = 0
    for i in range(ns):
        block = words[:, col:col + samples[i]]
        col += samples[i]
        if labels[i] == "EDF Annotations":
            ann_chunks.append(block.astype("<i2").tobytes())
            signals.append(np.empty(0))
            continue
        span = dig_max[i] - dig_min[i]
        scale = (phys_max[i] - phys_min[i]) / span if span else 1.0
        dc = phys_min[i] - scale * dig_min[i]
        signals.append(block.reshape(-1).astype(np.float64) * scale + dc)

    annotations = _parse_annotations(b"".join(ann_chunks)) if ann_chunks else []
    rates = [s / duration if duration else 0.0 for s in samples]
    return EdfFile(n_records=n_records, record_duration=duration, labels=labels,
                   sample_rates=rates, signals=signals, annotations=annotations)


def _parse_annotations(raw: bytes) -> list[tuple[float, float, str]]:
    """Decode time-stamped annotation lists (onset {21 duration} 20 text 20 0)."""
    events = []
    for tal in raw.split(b"\x00"):
        if not tal:
            continue
        parts = tal.split(b"\x14")
        head = parts[0]
        if b"\x15" in head:
            onset_b, dur_b = head.split(b"\x15", 1)
        else:
            onset_b, dur_b = head, b"0"
        try:
            onset = float(onset_b.decode("latin-1"))
            dur = float(dur_b.decode("latin-1") or 0.0)
        except ValueError:
            continue
        for text in parts[1:]:
            text = text.decode("latin-1").strip()
            if text:
                events.append((onset, dur, text))
    return events


def run_number_from_name(path) -> int:
    match = re.search(r"R(\d+)", Path(path).stem, flags=re.IGNORECASE)
    if not match:
        raise EdfParseError(f"cannot infer a run number from file name {Path(path).name!r}")
    return int(match.group(1))


def load_physionet_edf(path, run: int | None = None) -> Recording:
    """Read one motor-imagery EDF run into a labelled :class:`Recording`.

    T1/T2 events map to tasks 1..4 according to the run number; T0 (rest)
    events are skipped.  Trials whose 4-second window overruns the recording
    are dropped.
    """
    path = Path(path)
    if run is None:
        run = run_number_from_name(path)
    if run not in RUN_TASKS:
        raise EdfParseError(
            f"{path}: run {run} is not a motor-imagery run; expected one of "
            f"{sorted(RUN_TASKS)}")
    edf = read_edf(path)

    eeg_idx = [i for i, lbl in enumerate(edf.labels) if lbl != "EDF Annotations"]
    if not eeg_idx:
        raise EdfParseError(f"{path}: no signal channels")
    rates = {edf.sample_rates[i] for i in eeg_idx}
    if len(rates) != 1:
        raise EdfParseError(f"{path}: mixed sample rates {sorted(rates)}")
    rate = rates.pop()
    channels = np.stack([edf.signals[i] for i in eeg_idx])

    task_map = RUN_TASKS[run]
    trial_len = int(round(4.0 * rate))
    trials = []
    for onset, _dur, code in edf.annotations:
        if code == "T0":
            continue
        if code not in VALID_EVENT_CODES:
            raise EdfParseError(
                f"{path}: unknown annotation code {code!r}; valid codes are "
                f"{', '.join(VALID_EVENT_CODES)}")
        start = int(round(onset * rate))
        if start + trial_len <= channels.shape[1]:
            trials.append((start, task_map[code]))

    subject = Path(path).stem.split("R")[0]
    return Recording(subject=subject, sample_rate=rate, channels=channels, trials=trials)

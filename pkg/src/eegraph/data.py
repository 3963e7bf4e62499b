"""Recording ingestion, preprocessing and the synthetic verification corpus.

Preprocessing keeps to the reference pipeline: a zero-phase second-order
IIR notch at the power-line frequency, then per-channel per-trial
z-normalisation; no band-pass, artifact rejection or ICA.  The synthetic
generator produces class-signature streams whose time points are either
clear or deliberately ambiguous (two class signatures blended 50/50), so
the whole two-phase pipeline is verifiable at desk scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import filtfilt, freqz, iirnotch


class PipelineWarning(RuntimeWarning):
    """Degenerate preprocessing conditions (constant channels, short trials)."""


TRIAL_SECONDS = 4.0


@dataclass
class Recording:
    """One continuous multichannel recording with trial annotations.

    ``trials`` holds (start_sample, task_label) pairs; every trial spans
    exactly 4 s at the recording's sample rate.
    """

    subject: str
    sample_rate: float
    channels: np.ndarray              # (n_channels, n_samples)
    trials: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2:
            raise ValueError(f"channels must be 2-D, got {self.channels.shape}")
        length = self.trial_length
        for start, label in self.trials:
            if label not in (1, 2, 3, 4):
                raise ValueError(f"trial label {label} outside 1..4")
            if start < 0 or start + length > self.channels.shape[1]:
                raise ValueError(f"trial at {start} does not fit the recording")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def trial_length(self) -> int:
        return int(round(TRIAL_SECONDS * self.sample_rate))


# ---------------------------------------------------------------------------
# preprocessing


def design_notch(freq: float = 50.0, q: float = 30.0, fs: float = 160.0):
    """Second-order IIR notch coefficients (b, a)."""
    if freq >= fs / 2.0:
        raise ValueError(f"notch frequency {freq} Hz is at or above Nyquist ({fs / 2} Hz)")
    return iirnotch(freq, q, fs=fs)


def notch_filter(signal: np.ndarray, freq: float = 50.0, q: float = 30.0,
                 fs: float = 160.0) -> np.ndarray:
    """Zero-phase notch along the last axis.

    The biquad is applied forward-backward, so the passband keeps zero phase
    and re-filtering already-filtered passband content is a near-identity;
    magnitude deviations concentrate in a ~freq/q band around the notch.
    """
    b, a = design_notch(freq, q, fs)
    return filtfilt(b, a, np.asarray(signal, dtype=np.float64), axis=-1)


def notch_response(freqs_hz: np.ndarray, freq: float = 50.0, q: float = 30.0,
                   fs: float = 160.0) -> np.ndarray:
    """|H| of the designed biquad at the given frequencies (single pass)."""
    b, a = design_notch(freq, q, fs)
    _, h = freqz(b, a, worN=np.asarray(freqs_hz, dtype=np.float64), fs=fs)
    return np.abs(h)


def znorm(signal: np.ndarray) -> np.ndarray:
    """Zero-mean unit-std per row (population denominator) along the last axis.

    Constant rows come back as zeros with a :class:`PipelineWarning`.
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    mean = signal.mean(axis=-1, keepdims=True)
    std = signal.std(axis=-1, keepdims=True)
    flat = (std == 0.0).reshape(-1)
    if np.any(flat):
        warnings.warn(f"{int(flat.sum())} constant channel(s) z-normalised to zeros",
                      PipelineWarning, stacklevel=2)
    out = np.where(std == 0.0, 0.0, (signal - mean) / np.where(std == 0.0, 1.0, std))
    return out


def preprocess(recording: Recording, notch_freq: float = 50.0, q: float = 30.0
               ) -> Recording:
    """Notch-filter the whole recording, then z-normalise each trial window
    per channel (per-trial statistics avoid cross-trial leakage)."""
    channels = notch_filter(recording.channels, freq=notch_freq, q=q,
                            fs=recording.sample_rate)
    length = recording.trial_length
    for start, _ in recording.trials:
        channels[:, start:start + length] = znorm(channels[:, start:start + length])
    return replace(recording, channels=channels)


def slice_trials(recording: Recording) -> tuple[list[np.ndarray], list[int]]:
    """Extract 4-second trial windows as (n_channels, trial_length) arrays."""
    length = recording.trial_length
    arrays = [recording.channels[:, start:start + length].copy()
              for start, _ in recording.trials]
    labels = [label for _, label in recording.trials]
    return arrays, labels


def time_window(trial: np.ndarray, sample_rate: float, start_s: float,
                end_s: float) -> np.ndarray:
    """Columns of a trial array within [start_s, end_s) seconds."""
    i0 = int(round(start_s * sample_rate))
    i1 = int(round(end_s * sample_rate))
    return trial[:, i0:i1]


def points_dataset(trials: list[np.ndarray], labels: list[int],
                   sample_rate: float, start_s: float = 0.0,
                   end_s: float = TRIAL_SECONDS, stride: int = 1
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Flatten trials into (time point, label) pairs for classifier training.

    Points are columns of the windowed trials, subsampled by ``stride``;
    labels come back 0-based for the cross-entropy loss.
    """
    xs, ys = [], []
    for trial, label in zip(trials, labels):
        window = time_window(trial, sample_rate, start_s, end_s)
        pts = window.T[::stride]
        xs.append(pts)
        ys.append(np.full(len(pts), label - 1, dtype=np.int64))
    return np.concatenate(xs, axis=0), np.concatenate(ys)


def split_points(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation index split over n points."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(val_fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"val fraction {val_fraction} leaves an empty split for n={n}")
    return order[n_val:], order[:n_val]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for the desk-scale verification corpus.

    Each trial carries one class; its signal at time t is c_t * v, where c_t
    is a random +-1 carrier (so per-trial z-normalisation cannot erase the
    spatial pattern) and v is the class signature across channels.  A
    (1 - clear_fraction) share of time points blends the true signature
    50/50 with another class's, making those points genuinely ambiguous.
    """

    n_trials: int = 200
    n_classes: int = 4
    n_channels: int = 64
    sample_rate: float = 160.0
    clear_fraction: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.clear_fraction <= 1.0:
            raise ValueError("clear_fraction must lie in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class SyntheticDataset:
    recording: Recording
    clear: np.ndarray        # (n_trials, trial_length) bool, True where unblended
    signatures: np.ndarray   # (n_classes, n_channels) orthonormal rows
    spec: SyntheticSpec

    def clear_for_trials(self) -> list[np.ndarray]:
        return [self.clear[i] for i in range(len(self.clear))]


def class_signatures(n_classes: int, n_channels: int, seed: int) -> np.ndarray:
    """Orthonormal class signature rows (pairwise non-collinear by construction)."""
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((n_channels, n_classes))
    q, _ = np.linalg.qr(mat)
    return q.T[:n_classes]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic synthetic recording with per-point clarity flags.

    Labels cycle 1..n_classes across trials, so classes stay balanced within
    one trial.  Ambiguous points pick a uniformly random partner class, which
    makes a blended point equally plausible under either class.
    """
    rng = np.random.default_rng(spec.seed)
    sigs = class_signatures(spec.n_classes, spec.n_channels, spec.seed + 1)
    length = int(round(TRIAL_SECONDS * spec.sample_rate))
    total = spec.n_trials * length
    channels = np.empty((spec.n_channels, total))
    clear = np.empty((spec.n_trials, length), dtype=bool)
    trials = []
    for i in range(spec.n_trials):
        label = (i % spec.n_classes) + 1
        carrier = rng.choice([-1.0, 1.0], size=length)
        is_clear = rng.random(length) < spec.clear_fraction
        partners = (label - 1 + 1 + rng.integers(0, spec.n_classes - 1, size=length)
                    ) % spec.n_classes
        pattern = np.where(is_clear[:, None], sigs[label - 1],
                           0.5 * sigs[label - 1] + 0.5 * sigs[partners])
        block = carrier[:, None] * pattern
        if spec.noise_sigma > 0.0:
            block = block + spec.noise_sigma * rng.standard_normal(block.shape)
        start = i * length
        channels[:, start:start + length] = block.T
        clear[i] = is_clear
        trials.append((start, label))
    rec = Recording(subject="synthetic", sample_rate=spec.sample_rate,
                    channels=channels, trials=trials)
    return SyntheticDataset(recording=rec, clear=clear, signatures=sigs, spec=spec)


def nearest_signature_accuracy(dataset: SyntheticDataset, limit: int | None = None) -> float:
    """Accuracy of an oracle that matches each raw point to the closest
    +-signature direction; an analytic ceiling for forced per-point labels."""
    rec = dataset.recording
    sigs = dataset.signatures
    correct = 0
    total = 0
    for start, label in rec.trials[:limit]:
        block = rec.channels[:, start:start + rec.trial_length]
        scores = np.abs(sigs @ block)        # (n_classes, T)
        pred = scores.argmax(axis=0) + 1
        correct += int((pred == label).sum())
        total += block.shape[1]
    return correct / total


# ---------------------------------------------------------------------------
# plain matrix text format


class RecordingParseError(ValueError):
    """Malformed plain-matrix recording file."""


def save_recording_text(path, recording: Recording) -> None:
    """Plain text container: header line, one ``start,label`` line per trial,
    then one whitespace-separated row of channel values per sample."""
    with open(path, "w") as fh:
        fh.write(f"channels={recording.n_channels} rate={recording.sample_rate:g} "
                 f"trials={len(recording.trials)}\n")
        for start, label in recording.trials:
            fh.write(f"{start},{label}\n")
        np.savetxt(fh, recording.channels.T, fmt="%.17g")  # %.17g round-trips float64


def load_recording_text(path, subject: str | None = None) -> Recording:
    path = Path(path)
    offset = 0
    with open(path, "rb") as fh:
        raw_header = fh.readline()
        offset += len(raw_header)
        header = raw_header.decode("ascii", errors="replace").strip()
        fields = dict(part.split("=", 1) for part in header.split() if "=" in part)
        try:
            n_channels = int(fields["channels"])
            rate = float(fields["rate"])
            n_trials = int(fields["trials"])
        except (KeyError, ValueError) as exc:
            raise RecordingParseError(
                f"{path}: bad header {header!r} (expected 'channels=.. rate=.. "
                f"trials=..'): {exc}") from None
        trials = []
        for i in range(n_trials):
            line = fh.readline()
            if not line:
                raise RecordingParseError(
                    f"{path}: truncated at byte {offset}: expected {n_trials} "
                    f"annotation lines, got {i}")
            offset += len(line)
            try:
                start_s, label_s = line.decode("ascii").strip().split(",")
                start, label = int(start_s), int(label_s)
            except ValueError:
                raise RecordingParseError(
                    f"{path}: bad annotation line {i + 1} at byte {offset - len(line)}: "
                    f"{line!r}") from None
            if label not in (1, 2, 3, 4):
                raise RecordingParseError(
                    f"{path}: unknown task label {label}; valid labels are 1, 2, 3, 4")
            trials.append((start, label))
        rows = []
        t = 0
        while True:
            line = fh.readline()
            if not line:
                break
            stripped = line.decode("ascii", errors="replace").strip()
            if stripped:
                try:
                    vals = np.array(stripped.split(), dtype=np.float64)
                except ValueError:
                    raise RecordingParseError(
                        f"{path}: unparseable float in sample row {t + 1} at byte "
                        f"{offset}") from None
                if len(vals) != n_channels:
                    raise RecordingParseError(
                        f"{path}: sample row {t + 1} at byte {offset} has {len(vals)} "
                        f"values, expected {n_channels}")
                rows.append(vals)
                t += 1
            offset += len(line)
    if not rows:
        raise RecordingParseError(f"{path}: no sample rows after byte {offset}")
    channels = np.stack(rows).T
    try:
        return Recording(subject=subject or path.stem, sample_rate=rate,
                         channels=channels, trials=trials)
    except ValueError as exc:
        raise RecordingParseError(f"{path}: {exc}") from None


def ingest(path, fmt: str = "auto", expect_channels: int = 64,
           expect_rate: float = 160.0) -> list[Recording]:
    """Load recordings from the plain text format or an EDF file.

    Validates the channel count and sample rate against the pipeline's
    expectations and raises descriptive errors otherwise.
    """
    path = Path(path)
    if fmt == "auto":
        with open(path, "rb") as fh:
            fmt = "edf" if fh.read(8).startswith(b"0") and path.suffix.lower() == ".edf" \
                else "text"
    if fmt == "edf":
        from eegraph.edf import load_physionet_edf
        recs = [load_physionet_edf(path)]
    elif fmt == "text":
        recs = [load_recording_text(path)]
    else:
        raise ValueError(f"unknown format {fmt!r}")
    for rec in recs:
        if rec.n_channels != expect_channels:
            raise ValueError(f"{path}: {rec.n_channels} channels, expected {expect_channels}")
        if abs(rec.sample_rate - expect_rate) > 1e-9:
            raise ValueError(f"{path}: sample rate {rec.sample_rate}, expected {expect_rate}")
    return recs

"""Deterministic synthetic stand-ins for the clinical recordings.

Each class gets a quasi-periodic surface template (a few harmonics of its
beat rate plus a Gaussian spike per beat) shared by the 12 surface leads, and
a narrow, phase-shifted spike train on the 6 intracardiac leads.  Classes 3
and 6 share the surface template and a close rate; they differ in the
intracardiac timing and polarity, which makes them the designated hard pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Sample, Window, downsample2, preprocess_window
from .ingest import (AUX_TO_MAJOR, CHANNELS, FS, N_ECG, AnnotationInterval, RawRecord,
                     write_annotations, write_record)

PAPER_TRAIN_COUNTS = (4987, 1876, 889, 37, 21, 6)
HARD_PAIR = (3, 6)


@dataclass(frozen=True)
class ClassParams:
    rate: float  # beats per second
    harmonics: tuple[float, float, float]
    spike_width: float  # seconds
    spike_amp: float  # signed peak of the per-beat surface spike
    biphasic: float  # 0 = Gaussian spike, 1 = first-derivative (biphasic) spike
    iegm_delay: float  # fraction of a beat period
    iegm_polarity: float


DEFAULT_CLASSES = (
    ClassParams(1.2, (1.0, 0.3, 0.0), 0.030, 1.5, 0.0, 0.10, 1.0),
    ClassParams(3.0, (0.4, 0.4, 0.2), 0.020, -1.5, 0.0, 0.05, 1.0),
    ClassParams(1.8, (0.2, 0.6, 0.3), 0.015, 1.5, 1.0, 0.25, -1.0),
    ClassParams(2.4, (0.0, 0.0, 1.0), 0.060, -2.0, 1.0, 0.15, -1.0),
    ClassParams(4.0, (0.8, 0.0, 0.0), 0.050, 2.0, 0.5, 0.35, -1.0),
    ClassParams(2.0, (0.2, 0.6, 0.3), 0.015, 1.5, 1.0, 0.40, 1.0),
)


def long_tail_counts(scale: float = 50.0, minimum: int = 4,
                     base=PAPER_TRAIN_COUNTS) -> tuple[int, ...]:
    """Paper-shaped class counts divided by ``scale``, rounded half-up, clamped."""
    return tuple(max(minimum, int(np.floor(c / scale + 0.5))) for c in base)


def _held_out(counts, frac: float, minimum: int) -> tuple[int, ...]:
    return tuple(max(minimum, int(np.floor(c * frac + 0.5))) for c in counts)


@dataclass(frozen=True)
class SynthSpec:
    counts: tuple[int, ...] = field(default_factory=long_tail_counts)
    val_counts: tuple[int, ...] | None = None
    test_counts: tuple[int, ...] | None = None
    noise: float = 0.05
    rate_jitter: float = 0.03
    powerline: float = 0.05
    phase_jitter: float = 1.0  # beat onset drawn from U(0, phase_jitter * period)
    gain_jitter: float = 0.1
    classes: tuple[ClassParams, ...] = DEFAULT_CLASSES
    fs: int = FS
    duration: float = 2.0

    def __post_init__(self):
        if len(self.counts) > len(self.classes):
            raise ValueError("more class counts than class parameterisations")
        if len(set(self.classes[:self.n_classes])) != self.n_classes:
            raise ValueError("class parameterisations must be distinct")

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    def split_counts(self) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
        val = self.val_counts or _held_out(self.counts, 1 / 7, 1)
        test = self.test_counts or _held_out(self.counts, 2 / 7, 2)
        return tuple(self.counts), tuple(val), tuple(test)


def _lead_gains(n: int) -> np.ndarray:
    # fixed per-lead projection pattern, identical for every sample
    return np.cos(np.linspace(0.2, 2.9, n)) + 0.3 * np.sign(np.sin(np.arange(1, n + 1)))


def synth_window(params: ClassParams, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One raw [18, duration * fs] window."""
    n = int(round(spec.duration * spec.fs))
    t = np.arange(n) / spec.fs
    rate = params.rate * (1.0 + spec.rate_jitter * rng.uniform(-1, 1))
    period = 1.0 / rate
    t0 = rng.uniform(0, spec.phase_jitter * period)
    phase = 2 * np.pi * rate * (t - t0)
    surface = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(params.harmonics) if a)
    beats = t0 + period * np.arange(-1, int(spec.duration * rate) + 2)
    u = (t[None, :] - beats[:, None]) / params.spike_width
    gauss = np.exp(-0.5 * u ** 2)
    # -u * gauss peaks at 1/sqrt(e); rescale so both shapes share the peak height
    shape = (1.0 - params.biphasic) * gauss - params.biphasic * np.sqrt(np.e) * u * gauss
    surface = surface + params.spike_amp * shape.sum(0)
    gains = _lead_gains(N_ECG) * rng.uniform(1 - spec.gain_jitter, 1 + spec.gain_jitter, N_ECG)
    ecg = gains[:, None] * surface[None, :]

    n_iegm = len(CHANNELS) - N_ECG
    iegm = np.empty((n_iegm, n))
    for c in range(n_iegm):
        lag = (params.iegm_delay + 0.03 * c) * period
        width = 0.006
        iegm[c] = params.iegm_polarity * np.exp(
            -0.5 * ((t[None, :] - (beats[:, None] + lag)) / width) ** 2).sum(0)
    x = np.concatenate([ecg, 2.0 * iegm], axis=0)
    x += spec.powerline * np.sin(2 * np.pi * 60.0 * t + rng.uniform(0, 2 * np.pi))
    x += spec.noise * rng.standard_normal(x.shape)
    return x


def make_synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0):
    """-> (train, val, test) lists of preprocessed Samples."""
    out = []
    for split_idx, counts in enumerate(spec.split_counts()):
        samples = []
        for k, n in enumerate(counts):
            for i in range(n):
                rng = np.random.default_rng([seed, split_idx, k, i])
                raw = synth_window(spec.classes[k], spec, rng)
                w = downsample2(Window(raw, k + 1, (f"syn{k + 1}", split_idx, i), spec.fs))
                samples.append(preprocess_window(w))
        out.append(samples)
    return tuple(out)


def class_aux_labels(major: int) -> list[str]:
    return [aux for aux, m in AUX_TO_MAJOR.items() if int(m) == major]


def write_synth_records(spec: SynthSpec, out_dir: str | Path, seed: int = 0,
                        gap: float = 0.5) -> list[Path]:
    """One record per class with every window as its own annotated segment.

    Annotated segments are separated by unannotated noise and carry a short
    tail beyond the last full window, so ingest has something to discard.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, test = spec.split_counts()
    win = int(round(spec.duration * spec.fs))
    gap_n = int(round(gap * spec.fs))
    tail = 37
    paths = []
    for k in range(spec.n_classes):
        total = train[k] + val[k] + test[k]
        aux = class_aux_labels(k + 1)[0]
        rng = np.random.default_rng([seed, 99, k])
        chunks, anns, pos = [], [], 0
        for i in range(total):
            noise = spec.noise * rng.standard_normal((len(CHANNELS), gap_n))
            chunks.append(noise)
            pos += gap_n
            seg = synth_window(spec.classes[k], spec, np.random.default_rng([seed, 3, k, i]))
            extra = synth_window(spec.classes[k], spec, rng)[:, :tail]
            chunks += [seg, extra]
            anns.append(AnnotationInterval(pos, pos + win + tail, aux))
            pos += win + tail
        data = np.concatenate(chunks, axis=1).astype(np.float32)
        subject = f"syn{k + 1:03d}"
        path = out_dir / f"{subject}.sigc"
        write_record(RawRecord(subject, spec.fs, CHANNELS, data), path)
        write_annotations(anns, path.with_suffix(".ann"))
        paths.append(path)
    return paths


@dataclass(frozen=True)
class ClusterSpec:
    n_classes: int = 3
    dim: int = 16
    separation: float = 1.0
    sigma: float = 0.1
    counts: tuple[int, ...] = (10, 10, 10)
    shared: float = 0.0  # common offset along a direction orthogonal to all centres

    def __post_init__(self):
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if len(self.counts) != self.n_classes or self.dim < self.n_classes + 1:
            raise ValueError("need one count per class and dim > n_classes")


def cluster_centers(spec: ClusterSpec) -> np.ndarray:
    centers = spec.separation * np.eye(spec.n_classes, spec.dim)
    centers[:, spec.n_classes] = spec.shared
    return centers


def make_clusters(spec: ClusterSpec, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs around equidistant centres -> (embeddings, labels 1..C)."""
    rng = np.random.default_rng(seed)
    centers = cluster_centers(spec)
    labels = np.repeat(np.arange(1, spec.n_classes + 1), spec.counts)
    z = centers[labels - 1] + spec.sigma * rng.standard_normal((labels.size, spec.dim))
    return z, labels

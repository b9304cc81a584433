"""Windowing, filtering, wavelet denoising and augmentation of 18-lead windows.

Channel-wise operations accept ``[..., T]`` arrays and act along the last
axis, so a whole window is processed in one call with per-channel semantics.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pywt
from scipy import signal

from .container import ContainerError, header_int, payload_array, read_file, require, write_file
from .ingest import CHANNELS, FS, N_ECG, Segment, map_aux_to_major

WINDOW_SECONDS = 2
FS_DOWN = FS / 2


@dataclass
class Window:
    data: np.ndarray  # [18, 1954] raw or [18, 977] after downsampling
    label: int
    source: tuple[str, int, int]  # subject, segment, offset
    fs: float = FS

    @property
    def window_id(self) -> str:
        subject, seg, off = self.source
        return f"{subject}:{seg}:{off}"


@dataclass
class Sample:
    ecg: np.ndarray  # [12, T]
    iegm: np.ndarray  # [6, T]
    label: int
    sample_id: str = ""
    augmented: bool = False

    @property
    def signals(self) -> np.ndarray:
        return np.concatenate([self.ecg, self.iegm], axis=0)

    @classmethod
    def from_signals(cls, x: np.ndarray, label: int, sample_id: str = "",
                     augmented: bool = False) -> "Sample":
        return cls(x[:N_ECG], x[N_ECG:], label, sample_id, augmented)


@dataclass(frozen=True)
class FilterSpec:
    notch_freq: float = 60.0
    notch_q: float = 30.0
    cheby_order: int = 4
    cheby_cutoff: float = 45.0
    cheby_ripple: float = 0.5
    fs: float = FS_DOWN

    def __post_init__(self):
        if self.notch_q <= 0:
            raise ValueError("notch Q must be positive")
        if not 0 < self.notch_freq < self.fs / 2:
            raise ValueError(f"notch frequency {self.notch_freq} outside (0, fs/2)")
        if not 0 < self.cheby_cutoff < self.fs / 2:
            raise ValueError(f"low-pass cutoff {self.cheby_cutoff} outside (0, fs/2)")


@dataclass(frozen=True)
class WaveletSpec:
    family: str = "db6"
    levels: int = 5
    mode: str = "symmetric"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("wavelet levels must be >= 1")


@dataclass(frozen=True)
class AugmentationSpec:
    shift_max: float = 0.2  # seconds, circular
    flip_prob: float = 0.5
    warp_range: tuple[float, float] = (0.9, 1.1)
    drift_amp_max: float = 0.1
    drift_freq_max: float = 0.3  # Hz
    scale_range: tuple[float, float] = (0.8, 1.2)
    fs: float = FS_DOWN

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        for lo, hi in (self.warp_range, self.scale_range):
            if lo > hi or lo <= 0:
                raise ValueError("ranges must be nonempty and positive")
        if self.shift_max < 0 or self.drift_amp_max < 0 or self.drift_freq_max < 0:
            raise ValueError("magnitudes must be >= 0")

    @classmethod
    def identity(cls, **overrides) -> "AugmentationSpec":
        base = cls(shift_max=0.0, flip_prob=0.0, warp_range=(1.0, 1.0), drift_amp_max=0.0,
                   drift_freq_max=0.0, scale_range=(1.0, 1.0))
        return replace(base, **overrides)


# ---------------------------------------------------------------------------
# windowing


def slice_windows(segment: Segment, fs: int = FS) -> list[Window]:
    """Consecutive non-overlapping 2 s windows; the tail remainder is dropped."""
    size = WINDOW_SECONDS * fs
    label = int(map_aux_to_major(segment.aux_label))
    return [Window(segment.data[:, k * size:(k + 1) * size], label,
                   (segment.subject_id, segment.index, segment.start + k * size), fs)
            for k in range(segment.length // size)]


def downsample2(w: Window | np.ndarray):
    """Keep every second sample from index 0 (odd tails lose the last sample)."""
    if isinstance(w, Window):
        return replace(w, data=downsample2(w.data), fs=w.fs / 2)
    n = w.shape[-1] - w.shape[-1] % 2
    return w[..., :n:2]


def zscore(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    flat = sd < eps
    return np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))


# ---------------------------------------------------------------------------
# filters


def notch_coeffs(spec: FilterSpec) -> tuple[np.ndarray, np.ndarray]:
    return signal.iirnotch(spec.notch_freq, spec.notch_q, fs=spec.fs)


def cheby_coeffs(spec: FilterSpec) -> tuple[np.ndarray, np.ndarray]:
    return signal.cheby1(spec.cheby_order, spec.cheby_ripple, spec.cheby_cutoff,
                         btype="low", fs=spec.fs)


def notch60(x: np.ndarray, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Zero-phase second-order notch."""
    b, a = notch_coeffs(spec)
    return signal.filtfilt(b, a, x, axis=-1)


def cheby_lowpass(x: np.ndarray, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Zero-phase Chebyshev type I low-pass."""
    b, a = cheby_coeffs(spec)
    return signal.filtfilt(b, a, x, axis=-1)


def wavelet_denoise(x: np.ndarray, spec: WaveletSpec = WaveletSpec(),
                    sigma: float | np.ndarray | None = None) -> np.ndarray:
    """Soft universal-threshold shrinkage of every detail level.

    The noise scale defaults to median(|d1|) / 0.6745 of the finest level
    (per channel); pass ``sigma`` to override it, e.g. 0 for a pure round trip.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    wavelet = pywt.Wavelet(spec.family)
    if n < 2 ** spec.levels or pywt.dwt_max_level(n, wavelet.dec_len) < spec.levels:
        raise ValueError(
            f"signal of length {n} shorter than {spec.family} support at level {spec.levels}")
    coeffs = pywt.wavedec(x, wavelet, mode=spec.mode, level=spec.levels, axis=-1)
    if sigma is None:
        sigma = np.median(np.abs(coeffs[-1]), axis=-1, keepdims=True) / 0.6745
    thr = np.asarray(sigma) * np.sqrt(2.0 * np.log(n))
    shrunk = [coeffs[0]] + [np.sign(d) * np.maximum(np.abs(d) - thr, 0.0) for d in coeffs[1:]]
    return pywt.waverec(shrunk, wavelet, mode=spec.mode, axis=-1)[..., :n]


def preprocess_window(w: Window | np.ndarray, spec: FilterSpec = FilterSpec(),
                      wspec: WaveletSpec = WaveletSpec(), label: int | None = None) -> Sample:
    """zscore -> notch -> low-pass -> wavelet, per channel, on a downsampled window."""
    if isinstance(w, Window):
        data, label, sid = w.data, w.label, w.window_id
    else:
        data, sid = w, ""
    if data.shape[0] != len(CHANNELS):
        raise ValueError(f"expected {len(CHANNELS)} channels, got {data.shape[0]}")
    x = zscore(data)
    x = notch60(x, spec)
    x = cheby_lowpass(x, spec)
    x = wavelet_denoise(x, wspec)
    return Sample.from_signals(x, int(label) if label is not None else 0, sid)


# ---------------------------------------------------------------------------
# augmentation


def _warp(x: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Resample each row by its factor (linear), centre-crop or edge-pad to length."""
    c, n = x.shape
    m = np.maximum(np.rint(n * factors).astype(int), 2)
    j = np.arange(n)[None, :]
    i = np.clip(j + ((m - n) // 2)[:, None], 0, (m - 1)[:, None])
    pos = i * ((n - 1) / (m - 1))[:, None]
    lo = np.minimum(np.floor(pos).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    rows = np.arange(c)[:, None]
    out = x[rows, lo] * (1.0 - frac) + x[rows, hi] * frac
    same = m == n
    out[same] = x[same]
    return out


def augment(s: Sample, spec: AugmentationSpec, rng: np.random.Generator) -> Sample:
    """Channel-wise warp, circular shift, drift, scaling and polarity flip."""
    x = s.signals.astype(np.float64)
    c, n = x.shape
    warp = rng.uniform(*spec.warp_range, size=c)
    k = int(round(spec.shift_max * spec.fs))
    shift = rng.integers(-k, k + 1, size=c)
    amp = rng.uniform(0.0, spec.drift_amp_max, size=c)
    freq = rng.uniform(0.0, spec.drift_freq_max, size=c)
    phase = rng.uniform(0.0, 2 * np.pi, size=c)
    scale = rng.uniform(*spec.scale_range, size=c)
    flip = np.where(rng.random(c) < spec.flip_prob, -1.0, 1.0)

    x = _warp(x, warp)
    idx = (np.arange(n)[None, :] - shift[:, None]) % n
    x = np.take_along_axis(x, idx, axis=1)
    t = np.arange(n) / spec.fs
    x = x + amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None, :] + phase[:, None])
    x = x * scale[:, None] * flip[:, None]
    return Sample.from_signals(x, s.label, s.sample_id, augmented=True)


def balance_upsample(train: list[Sample], target: int, spec: AugmentationSpec,
                     seed: int = 0, n_classes: int = 6) -> list[Sample]:
    """Top every class up to ``target`` with augmented copies of random originals.

    Classes already at or above ``target`` are left as they are.  Each copy
    draws from its own (seed, class, copy) stream.
    """
    if target <= 0:
        return list(train)
    by_class: dict[int, list[Sample]] = {}
    for s in train:
        by_class.setdefault(s.label, []).append(s)
    empty = [c for c in range(1, n_classes + 1) if c not in by_class]
    if empty:
        raise ValueError(f"cannot upsample empty classes {empty}")
    out = list(train)
    for label in sorted(by_class):
        pool = by_class[label]
        need = target - len(pool)
        if need <= 0:
            continue
        picks = np.random.default_rng([seed, label]).integers(0, len(pool), size=need)
        for j, p in enumerate(picks):
            aug = augment(pool[p], spec, np.random.default_rng([seed, label, j]))
            aug.sample_id = f"{pool[p].sample_id}~aug{j}"
            out.append(aug)
    return out


# ---------------------------------------------------------------------------
# dataset files


def save_samples(samples: list[Sample], path: str | Path) -> None:
    if not samples:
        raise ValueError("no samples to write")
    ecg_shape, iegm_shape = samples[0].ecg.shape, samples[0].iegm.shape
    for s in samples:
        if s.ecg.shape != ecg_shape or s.iegm.shape != iegm_shape:
            raise ValueError("all samples in a file must share shapes")
        if any(ch in s.sample_id for ch in ",\n\0"):
            raise ValueError(f"sample id {s.sample_id!r} contains a reserved character")
    fields = {
        "format": "samples", "version": 1, "count": len(samples),
        "ecg_shape": ",".join(map(str, ecg_shape)), "iegm_shape": ",".join(map(str, iegm_shape)),
        "dtype": "float32le",
        "labels": ",".join(str(s.label) for s in samples),
        "augmented": ",".join("1" if s.augmented else "0" for s in samples),
        "ids": ",".join(s.sample_id for s in samples),
    }
    payload = b"".join(np.concatenate([s.ecg.ravel(), s.iegm.ravel()]).astype("<f4").tobytes()
                       for s in samples)
    write_file(path, fields, payload)


def load_samples(path: str | Path) -> list[Sample]:
    fields, payload = read_file(path)
    require(fields, "format", "count", "ecg_shape", "iegm_shape", "labels", "ids", "augmented")
    if fields["format"] != "samples":
        raise ContainerError(f"not a samples file: format={fields['format']!r}")
    count = header_int(fields, "count")
    ecg_shape = tuple(int(v) for v in fields["ecg_shape"].split(","))
    iegm_shape = tuple(int(v) for v in fields["iegm_shape"].split(","))
    ne, nm = int(np.prod(ecg_shape)), int(np.prod(iegm_shape))
    flat = payload_array(payload, "<f4", count * (ne + nm)).astype(np.float64)
    flat = flat.reshape(count, ne + nm)
    labels = [int(v) for v in fields["labels"].split(",")]
    ids = fields["ids"].split(",")
    aug = [v == "1" for v in fields["augmented"].split(",")]
    if not (len(labels) == len(ids) == len(aug) == count):
        raise ContainerError("malformed header: per-sample lists disagree with count")
    return [Sample(flat[i, :ne].reshape(ecg_shape), flat[i, ne:].reshape(iegm_shape),
                   labels[i], ids[i], aug[i]) for i in range(count)]


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """-> (ecg [N,12,T], iegm [N,6,T], labels [N])."""
    return (np.stack([s.ecg for s in samples]), np.stack([s.iegm for s in samples]),
            np.array([s.label for s in samples]))

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from pediarr import agcacl as L
from pediarr.dsp import slice_windows
from pediarr.ingest import extract_labeled_segments, load_record, read_annotations
from pediarr.synth import (DEFAULT_CLASSES, HARD_PAIR, ClusterSpec, SynthSpec, cluster_centers,
                           long_tail_counts, make_clusters, make_synth_dataset, synth_window,
                           write_synth_records)

SMALL = SynthSpec(counts=(3, 2, 2, 2, 2, 2), val_counts=(1,) * 6, test_counts=(1,) * 6)


def _peak_hz(x, fs):
    n = 16 * x.size
    f = np.fft.rfftfreq(n, 1 / fs)
    mag = np.abs(np.fft.rfft(x - x.mean(), n))
    band = (f > 0.5) & (f < 5.0)
    return f[band][np.argmax(mag[band])]


def test_long_tail_profile_counts():
    assert long_tail_counts() == (100, 38, 18, 4, 4, 4)
    assert long_tail_counts(minimum=2) == (100, 38, 18, 2, 2, 2)
    assert long_tail_counts(minimum=1) == (100, 38, 18, 1, 1, 1)
    # ordering of the source distribution is preserved
    c = long_tail_counts()
    assert all(a >= b for a, b in zip(c, c[1:]))


def test_fft_peak_separates_base_rates_without_noise():
    spec = SynthSpec(noise=0.0, powerline=0.0)
    rates = {k: DEFAULT_CLASSES[k - 1].rate for k in (1, 2)}
    for k in (1, 2):
        for i in range(15):
            x = synth_window(DEFAULT_CLASSES[k - 1], spec, np.random.default_rng(i))
            peak = _peak_hz(x[0], spec.fs)
            assert min(rates, key=lambda c: abs(rates[c] - peak)) == k


def test_dataset_shapes_labels_and_determinism():
    tr, va, te = make_synth_dataset(SMALL, seed=4)
    assert [len(tr), len(va), len(te)] == [13, 6, 6]
    assert [s.label for s in tr] == [1, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6]
    assert all(s.ecg.shape == (12, 977) and s.iegm.shape == (6, 977) for s in tr)
    again = make_synth_dataset(SMALL, seed=4)
    for a, b in zip(tr + va + te, again[0] + again[1] + again[2]):
        np.testing.assert_array_equal(a.signals, b.signals)
        assert a.sample_id == b.sample_id
    other = make_synth_dataset(SMALL, seed=5)[0]
    assert not np.array_equal(tr[0].signals, other[0].signals)


def test_default_split_counts():
    train, val, test = SynthSpec().split_counts()
    assert train == (100, 38, 18, 4, 4, 4)
    assert min(val) >= 1 and min(test) >= 2


def test_hard_pair_shares_surface_template():
    a, b = (DEFAULT_CLASSES[k - 1] for k in HARD_PAIR)
    assert (a.harmonics, a.spike_width, a.spike_amp, a.biphasic) == \
        (b.harmonics, b.spike_width, b.spike_amp, b.biphasic)
    assert (a.iegm_delay, a.iegm_polarity) != (b.iegm_delay, b.iegm_polarity)


def test_surface_leads_share_template_and_iegm_is_spiky():
    spec = SynthSpec(noise=0.0, powerline=0.0)
    x = synth_window(DEFAULT_CLASSES[0], spec, np.random.default_rng(0))
    ecg, iegm = x[:12], x[12:]
    # every surface lead is a scaled copy of lead I
    ratios = ecg / ecg[0]
    np.testing.assert_allclose(ratios, ratios[:, :1].repeat(x.shape[1], 1), rtol=1e-9, atol=1e-9)
    # narrow spikes: most intracardiac samples sit near zero
    assert np.mean(np.abs(iegm) < 1e-3) > 0.8


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(classes=(DEFAULT_CLASSES[0],) * 6)
    with pytest.raises(ValueError):
        SynthSpec(counts=(1,) * 7)


def test_records_flow_through_ingest(tmp_path):
    spec = replace(SMALL, noise=0.01)
    paths = write_synth_records(spec, tmp_path, seed=1)
    assert len(paths) == 6
    windows = []
    for p in paths:
        rec = load_record(p)
        for seg in extract_labeled_segments(rec, read_annotations(p.with_suffix(".ann"))):
            windows += slice_windows(seg, rec.fs)
    counts = np.bincount([w.label for w in windows], minlength=7)[1:]
    assert list(counts) == [5, 4, 4, 4, 4, 4]
    assert all(w.data.shape == (18, 1954) for w in windows)
    again = write_synth_records(spec, tmp_path / "b", seed=1)
    assert all(a.read_bytes() == b.read_bytes() for a, b in zip(paths, again))


def test_clusters_zero_sigma():
    spec = ClusterSpec(n_classes=3, dim=8, separation=2.0, sigma=0.0, counts=(4, 5, 6),
                       shared=1.0)
    z, labels = make_clusters(spec, seed=0)
    S = L.compute_S(z, labels, 3)
    centers = cluster_centers(spec)
    unit = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-12)
    np.testing.assert_allclose(S, unit @ unit.T, atol=1e-12)


def test_clusters_far_apart_approach_identity():
    gaps = []
    for sep in (1.0, 1e3, 1e6):
        spec = ClusterSpec(n_classes=4, dim=8, separation=sep, sigma=0.1, counts=(5,) * 4)
        z, labels = make_clusters(spec, seed=1)
        gaps.append(np.abs(L.compute_S(z, labels, 4) - np.eye(4)).max())
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-6


def test_clusters_fast_S_matches_brute_force():
    z, labels = make_clusters(ClusterSpec(sigma=0.1), seed=2)
    S = L.compute_S(z, labels, 3)
    u = z / np.linalg.norm(z, axis=1, keepdims=True)
    for a in range(3):
        for b in range(3):
            ia, ib = np.flatnonzero(labels == a + 1), np.flatnonzero(labels == b + 1)
            ref = sum(float(u[i] @ u[j]) for i in ia for j in ib) / (ia.size * ib.size)
            assert abs(S[a, b] - ref) < 1e-10


def test_clusters_deterministic_and_validated():
    a = make_clusters(ClusterSpec(), seed=3)
    b = make_clusters(ClusterSpec(), seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        ClusterSpec(separation=0.0)

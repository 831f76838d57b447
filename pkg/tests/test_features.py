import numpy as np
import pytest
from hypothesis import given, strategies as st

from tnga import features
from tnga.cochlea import EventStream
from tnga.features import FeatureConfig
from tnga.signal import Waveform


def test_frame_count_and_timestamps():
    f = features.log_mel(Waveform(np.random.default_rng(0).normal(0, 0.1, 16000), 16000))
    assert f.frames.shape == (98, 40)
    assert f.timestamps[0] == 12500
    assert np.all(np.diff(f.timestamps) == 10000)


def test_silence_hits_floor():
    f = features.log_mel(Waveform(np.zeros(4000), 16000))
    assert np.all(f.frames == np.log(1e-10))
    assert np.log(1e-10) == pytest.approx(-23.0259, abs=1e-4)


@pytest.mark.parametrize("k", [3, 15, 30])
def test_tone_at_band_center(k):
    fs = 16000
    edges = features.mel_band_edges(40, fs)
    fc = edges[k + 1]
    t = np.arange(fs) / fs
    f = features.log_mel(Waveform(0.5 * np.sin(2 * np.pi * fc * t), fs))
    assert np.argmax(f.frames.mean(axis=0)) == k


def test_too_short():
    with pytest.raises(ValueError, match="shorter"):
        features.log_mel(Waveform(np.zeros(100), 16000))


def test_trailing_partial_hop_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 0.1, 400 + 160 * 97)  # last frame ends exactly at the final sample
    a = features.log_mel(Waveform(x, 16000))
    b = features.log_mel(Waveform(np.r_[x, np.zeros(159)], 16000))
    assert np.array_equal(a.frames, b.frames)


def test_config_tags():
    assert FeatureConfig.parse("10w/10s") == FeatureConfig(10, 10)
    assert FeatureConfig(25, 10).tag == "25w/10s"
    with pytest.raises(ValueError):
        FeatureConfig(5, 10)
    with pytest.raises(ValueError):
        FeatureConfig.parse("junk")


def test_tbsc_example():
    ev = EventStream(np.array([5000, 12000, 30000]), np.array([0, 0, 1]))
    f = features.tbsc(ev, FeatureConfig(25, 10, 64), 60000)
    assert f.frames[0, 0] == 2
    assert f.frames[1, 0] == 1
    assert f.frames[1, 1] == 1
    assert f.frames.shape == (4, 64)
    assert f.timestamps.tolist() == [12500, 22500, 32500, 42500]


def test_tbsc_empty_and_errors():
    f = features.tbsc(EventStream.empty(), FeatureConfig(25, 10), 100000)
    assert not f.frames.any()
    with pytest.raises(ValueError):
        features.tbsc(EventStream(np.array([5, 1]), np.array([0, 0])), FeatureConfig(), 100)
    with pytest.raises(ValueError):
        features.tbsc(EventStream.empty(), FeatureConfig(), -1)


events_strategy = st.lists(st.tuples(st.integers(0, 199999), st.integers(0, 63)), max_size=200)


def _stream(evs):
    evs = sorted(evs)
    return EventStream(np.array([e[0] for e in evs], dtype=np.int64), np.array([e[1] for e in evs], dtype=np.int64))


@given(events_strategy)
def test_tbsc_partition(evs):
    ev = _stream(evs)
    f = features.tbsc(ev, FeatureConfig(10, 10), 200000)
    assert f.frames.sum() == len(ev)


@given(events_strategy)
def test_tbsc_overlap_multiplicity(evs):
    # window = 3 strides: events away from the edges are counted 3 times
    ev = _stream(evs)
    f = features.tbsc(ev, FeatureConfig(30, 10), 200000)
    interior = (ev.t_us >= 20000) & (ev.t_us < 180000)
    inner = EventStream(ev.t_us[interior], ev.channel[interior])
    g = features.tbsc(inner, FeatureConfig(30, 10), 200000)
    assert g.frames.sum() == 3 * len(inner)
    assert np.all(g.frames <= f.frames)


@given(events_strategy)
def test_tbsc_matches_naive_counting(evs):
    ev = _stream(evs)
    cfg = FeatureConfig(25, 10)
    f = features.tbsc(ev, cfg, 200000)
    for j in range(0, len(f), 5):
        lo, hi = j * 10000, j * 10000 + 25000
        sel = (ev.t_us >= lo) & (ev.t_us < hi)
        assert np.array_equal(f.frames[j], np.bincount(ev.channel[sel], minlength=64))


def test_tftr_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    f = features.Features(rng.normal(size=(7, 40)).astype(np.float32), np.arange(7) * 10000 + 12500, FeatureConfig())
    features.write_features(f, tmp_path / "x.tftr")
    data = (tmp_path / "x.tftr").read_bytes()
    assert data[:4] == b"TFTR" and len(data) == 12 + 8 * 7 + 4 * 7 * 40
    back = features.read_features(tmp_path / "x.tftr")
    assert np.array_equal(back.frames, f.frames) and np.array_equal(back.timestamps, f.timestamps)
    (tmp_path / "bad.tftr").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        features.read_features(tmp_path / "bad.tftr")
    (tmp_path / "short.tftr").write_bytes(data[:-4])
    with pytest.raises(ValueError):
        features.read_features(tmp_path / "short.tftr")

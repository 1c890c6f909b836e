import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import frame_starts
from pfml.timeseries import (
    FrameConfig,
    Signal,
    frame_signal,
    frames_for_sequences,
    pad_or_truncate,
    znormalize,
)


def test_eeg_epoch_gives_14_frames():
    sig = Signal(np.zeros((1, 3000)), 100.0)
    seq = frame_signal(sig, FrameConfig(400, 200))
    assert seq.frames.shape == (14, 1, 400)


def test_imu_config_gives_15_frames():
    assert FrameConfig(120, 60).num_frames(1000) == 15
    assert len(frame_starts(1000, 120, 60)) == 15


def test_length_equal_frame_gives_one_frame():
    seq = frame_signal(Signal(np.arange(8.0)[None], 1.0), FrameConfig(8, 3))
    assert seq.frames.shape[0] == 1


def test_short_signal_rejected():
    with pytest.raises(ValueError, match="signal shorter than frame"):
        frame_signal(Signal(np.zeros((1, 5)), 1.0), FrameConfig(8, 4))


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_signal_rejects_nonfinite(bad):
    data = np.zeros((2, 10))
    data[1, 3] = bad
    with pytest.raises(ValueError):
        Signal(data, 10.0)


def test_frame_config_bounds():
    with pytest.raises(ValueError):
        FrameConfig(1, 1)
    with pytest.raises(ValueError):
        FrameConfig(10, 11)
    with pytest.raises(ValueError):
        FrameConfig(10, 0)


@settings(max_examples=60, deadline=None)
@given(length=st.integers(2, 300), n=st.integers(2, 60), hop_frac=st.floats(0.01, 1.0),
       channels=st.integers(1, 3))
def test_frame_count_law_and_slices(length, n, hop_frac, channels):
    if length < n:
        return
    hop = max(1, int(round(hop_frac * n)))
    data = np.random.default_rng(length * 7 + n).standard_normal((channels, length))
    seq = frame_signal(Signal(data, 1.0), FrameConfig(n, hop))
    starts = frame_starts(length, n, hop)
    assert seq.frames.shape == (len(starts), channels, n)
    assert len(starts) == (length - n) // hop + 1
    for i, s in enumerate(starts):
        assert np.array_equal(seq.frames[i], data[:, s:s + n])


def test_znormalize_matches_two_pass_oracle(rng):
    x = rng.normal(3.0, 2.5, size=(3, 500))
    out = znormalize(Signal(x, 1.0)).data
    for c in range(3):
        mu = sum(x[c]) / 500
        sd = (sum((v - mu) ** 2 for v in x[c]) / 500) ** 0.5
        np.testing.assert_allclose(out[c], (x[c] - mu) / sd, rtol=1e-9)


def test_znormalize_constant_channel_becomes_zero():
    x = np.vstack([np.full(50, 5.0), np.arange(50.0)])
    out = znormalize(Signal(x, 1.0)).data
    assert np.all(out[0] == 0.0)
    assert abs(out[1].mean()) < 1e-12 and abs(out[1].std() - 1) < 1e-12


def test_znormalize_idempotent(rng):
    x = rng.standard_normal((2, 300))
    once = znormalize(Signal(x, 1.0))
    twice = znormalize(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


def test_pad_or_truncate():
    x = Signal(np.arange(1.0, 101.0)[None], 1.0)
    assert np.array_equal(pad_or_truncate(x, 100).data, x.data)
    short = Signal(np.arange(1.0, 51.0)[None], 1.0)
    padded = pad_or_truncate(short, 80).data
    assert padded.shape == (1, 80) and np.all(padded[0, 50:] == 0.0)
    long = Signal(np.arange(120.0)[None], 1.0)
    assert np.array_equal(pad_or_truncate(long, 80).data, long.data[:, :80])
    once = pad_or_truncate(short, 80)
    assert np.array_equal(pad_or_truncate(once, 80).data, once.data)


def test_frames_for_sequences_fixed_count(rng):
    sigs = [Signal(rng.standard_normal((2, L)), 10.0) for L in (90, 130, 200)]
    out = frames_for_sequences(sigs, FrameConfig(20, 10), num_frames=12)
    assert out.shape == (3, 12, 2, 20)
    # 90 samples give 8 real frames; the rest come from zero padding
    assert np.all(out[0, 9:] == 0.0)

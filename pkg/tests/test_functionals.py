import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from pfml.functionals import (
    FunctionalId,
    FunctionalSet,
    FunctionalStore,
    apply_normalization,
    compute_acf,
    compute_functionals,
    compute_zcr,
    embed_subset,
    fit_normalization,
    precompute_dataset_functionals,
    read_store,
    write_store,
)
from pfml.timeseries import FrameConfig, Signal, frame_signal

FULL = FunctionalSet()


def random_frame(rng, n):
    kind = rng.integers(6)
    if kind == 0:
        return rng.standard_normal(n)
    if kind == 1:
        return rng.uniform(-5, 5, n)
    if kind == 2:
        return rng.exponential(2.0, n) - 1.0
    if kind == 3:
        return rng.integers(-2, 3, n).astype(float)  # ties and exact zeros
    if kind == 4:
        return np.sin(np.arange(n) * rng.uniform(0.01, 1.0)) * rng.uniform(0.1, 100)
    return rng.standard_t(3, n) * 1e-3 + rng.normal(0, 10)


def oracle_row(x):
    x = [float(v) for v in x]
    if len(set(x)) == 1:
        return [x[0], 0.0, 0.0, 0.0, x[0], x[0], 0.0, 0.0, 0.0, 0.0, 0.0]
    return oracles.functionals(x)


def test_enum_has_stable_codes():
    assert len(FunctionalId) == 11
    assert [int(f) for f in FunctionalId] == list(range(11))
    assert FunctionalId.parse("acf_kurtosis") is FunctionalId.ACF_KURTOSIS
    assert FunctionalId.parse("AcfMean") is FunctionalId.ACF_MEAN
    with pytest.raises(ValueError):
        FunctionalId.parse("entropy")


def test_functional_set_validation():
    with pytest.raises(ValueError):
        FunctionalSet(())
    with pytest.raises(ValueError):
        FunctionalSet(("mean", "mean"))
    assert FunctionalSet(("zcr", "max")).names() == ["zcr", "max"]


def test_zcr_hand_cases():
    assert compute_zcr(np.array([1.0, -1.0, 1.0, -1.0])) == 2.0
    assert compute_zcr(np.array([0.5, 2.0, 3.0])) == 0.0
    # sgn(0) = 0 gives half crossings
    assert compute_zcr(np.array([1.0, 0.0, -1.0])) == 1.0
    with pytest.raises(ValueError):
        compute_zcr(np.array([1.0]))


def test_zcr_matches_pairwise_sum_exactly(rng):
    for _ in range(50):
        x = rng.choice([-1.0, 0.0, 1.0], size=rng.integers(2, 40))
        x = [float(v) for v in x]
        assert compute_zcr(np.array(x)) == oracles.zcr(x)


def test_acf_lag_zero_and_hand_case():
    acf = compute_acf(np.array([1.0, 2.0, 3.0, 4.0]))
    assert acf[0] == 1.0
    assert math.isclose(acf[1], 1 / 3, rel_tol=1e-12)
    with pytest.raises(ValueError, match="constant"):
        compute_acf(np.full(10, 2.0))


def test_acf_matches_direct_sum(rng):
    for n in (2, 3, 17, 64, 129):
        x = rng.standard_normal(n)
        np.testing.assert_allclose(compute_acf(x), oracles.acf(list(x)), rtol=1e-9, atol=1e-12)


def test_white_noise_acf_near_zero(rng):
    n = 4096
    acf = compute_acf(rng.standard_normal(n))
    assert np.all(np.abs(acf[1:50]) < 4 / math.sqrt(n))


def test_all_functionals_match_naive_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 513))
        x = random_frame(rng, n)
        got = compute_functionals(x[None], FULL)
        want = oracle_row(x)
        for fid, g, w in zip(FunctionalId, got, want):
            assert oracles.close(g, w), f"{fid.name}: {g} vs {w} (n={n})"


def test_constant_frame_conventions():
    v = compute_functionals(np.full((1, 32), 5.0), FULL)
    assert v.tolist() == [5.0, 0.0, 0.0, 0.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0]


def test_gaussian_skew_kurtosis(rng):
    n = 100_000
    v = compute_functionals(rng.standard_normal((1, n)), FunctionalSet(("skewness", "kurtosis")))
    assert abs(v[0]) < 4 * math.sqrt(6 / n)
    assert abs(v[1] - 3.0) < 4 * math.sqrt(24 / n)


def test_layout_is_functional_major(rng):
    frames = rng.standard_normal((2, 16))
    v = compute_functionals(frames, FunctionalSet(("mean", "max")))
    assert np.allclose(v, [frames[0].mean(), frames[1].mean(), frames[0].max(), frames[1].max()])


def test_include_lag0_flag(rng):
    x = rng.standard_normal(40)
    with0 = compute_functionals(x[None], FunctionalSet(("acf_mean",), include_lag0=True))
    assert oracles.close(with0[0], oracles.functionals(list(x), include_lag0=True)[7])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 64), elements=st.floats(-1e3, 1e3)))
def test_value_ranges(x):
    v = compute_functionals(x[None], FULL)
    mean, var, skew, kurt, mn, mx, zcr = v[:7]
    assert 0.0 <= zcr <= 2.0
    assert var >= 0.0
    assert mn <= mean <= mx
    assert np.all(np.isfinite(v))
    if var > 1e-6 * max(1.0, np.abs(x).max()) ** 2:
        assert kurt >= skew**2 + 1 - 1e-9


def test_targets_vary_across_distinct_frames(rng):
    frames = rng.standard_normal((20, 1, 32)) * rng.uniform(0.5, 2, (20, 1, 1))
    v = compute_functionals(frames, FULL)
    assert v.var(axis=0).max() > 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(list(FunctionalId)), min_size=1, max_size=11, unique=True),
       st.integers(0, 10_000))
def test_subset_embeds_into_full_layout(ids, seed):
    frames = np.random.default_rng(seed).standard_normal((5, 3, 24))
    full = compute_functionals(frames, FULL)
    sub = FunctionalSet(tuple(ids))
    emb = embed_subset(compute_functionals(frames, sub), sub, FULL)
    keep = ~np.isnan(emb)
    assert keep.sum() == 5 * 3 * len(ids)
    np.testing.assert_array_equal(emb[keep], full[keep])


def test_normalization_fit_apply(rng):
    v = rng.normal(3, 2, size=(500, 6))
    stats = fit_normalization(v)
    z = apply_normalization(v, stats)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(z.var(axis=0) - 1) < 1e-6)
    held = rng.normal(size=6)
    np.testing.assert_allclose(apply_normalization(held, stats), (held - v.mean(0)) / v.std(0))


def test_normalization_constant_coordinate():
    v = np.tile([1.0, 2.0], (10, 1))
    stats = fit_normalization(v)
    assert np.all(stats.std == 0)
    assert np.all(apply_normalization(v, stats) == 0)
    with pytest.raises(ValueError):
        fit_normalization(v[:1])


def _dataset(rng, count=6):
    cfg = FrameConfig(32, 16)
    seqs = [frame_signal(Signal(rng.standard_normal((2, int(rng.integers(64, 200)))), 10.0), cfg)
            for _ in range(count)]
    return seqs


def test_precompute_rows_deterministic_and_spot_checked(rng, tmp_path):
    seqs = _dataset(rng)
    a = precompute_dataset_functionals([s.frames for s in seqs], FULL, normalize=False)
    b = precompute_dataset_functionals([s.frames for s in seqs], FULL, normalize=False)
    assert np.array_equal(a.rows, b.rows)
    assert a.rows.shape[0] == sum(FrameConfig(32, 16).num_frames(s.frames.shape[0] * 16 + 16)
                                  for s in seqs) == sum(len(s.frames) for s in seqs)
    flat = np.concatenate([s.frames for s in seqs])
    for r in rng.choice(len(flat), size=20, replace=False):
        for c in range(2):
            want = np.array(oracle_row(flat[r, c]))
            got = a.rows[r].reshape(11, 2)[:, c]
            # store rows are float32
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


def test_store_roundtrip(rng, tmp_path):
    seqs = _dataset(rng)
    store = precompute_dataset_functionals([s.frames for s in seqs], FunctionalSet(("zcr", "mean")))
    write_store(tmp_path / "f.pffn", store)
    back = read_store(tmp_path / "f.pffn")
    assert back.fset == store.fset and back.channels == 2
    assert np.array_equal(back.rows, store.rows)
    assert np.array_equal(back.frame_counts, store.frame_counts)
    np.testing.assert_array_equal(back.stats.mean, store.stats.mean)
    assert np.array_equal(back.sequence(1), store.sequence(1))
    raw = (tmp_path / "f.pffn").read_bytes()
    assert raw[:4] == b"PFFN"
    write_store(tmp_path / "g.pffn", back)
    assert (tmp_path / "g.pffn").read_bytes() == raw


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_store_rejects_damage(rng, tmp_path, damage):
    store = precompute_dataset_functionals([s.frames for s in _dataset(rng, 2)], FULL)
    write_store(tmp_path / "f.pffn", store)
    raw = (tmp_path / "f.pffn").read_bytes()
    raw = {"magic": b"XXXX" + raw[4:], "truncate": raw[:-3], "trailing": raw + b"\0"}[damage]
    (tmp_path / "f.pffn").write_bytes(raw)
    with pytest.raises(ValueError):
        read_store(tmp_path / "f.pffn")


def test_precompute_error_names_sequence(rng):
    good = rng.standard_normal((3, 2, 16))
    bad = rng.standard_normal((3, 1, 16))
    with pytest.raises(ValueError, match="seq-b"):
        precompute_dataset_functionals([good, bad], FULL, ids=["seq-a", "seq-b"])

"""Segmentation, synthesis, splitting and the binary dataset container."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radarllm import data
from radarllm.data import (
    Dataset,
    EchoSeries,
    Label,
    ObservationVector,
    SceneParams,
    build_dataset,
    read_dataset,
    segment_echoes,
    split_dataset,
    synthesize_scene,
    write_dataset,
)
from radarllm.errors import (
    EmptyInputError,
    FormatError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)


def _series(n, kind=Label.TARGET, seed=0):
    rng = np.random.default_rng(seed)
    return EchoSeries(rng.standard_normal(n) + 1j * rng.standard_normal(n), 1000.0, kind)


def _brute_force_offsets(length, N, M):
    return [s for s in range(0, length) if s % M == 0 and s + N <= length]


# -- segmentation ------------------------------------------------------------------


def test_segment_small_example_offsets():
    s = EchoSeries(np.arange(10, dtype=float), 1.0, Label.CLUTTER)
    vs = segment_echoes(s, 4, 2)
    assert [v.values[0].real for v in vs] == [0, 2, 4, 6]
    assert [v.time_index for v in vs] == [1, 2, 3, 4]
    assert all(v.label == Label.CLUTTER for v in vs)


def test_segment_exact_length_gives_one_vector():
    assert len(segment_echoes(_series(512), 512, 32)) == 1


def test_segment_long_series_matches_offset_enumeration():
    s = EchoSeries(np.zeros(131072, dtype=complex), 1000.0, Label.TARGET)
    vs = segment_echoes(s, 512, 32)
    assert len(vs) == len(_brute_force_offsets(131072, 512, 32)) == 4081


def test_segment_short_series_rejected():
    with pytest.raises(EmptyInputError):
        segment_echoes(_series(10), 11, 1)


@pytest.mark.parametrize("N,M", [(0, 1), (4, 0)])
def test_segment_bad_parameters(N, M):
    with pytest.raises(ValidationError):
        segment_echoes(_series(16), N, M)


@settings(max_examples=60, deadline=None)
@given(length=st.integers(1, 300), N=st.integers(1, 64), M=st.integers(1, 80))
def test_segment_windows_match_direct_slicing(length, N, M):
    if length < N:
        return
    s = _series(length)
    vs = segment_echoes(s, N, M, id_offset=5)
    offsets = _brute_force_offsets(length, N, M)
    assert len(vs) == (length - N) // M + 1 == len(offsets)
    for v, off in zip(vs, offsets):
        assert np.array_equal(v.values, s.samples[off : off + N])
    assert [v.sample_id for v in vs] == list(range(5, 5 + len(vs)))
    # consecutive windows overlap in exactly max(N - M, 0) samples
    if len(vs) > 1 and M < N:
        assert np.array_equal(vs[0].values[M:], vs[1].values[: N - M])


# -- synthesis ------------------------------------------------------------------------


def test_clutter_free_target_has_constant_modulus():
    tgt, clt = synthesize_scene(SceneParams(n_pulses=2048, clutter_power=0.0, target_amplitude=2.0, doppler_jitter_hz=5.0))
    np.testing.assert_allclose(np.abs(tgt.samples), 2.0, atol=1e-12)
    assert np.all(clt.samples == 0)


def test_synthesis_is_deterministic():
    p = SceneParams(n_pulses=4096, seed=123, speckle_bandwidth_hz=40.0)
    a, b = synthesize_scene(p), synthesize_scene(p)
    assert a[0] == b[0] and a[1] == b[1]
    c = synthesize_scene(SceneParams(n_pulses=4096, seed=124, speckle_bandwidth_hz=40.0))
    assert not np.array_equal(a[1].samples, c[1].samples)


@pytest.mark.parametrize("bandwidth", [0.0, 50.0])
def test_k_distribution_intensity_moments(bandwidth):
    # intensity z = |c|^2 of K clutter: E[z] = P, E[z^2] / E[z]^2 = 2 (1 + 1/nu)
    nu = 0.5
    p = SceneParams(n_pulses=100_000, clutter_shape_nu=nu, clutter_power=1.0, texture_coherence=1,
                    speckle_bandwidth_hz=bandwidth, seed=7)
    _, clt = synthesize_scene(p)
    z = np.abs(clt.samples) ** 2
    assert abs(z.mean() - 1.0) < 0.05
    assert abs((z**2).mean() / z.mean() ** 2 - 2 * (1 + 1 / nu)) < 0.1 * 6


def test_scr_sets_target_amplitude():
    p = SceneParams(scr_db=-5.0, clutter_power=2.0)
    assert data.target_amplitude_for(p) == pytest.approx(math.sqrt(2.0 * 10 ** -0.5))
    tgt, _ = synthesize_scene(SceneParams(n_pulses=1024, scr_db=6.0, clutter_power=0.0 + 1e-300))
    assert np.isfinite(tgt.samples).all()


def test_target_doppler_is_where_requested():
    p = SceneParams(n_pulses=4096, clutter_power=1e-12, target_amplitude=1.0, target_doppler_hz=125.0)
    tgt, _ = synthesize_scene(p)
    freqs = np.fft.fftfreq(4096, d=1 / p.prf_hz)
    assert freqs[np.argmax(np.abs(np.fft.fft(tgt.samples)))] == pytest.approx(125.0, abs=0.5)


def test_target_phase_is_continuous_across_doppler_blocks():
    p = SceneParams(n_pulses=2048, clutter_power=0.0, target_amplitude=1.0, doppler_jitter_hz=30.0, doppler_block=256)
    tgt, _ = synthesize_scene(p)
    step = np.angle(tgt.samples[1:] / tgt.samples[:-1])
    # largest per-pulse phase increment is bounded by the largest Doppler, never a jump
    assert np.max(np.abs(step)) < 2 * math.pi * 250 / p.prf_hz


@pytest.mark.parametrize(
    "kw",
    [
        {"clutter_shape_nu": 0.0},
        {"target_doppler_hz": 500.0},
        {"prf_hz": float("nan")},
        {"scr_db": float("inf")},
        {"doppler_jitter_hz": -1.0},
        {"n_pulses": 0},
    ],
)
def test_invalid_scene_params(kw):
    with pytest.raises(ValidationError):
        synthesize_scene(SceneParams(**kw))


# -- split -------------------------------------------------------------------------------


def _vectors(n, label=Label.CLUTTER, offset=0):
    return [ObservationVector(np.zeros(4, complex), label, offset + i, i + 1) for i in range(n)]


def test_split_sizes_and_order():
    tr, va, te = split_dataset(_vectors(100), 0.5, 0.25)
    assert (len(tr), len(va), len(te)) == (50, 25, 25)
    assert max(v.time_index for v in tr) < min(v.time_index for v in va)
    assert max(v.time_index for v in va) < min(v.time_index for v in te)


@pytest.mark.parametrize("fracs,bounds", [((0.20, 0.15), (20, 35)), ((0.10, 0.05), (10, 15))])
def test_split_protocol_boundaries(fracs, bounds):
    tr, va, te = split_dataset(_vectors(100), *fracs)
    assert max(v.time_index for v in tr) == bounds[0]
    assert max(v.time_index for v in va) == bounds[1]
    assert len(tr) + len(va) + len(te) == 100


def test_split_is_per_label_group():
    vs = _vectors(100, Label.TARGET) + _vectors(20, Label.CLUTTER, offset=100)
    tr, va, te = split_dataset(vs, 0.5, 0.25)
    assert sum(v.label == Label.CLUTTER for v in tr) == 10
    assert sum(v.label == Label.TARGET for v in tr) == 50


def test_split_errors():
    with pytest.raises(EmptyInputError):
        split_dataset([], 0.2, 0.1)
    with pytest.raises(ValidationError):
        split_dataset(_vectors(10), 0.6, 0.5)


# -- container ---------------------------------------------------------------------------


def _dataset(n=3, N=8, seed=0):
    rng = np.random.default_rng(seed)
    vs = [
        ObservationVector(rng.standard_normal(N) + 1j * rng.standard_normal(N), Label(i % 2), i, i + 1)
        for i in range(n)
    ]
    return Dataset(vs, 1000.0)


def test_round_trip(tmp_path):
    ds = _dataset()
    write_dataset(tmp_path / "d.rllm", ds)
    assert read_dataset(tmp_path / "d.rllm") == ds


def test_round_trip_large_checksum(tmp_path):
    ds = _dataset(n=10_000, N=16, seed=3)
    write_dataset(tmp_path / "d.rllm", ds)
    assert data.dataset_checksum(read_dataset(tmp_path / "d.rllm")) == data.dataset_checksum(ds)


def test_round_trip_preserves_special_floats(tmp_path):
    vals = np.array([0.0, -0.0, 1e-310, np.inf]) + 1j * np.array([np.nan, 1.0, -1e308, 0.0])
    ds = Dataset([ObservationVector(vals, Label.TARGET, 9, 1)], 50.0)
    write_dataset(tmp_path / "d.rllm", ds)
    assert read_dataset(tmp_path / "d.rllm") == ds


def test_header_layout(tmp_path):
    ds = _dataset(n=2, N=8)
    write_dataset(tmp_path / "d.rllm", ds)
    raw = (tmp_path / "d.rllm").read_bytes()
    magic, version, N, count, prf = struct.unpack_from("<4sHIId", raw)
    assert (magic, version, N, count, prf) == (b"RLLM", 1, 8, 2, 1000.0)
    sid, label, t = struct.unpack_from("<QBI", raw, 22)
    assert (sid, label, t) == (0, 0, 1)
    re0, im0 = struct.unpack_from("<dd", raw, 22 + 13)
    assert complex(re0, im0) == ds.vectors[0].values[0]
    assert len(raw) == 22 + 2 * (13 + 16 * 8)


def test_file_errors_are_distinct(tmp_path):
    ds = _dataset()
    p = tmp_path / "d.rllm"
    write_dataset(p, ds)
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<H", 2) + raw[6:])
    (tmp_path / "trunc").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "magic")
    with pytest.raises(VersionError):
        read_dataset(tmp_path / "ver")
    with pytest.raises(TruncatedFileError):
        read_dataset(tmp_path / "trunc")


def test_echo_series_round_trip(tmp_path):
    series = [_series(64, Label.TARGET, 0), _series(64, Label.CLUTTER, 1)]
    series[1].cell_id = 4
    data.write_echoes(tmp_path / "e.rllm", series)
    back = data.read_echoes(tmp_path / "e.rllm")
    assert back == series
    assert back[0].source == data.Source.INGESTED


def test_csv_round_trip(tmp_path):
    ds = _dataset()
    data.write_csv(tmp_path / "d.csv", ds)
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["id", "label", "time_index", "re_0", "im_0"]
    assert data.read_csv(tmp_path / "d.csv", 1000.0) == ds


def test_echo_csv_ingest(tmp_path):
    np.savetxt(tmp_path / "e.csv", np.array([[1.0, 2.0], [3.0, -4.0]]), delimiter=",")
    s = data.load_echo_csv(tmp_path / "e.csv", 1000.0, Label.CLUTTER, cell_id=3)
    assert np.array_equal(s.samples, [1 + 2j, 3 - 4j]) and s.cell_id == 3
    np.savetxt(tmp_path / "bad.csv", np.ones((2, 3)), delimiter=",")
    with pytest.raises(FormatError):
        data.load_echo_csv(tmp_path / "bad.csv", 1000.0, Label.CLUTTER)


def test_build_dataset_uses_step_per_cell_kind():
    ds = build_dataset([_series(1024, Label.TARGET), _series(1024, Label.CLUTTER)], 512, 32, 128)
    assert len(ds.by_label(Label.TARGET)) == (1024 - 512) // 32 + 1
    assert len(ds.by_label(Label.CLUTTER)) == (1024 - 512) // 128 + 1
    assert [v.sample_id for v in ds.vectors] == list(range(len(ds)))


def test_dataset_rejects_duplicates_and_mixed_lengths():
    v = ObservationVector(np.zeros(4, complex), Label.TARGET, 1, 1)
    with pytest.raises(ValidationError):
        Dataset([v, v], 1.0)
    with pytest.raises(ValidationError):
        Dataset([v, ObservationVector(np.zeros(5, complex), Label.TARGET, 2, 1)], 1.0)

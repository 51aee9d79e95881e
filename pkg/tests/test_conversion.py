import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsvc.conversion import (
    DEFAULT_RANGES,
    BaselinePulse,
    ConversionError,
    ConversionProvider,
    SpeakerProfile,
    TriggerAssignment,
    apply_profile,
    baseline_pulse,
    load_pool,
    make_profile_pool,
    pair_triggers,
    pitch_shift,
    save_pool,
    trigger_from_json,
)
from vsvc.dataset import write_wav

from .conftest import sine, utt

VC_BIN_HZ = 16000 / 512


def _peak_hz(x):
    # long-window FFT: 1 Hz resolution over a one-second clip
    mag = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return float(np.argmax(mag)) * 16000 / len(x)


def test_identity_profile_is_near_lossless():
    x = 0.5 * sine(440.0) + 0.1 * np.random.default_rng(0).uniform(-1, 1, 16000)
    y = apply_profile(utt(x), SpeakerProfile("id")).samples
    assert np.max(np.abs(y - x)) <= 1e-3


def test_pitch_up_two_semitones():
    y = apply_profile(utt(0.5 * sine(440.0)), SpeakerProfile("p", pitch_semitones=2.0)).samples
    assert abs(_peak_hz(y) - 440 * 2 ** (2 / 12)) <= VC_BIN_HZ


def test_warp_scales_frequency():
    y = apply_profile(utt(0.5 * sine(2000.0)), SpeakerProfile("w", warp_alpha=1.1)).samples
    assert abs(_peak_hz(y) - 2200.0) <= VC_BIN_HZ


def test_tilt_changes_balance():
    x = 0.3 * sine(300.0) + 0.3 * sine(4000.0)
    y = apply_profile(utt(x), SpeakerProfile("t", tilt_db_per_octave=6.0)).samples
    mag = np.abs(np.fft.rfft(y))
    mag0 = np.abs(np.fft.rfft(x))
    assert mag[4000] / mag[300] > 10 * mag0[4000] / mag0[300]


def test_pitch_shift_keeps_length():
    x = sine(200.0)
    for s in (-4.0, -1.5, 0.0, 3.0, 4.0):
        assert pitch_shift(x, s).shape == x.shape


@settings(max_examples=15, deadline=None)
@given(st.floats(*DEFAULT_RANGES["pitch_semitones"]), st.floats(*DEFAULT_RANGES["warp_alpha"]),
       st.floats(*DEFAULT_RANGES["tilt_db_per_octave"]))
def test_profile_output_contract(pitch, warp, tilt):
    x = 0.4 * sine(180.0) + 0.2 * sine(1200.0)
    u = utt(x, uid="yes/a_nohash_0", label="yes", speaker="a")
    out = apply_profile(u, SpeakerProfile("h", pitch, warp, tilt))
    assert out.num_samples == 16000
    assert np.max(np.abs(out.samples)) <= 1.0
    assert np.isclose(np.max(np.abs(out.samples)), np.max(np.abs(x)))
    assert (out.id, out.label, out.speaker_id) == (u.id, u.label, u.speaker_id)


def test_silence_passes_through():
    u = utt(np.zeros(16000))
    assert not np.any(apply_profile(u, SpeakerProfile("s", 3.0, 1.1, 4.0)).samples)


def test_deterministic_conversion():
    u = utt(np.random.default_rng(4).uniform(-0.5, 0.5, 16000))
    p = SpeakerProfile("d", -2.0, 0.9, -3.0)
    assert np.array_equal(apply_profile(u, p).samples, apply_profile(u, p).samples)


def test_wrong_length_rejected():
    with pytest.raises(ConversionError):
        apply_profile(utt(np.zeros(100)), SpeakerProfile("x"))


def test_profile_out_of_range():
    with pytest.raises(ConversionError, match="warp_alpha"):
        SpeakerProfile("x", warp_alpha=1.5)


def test_pulse_modifies_exact_span():
    u = utt(np.zeros(16000))
    y = baseline_pulse(u).samples
    assert np.count_nonzero(y) == 1600
    assert not np.any(y[1600:])
    assert np.max(np.abs(y)) <= 0.1 + 1e-12
    assert round(_peak_hz(np.concatenate([y[:1600], np.zeros(14400)]))) == 7500


def test_pulse_zero_duration_is_identity():
    x = sine(300.0, 0.3)
    assert np.array_equal(baseline_pulse(utt(x), duration_ms=0.0).samples, x)


def test_pulse_rejects_nyquist():
    with pytest.raises(ConversionError, match="Nyquist"):
        BaselinePulse(freq=8000.0)


def test_pulse_clips():
    y = baseline_pulse(utt(np.full(16000, 0.99))).samples
    assert np.max(y) <= 1.0


def test_pool_ids_and_ranges():
    pool = make_profile_pool(109, seed=0)
    ids = [p.id for p in pool]
    assert len(set(ids)) == 109 and ids[0] == "P000" and ids[-1] == "P108"
    params = {(p.pitch_semitones, p.warp_alpha, p.tilt_db_per_octave) for p in pool}
    assert len(params) == 109
    for p in pool:
        for name, (lo, hi) in DEFAULT_RANGES.items():
            assert lo <= getattr(p, name) <= hi
    assert make_profile_pool(109, seed=0) == pool
    assert make_profile_pool(109, seed=1) != pool


def test_pool_custom_ranges_and_errors():
    pool = make_profile_pool(5, 0, {"pitch_semitones": (3, 4), "warp_alpha": (1, 1), "tilt_db_per_octave": (0, 0)})
    assert all(3 <= p.pitch_semitones <= 4 and p.warp_alpha == 1 for p in pool)
    with pytest.raises(ConversionError):
        make_profile_pool(0, 0)
    with pytest.raises(ConversionError, match="empty range"):
        make_profile_pool(2, 0, {**DEFAULT_RANGES, "warp_alpha": (1.1, 0.9)})


def test_pool_file_roundtrip(tmp_path):
    pool = make_profile_pool(4, seed=2)
    save_pool(tmp_path / "pool.json", pool)
    assert load_pool(tmp_path / "pool.json") == pool


def test_trigger_json_roundtrip():
    for t in (SpeakerProfile("P001", 1.0, 0.9, -2.0), BaselinePulse()):
        assert trigger_from_json(t.to_json()) == t


def test_pairing():
    pool = make_profile_pool(3, 0)
    a = pair_triggers(pool[:2], ["yes", "no"])
    assert a.targets == ["yes", "no"] and a.trigger_for("no") == pool[1]
    assert TriggerAssignment.from_json(a.to_json()) == a
    with pytest.raises(ConversionError, match="2 target labels but 3"):
        pair_triggers(pool, ["yes", "no"])
    with pytest.raises(ConversionError, match="reused"):
        pair_triggers([pool[0], pool[0]], ["yes", "no"])
    with pytest.raises(ConversionError, match="duplicate"):
        pair_triggers(pool[:2], ["yes", "yes"])


def test_external_provider(tmp_path):
    p = SpeakerProfile("P007")
    u = utt(sine(500.0, 0.2), uid="yes/a_nohash_0", label="yes", speaker="a")
    prov = ConversionProvider("external_dir", str(tmp_path))
    with pytest.raises(ConversionError, match="missing pre-converted file") as info:
        prov.convert(u, p)
    assert str((tmp_path / "P007" / "yes" / "a_nohash_0.wav").resolve()) in str(info.value)
    target = prov.expected_path(u.id, p)
    target.parent.mkdir(parents=True)
    write_wav(target, u.with_samples(sine(900.0, 0.25)))
    got = prov.convert(u, p)
    assert (got.id, got.label) == (u.id, u.label)
    assert abs(_peak_hz(got.samples) - 900) <= 1


def test_provider_validation():
    with pytest.raises(ConversionError):
        ConversionProvider("magic")
    with pytest.raises(ConversionError):
        ConversionProvider("external_dir")


def test_parametric_provider_dispatch():
    u = utt(np.zeros(16000))
    prov = ConversionProvider()
    assert np.count_nonzero(prov.convert(u, BaselinePulse()).samples) == 1600
    assert not np.any(prov.convert(u, SpeakerProfile("x", 1.0)).samples)

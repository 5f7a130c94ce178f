import itertools
import json

import numpy as np
import pytest
from scipy.signal import coherence

from asyncmic import dsp, scene
from asyncmic.scene import (MicSpec, RoomSpec, SceneDistribution, SceneSpec, SpeakerSpec,
                            TargetStrategy)

FS = 16000


def small_spec(**kw):
    base = dict(
        room=RoomSpec((5.0, 4.0, 3.0), 0.5, 2),
        speakers=[SpeakerSpec((1.0, 1.0, 1.5)), SpeakerSpec((4.0, 3.0, 1.5), "ssn")],
        mics=[MicSpec((1.5, 1.2, 1.2), 0.010, 1.0), MicSpec((3.5, 2.8, 1.2), -0.005, 1.00003)],
        snr_db=10.0, duration_s=1.0, n_noise_sources=4, seed=11)
    base.update(kw)
    return SceneSpec(**base)


# -- image-source RIR ---------------------------------------------------------


def brute_force_images(room, src, mic, order):
    """Independent enumeration over every (n, q) combination per axis."""
    L = np.asarray(room.dims, float)
    s = np.asarray(src, float)
    out = []
    rng = range(-order - 1, order + 2)
    for n in itertools.product(rng, rng, rng):
        for q in itertools.product((0, 1), repeat=3):
            refl = sum(abs(n[a] - q[a]) + abs(n[a]) for a in range(3))
            if refl > order:
                continue
            pos = np.array([(1 - 2 * q[a]) * s[a] + 2 * n[a] * L[a] for a in range(3)])
            d = np.linalg.norm(pos - mic)
            out.append((d / 343.0 * room.sample_rate_hz, room.reflection_coeff ** refl / d))
    out.sort()
    return np.array(out)


def test_rir_matches_brute_force_enumeration():
    room = RoomSpec((4.0, 5.0, 3.0), 0.7, 2)
    src, mic = (1.1, 3.2, 1.4), (2.9, 1.3, 1.7)
    delay, amp, _ = scene.image_sources(room, src, mic)
    ref = brute_force_images(room, src, mic, 2)
    assert len(delay) == len(ref)
    order = np.lexsort((amp, delay))
    assert np.array_equal(np.floor(delay[order]), np.floor(ref[:, 0]))
    assert np.max(np.abs(delay[order] - ref[:, 0]) / ref[:, 0]) <= 1e-12
    assert np.max(np.abs(amp[order] - ref[:, 1]) / ref[:, 1]) <= 1e-9


def test_rir_order0_single_tap():
    room = RoomSpec((8.0, 5.0, 3.0), 0.6, 0)
    h = scene.generate_rir(room, (1.0, 2.0, 1.5), (4.43, 2.0, 1.5))
    p = int(np.argmax(np.abs(h)))
    assert p == round(3.43 / 343 * 16000) == 160
    assert h[p] == pytest.approx(1 / 3.43, rel=1e-9)
    assert np.sum(np.abs(h) > 1e-6 * h[p]) <= 1 or np.abs(h[p]) > 0.99 * np.sum(np.abs(h))


def test_rir_energy_decays_with_order():
    room = RoomSpec((5.0, 4.0, 3.0), 0.6, 4)
    _, amp, refl = scene.image_sources(room, (1, 1, 1), (3, 2, 2))
    energy = [np.sum(amp[refl == k] ** 2) for k in range(5)]
    # per-image energy shrinks by beta^2 per reflection
    per_image = [energy[k] / np.sum(refl == k) for k in range(5)]
    assert all(a > b for a, b in zip(per_image, per_image[1:]))


def test_rir_geometry_errors():
    room = RoomSpec()
    with pytest.raises(scene.GeometryError):
        scene.generate_rir(room, (1, 1, 1), (1, 1, 1))
    with pytest.raises(scene.GeometryError):
        scene.generate_rir(room, (1, 1, 1), (6, 1, 1))


def test_room_validation():
    with pytest.raises(scene.GeometryError):
        RoomSpec((1.0, 4.0, 3.0)).validate()
    with pytest.raises(scene.ConfigError):
        RoomSpec(reflection_coeff=1.0).validate()


# -- direct path --------------------------------------------------------------


def test_direct_path_single_tap_identity():
    h = np.zeros(100)
    h[40] = 0.3
    assert np.array_equal(scene.direct_path(h), h)


def test_direct_path_drops_late_tap():
    h = np.zeros(200)
    h[50], h[50 + 40] = 1.0, 0.5
    out = scene.direct_path(h)
    assert out[50] == 1.0 and out[90] == 0.0


def test_direct_path_energy_matches_order0():
    room2 = RoomSpec((5.0, 4.0, 3.0), 0.6, 2)
    room0 = RoomSpec((5.0, 4.0, 3.0), 0.6, 0)
    src, mic = (1.0, 1.5, 1.2), (2.0, 2.0, 1.4)
    d = scene.direct_path(scene.generate_rir(room2, src, mic))
    h0 = scene.generate_rir(room0, src, mic)
    ratio = np.sum(d ** 2) / np.sum(h0 ** 2)
    assert 0.9 <= ratio <= 1.1


def test_direct_path_zero_error():
    with pytest.raises(dsp.SignalError):
        scene.direct_path(np.zeros(10))


# -- asynchrony ---------------------------------------------------------------


def test_apply_async_identity():
    x = np.random.default_rng(0).standard_normal(1000)
    y = scene.apply_async(x, 1.0, 0.0)
    assert np.sqrt(np.mean((x - y) ** 2)) < 1e-6


def test_apply_async_pure_delay():
    x = np.zeros(4000)
    x[1000] = 1.0
    y = scene.apply_async(x, 1.0, 0.010)
    assert int(np.argmax(y)) == 1160 and len(y) == len(x)


def test_apply_async_negative_tau_advances_with_zero_fill():
    x = np.ones(1000)
    y = scene.apply_async(x, 1.0, -0.005)
    assert np.all(y[-80:] == 0) and np.allclose(y[:800], 1.0)


def test_apply_async_drift_lag():
    t = np.arange(FS + 2000) / FS
    x = np.sin(2 * np.pi * 440 * t) + 0.5 * np.sin(2 * np.pi * 97 * t)
    y = scene.apply_async(x, 1.001, 0.0)
    w = slice(FS - 1600, FS)
    r = dsp.xcorr_align(x[w], y[w], 40)
    assert abs(abs(r.lag) - 16) <= 2


def test_apply_async_bad_gamma():
    with pytest.raises(scene.ConfigError):
        scene.apply_async(np.ones(10), 0.0)


# -- diffuse noise ------------------------------------------------------------


def test_diffuse_noise_colocated_identical():
    room = RoomSpec((5.0, 4.0, 3.0), 0.5, 2)
    n = scene.make_diffuse_noise(room, [(2, 2, 1.5), (2, 2, 1.5)], 1, np.random.default_rng(0), 4000)
    assert np.array_equal(n[0], n[1])


def test_diffuse_noise_needs_sources():
    with pytest.raises(scene.ConfigError):
        scene.make_diffuse_noise(RoomSpec(), [(2, 2, 1.5)], 0, np.random.default_rng(0), 100)


def test_diffuse_noise_low_coherence_far_apart():
    room = RoomSpec((6.0, 5.0, 3.0), 0.6, 3)
    n = scene.make_diffuse_noise(room, [(2.0, 2.5, 1.5), (4.0, 2.5, 1.5)], 64,
                                 np.random.default_rng(1), 2 * FS)
    f, C = coherence(n[0], n[1], fs=FS, nperseg=512)
    assert np.mean(C[f > 4000]) < 0.3


# -- targets ------------------------------------------------------------------


def test_single_speaker_single_mic_strategies_agree():
    spec = small_spec(speakers=[SpeakerSpec((1.0, 1.0, 1.5))], mics=[MicSpec((2, 2, 1.2), 0.01, 1.0)])
    out = scene.mix_scene(spec)
    ys = [scene.synth_target(out, s) for s in TargetStrategy]
    assert np.array_equal(ys[0], ys[1]) and np.array_equal(ys[1], ys[2])


def test_closest_mic_target_composition():
    out = scene.mix_scene(small_spec())
    assert out.metadata["closest_mic"] == [0, 1]
    N = out.observations.shape[1]
    expected = np.zeros(N)
    for k, m in enumerate([0, 1]):
        d = np.convolve(out.clean_per_speaker[k], out.direct_rirs[m, k])[:N]
        expected += scene.apply_async(d, out.spec.mics[m].gamma, out.spec.mics[m].tau_s) * out.gain
    y = scene.synth_target(out, "ClosestMic")
    assert np.sqrt(np.mean((y - expected) ** 2)) < 1e-9 * max(1.0, np.sqrt(np.mean(expected ** 2)))


def test_min_latency_selection():
    mics = [MicSpec((1, 1, 1), 0.030), MicSpec((2, 1, 1), 0.005), MicSpec((3, 1, 1), 0.020)]
    out = scene.mix_scene(small_spec(mics=mics))
    assert scene.target_mics(out, "MinLatency") == [1, 1]
    assert out.metadata["min_latency_mic"] == 1


def test_unknown_strategy():
    out = scene.mix_scene(small_spec())
    with pytest.raises(scene.ConfigError):
        scene.synth_target(out, "Loudest")


def test_colocated_closest_equals_min_latency():
    mics = [MicSpec((2, 2, 1.2), 0.01), MicSpec((2, 2, 1.2), 0.01)]
    out = scene.mix_scene(small_spec(mics=mics))
    assert np.array_equal(scene.synth_target(out, "ClosestMic"), scene.synth_target(out, "MinLatency"))


def test_closest_mic_ties_lowest_index():
    mics = [MicSpec((2, 2, 1.2)), MicSpec((2, 2, 1.2))]
    out = scene.mix_scene(small_spec(mics=mics))
    assert out.metadata["closest_mic"] == [0, 0]


# -- mixing -------------------------------------------------------------------


def test_mix_determinism():
    a, b = scene.mix_scene(small_spec()), scene.mix_scene(small_spec())
    for f in ("observations", "targets", "clean_per_speaker", "rirs", "noise"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert a.metadata == b.metadata


def test_mix_high_snr_noise_floor():
    out = scene.mix_scene(small_spec(snr_db=60.0))
    speech = out.speech_images.sum(axis=0)
    ratio = np.mean(out.noise ** 2) / np.mean(speech ** 2)
    assert 10 * np.log10(ratio) <= -50


def test_mix_snr_measured_on_active_speech():
    spec = small_spec(snr_db=3.0, mics=[MicSpec((2, 2, 1.2))])
    out = scene.mix_scene(spec)
    act = scene._activity(out.metadata["segments"], out.observations.shape[1], FS).max(axis=0) > 0.5
    speech = out.speech_images.sum(axis=0)
    snr = 10 * np.log10(np.mean(speech[:, act] ** 2) / np.mean(out.noise[:, act] ** 2))
    assert snr == pytest.approx(3.0, abs=1e-6)


def test_mix_level():
    out = scene.mix_scene(small_spec(level_db=-30.0))
    assert 20 * np.log10(np.sqrt(np.mean(out.observations ** 2))) == pytest.approx(-30.0, abs=1e-9)


def test_mix_sync_equals_manual_synchronous_path():
    mics = [MicSpec((1.5, 1.2, 1.2)), MicSpec((3.5, 2.8, 1.2))]
    out = scene.mix_scene(small_spec(mics=mics))
    N = out.observations.shape[1]
    manual = np.zeros_like(out.observations)
    for m in range(2):
        for k in range(2):
            manual[m] += np.convolve(out.clean_per_speaker[k], out.rirs[m, k])[:N]
    manual = manual * out.gain + out.noise
    assert np.sqrt(np.mean((manual - out.observations) ** 2)) < 1e-6 * np.sqrt(np.mean(manual ** 2))


def test_mix_linearity_over_speakers():
    spec = small_spec()
    full = scene.mix_scene(spec, include_noise=False, normalize=False).observations
    parts = sum(scene.mix_scene(spec, include_noise=False, normalize=False, speaker_subset=[k]).observations
                for k in range(2))
    assert np.sqrt(np.mean((full - parts) ** 2)) < 1e-9


def test_async_consistency_lag():
    # co-located mics with different latency: observations differ by a pure shift
    mics = [MicSpec((2, 2, 1.2), 0.012), MicSpec((2, 2, 1.2), -0.004)]
    spec = small_spec(mics=mics, speakers=[SpeakerSpec((1, 1, 1.5), "ssn")], snr_db=60.0)
    out = scene.mix_scene(spec)
    a, b = out.observations
    r = dsp.xcorr_align(a, b, 800)
    # positive lag means b is delayed relative to a
    assert abs(r.lag - (mics[1].tau_s - mics[0].tau_s) * FS) <= 2


def test_overlap_placement():
    rng = np.random.default_rng(0)
    for ratio in (0.0, 0.5, 1.0):
        segs, ov = scene.place_segments(2, 48000, ratio, rng)
        assert abs(ov - ratio) <= 0.1


def test_frame_offsets_metadata():
    out = scene.mix_scene(small_spec())
    fo = np.asarray(out.metadata["frame_offsets"])
    T = dsp.n_frames(out.observations.shape[1], 320, 160)
    assert fo.shape == (2, T)
    assert fo[0, 0] == pytest.approx(0.010 * FS / 160, abs=1e-3)


def test_spec_validation():
    with pytest.raises(scene.ConfigError):
        small_spec(mics=[MicSpec((2, 2, 1), 0.05)]).validate()
    with pytest.raises(scene.GeometryError):
        small_spec(mics=[MicSpec((9, 2, 1))]).validate()
    with pytest.raises(scene.ConfigError):
        small_spec(mics=[MicSpec((2, 2, 1), 0.0, 0.0)]).validate()
    with pytest.raises(scene.ConfigError):
        small_spec(speakers=[]).validate()


def test_spec_json_round_trip(tmp_path):
    spec = small_spec()
    back = SceneSpec.from_json(spec.to_json())
    assert back.to_dict() == spec.to_dict()
    spec.to_json(tmp_path / "s.json")
    assert SceneSpec.from_json(tmp_path / "s.json").to_dict() == spec.to_dict()


def test_save_scene(tmp_path):
    out = scene.mix_scene(small_spec())
    scene.save_scene(out, tmp_path / "s")
    names = sorted(p.name for p in (tmp_path / "s").iterdir())
    assert names == ["metadata.json", "mic_00.wav", "mic_01.wav", "spec.json", "target.wav"]
    md = json.loads((tmp_path / "s" / "metadata.json").read_text())
    assert md["tau_s"] == [0.010, -0.005]


def test_silent_wav_source(tmp_path):
    dsp.write_wav(tmp_path / "z.wav", np.zeros(1000))
    spec = small_spec(speakers=[SpeakerSpec((1, 1, 1.5), str(tmp_path / "z.wav"))])
    with pytest.raises(dsp.SignalError):
        scene.mix_scene(spec)


def test_wav_source_resampled(tmp_path):
    dsp.write_wav(tmp_path / "a.wav", np.sin(np.arange(8000) * 0.1), 8000)
    x = scene.load_source(str(tmp_path / "a.wav"), 5000, np.random.default_rng(0), FS)
    assert x.shape == (5000,) and np.any(x)


def test_distribution_presets():
    rng = np.random.default_rng(3)
    spec = SceneDistribution.preset("sync").sample(rng)
    assert all(m.tau_s == 0 and m.gamma == 1.0 for m in spec.mics)
    spec = SceneDistribution.preset("max_delay_40ms").sample(rng, n_mics=4)
    assert all(abs(abs(m.tau_s) - 0.040) < 1e-12 for m in spec.mics)
    with pytest.raises(scene.ConfigError):
        SceneDistribution.preset("nope")


def test_drift_sampling_scale():
    rng = np.random.default_rng(4)
    dist = SceneDistribution(n_mics=(6, 6))
    gammas = np.array([m.gamma for _ in range(200) for m in dist.sample(rng).mics])
    # f ~ N(16000, 0.5^2) Hz, gamma = f / 16000
    assert np.std(gammas * FS) == pytest.approx(0.5, rel=0.1)

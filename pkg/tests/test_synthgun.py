"""Synthesizer contracts: pulse shapes, class-conditional sampling,
scene composition, and dataset generation determinism."""

import numpy as np
import pytest

from gunshot_bench import synthgun as sg
from gunshot_bench.errors import InvalidParam, SceneOverflow
from gunshot_bench.manifest import load_manifest


def spectral_peak_hz(samples, nfft=16384, rate=44100):
    spec = np.abs(np.fft.rfft(samples, nfft))
    return spec.argmax() * rate / nfft


class TestMuzzleBlast:
    def test_4ms_pulse_length_and_peak(self):
        clip = sg.synth_muzzle_blast(1000.0, 4.0, 1.0, 44100)
        assert len(clip.samples) == 177
        peak = spectral_peak_hz(clip.samples)
        assert 794.0 <= peak <= 1260.0   # within 1/3 octave of 1 kHz

    def test_zero_amplitude(self):
        clip = sg.synth_muzzle_blast(800.0, 5.0, 0.0, 44100)
        assert len(clip.samples) == int(np.ceil(0.005 * 44100))
        np.testing.assert_array_equal(clip.samples, 0.0)

    def test_shotgun_band(self):
        clip = sg.synth_muzzle_blast(500.0, 10.0, 0.5, 44100)
        assert 100.0 <= spectral_peak_hz(clip.samples) <= 800.0

    def test_max_sample_equals_amplitude(self):
        clip = sg.synth_muzzle_blast(1200.0, 4.0, 0.37, 44100)
        np.testing.assert_allclose(np.abs(clip.samples).max(), 0.37, atol=1e-12)

    @pytest.mark.parametrize("freq,dur,amp", [
        (1000.0, 0.0, 1.0), (1000.0, -1.0, 1.0), (1000.0, 25.0, 1.0),
        (1000.0, 4.0, -0.1), (23000.0, 4.0, 1.0), (0.0, 4.0, 1.0),
    ])
    def test_invalid_params(self, freq, dur, amp):
        with pytest.raises(InvalidParam):
            sg.synth_muzzle_blast(freq, dur, amp, 44100)


class TestShockwave:
    def test_300us_n_wave(self):
        clip = sg.synth_shockwave(300.0, 1.0, 44100)
        assert len(clip.samples) == 13
        assert abs(clip.samples.mean()) < 1e-6

    def test_zero_amplitude(self):
        clip = sg.synth_shockwave(300.0, 0.0, 44100)
        np.testing.assert_array_equal(clip.samples, 0.0)

    def test_200us_lower_bound(self):
        clip = sg.synth_shockwave(200.0, 1.0, 44100)
        assert len(clip.samples) in (8, 9)

    def test_shape_ramps_and_flips(self):
        clip = sg.synth_shockwave(1000.0, 1.0, 44100)   # 44 samples, clear shape
        x = clip.samples
        n = len(x)
        first, second = x[: n // 2 - 1], x[n // 2 + 1 :]
        assert np.all(np.diff(first) > 0) and np.all(np.diff(second) > 0)
        assert first[-1] > 0 > second[0]

    @pytest.mark.parametrize("dur", [50.0, 99.0, 1001.0, 5000.0])
    def test_invalid_duration(self, dur):
        with pytest.raises(InvalidParam):
            sg.synth_shockwave(dur, 1.0, 44100)


def _count_pulses(samples, thresh_ratio=0.35):
    """Count well-separated peaks above a threshold."""
    env = np.abs(samples)
    thresh = env.max() * thresh_ratio
    above = env > thresh
    onsets = 0
    gap = 0
    min_gap = int(0.02 * 44100)
    armed = True
    for v in above:
        if v and armed:
            onsets += 1
            armed = False
            gap = 0
        elif not v:
            gap += 1
            if gap > min_gap:
                armed = True
    return onsets


class TestSynthShot:
    def test_shotgun_never_has_shockwave(self):
        spec = sg.DEFAULT_CLASS_SPECS[sg.FirearmClass.SHOTGUN]
        for i in range(200):
            event, _ = sg.synth_shot(spec, np.random.default_rng(i))
            assert not event.has_shockwave
            assert event.shockwave_duration_us is None

    def test_machine_gun_burst_spacing(self):
        spec = sg.DEFAULT_CLASS_SPECS[sg.FirearmClass.MACHINE_GUN]
        event, clip = sg.synth_shot(spec, np.random.default_rng(3))
        count = clip.meta["burst_count"]
        rate = clip.meta["burst_rate_hz"]
        assert count >= 3
        pulses = _count_pulses(clip.samples)
        assert pulses >= 3
        # overall burst length must match count / rate within jitter slack
        expected = (count - 1) / rate
        assert abs(clip.duration_s - expected) / expected < 0.25

    def test_sampled_params_within_spec(self):
        for fc, spec in sg.DEFAULT_CLASS_SPECS.items():
            event, _ = sg.synth_shot(spec, np.random.default_rng(hash(fc.value) % 2**31))
            lo, hi = spec.peak_freq_range
            assert lo <= event.peak_freq <= hi
            lo, hi = spec.blast_duration_range
            assert lo <= event.blast_duration_ms <= hi
            if event.has_shockwave:
                assert 200.0 <= event.shockwave_duration_us <= 400.0

    def test_deterministic_given_seed(self):
        spec = sg.DEFAULT_CLASS_SPECS[sg.FirearmClass.RIFLE]
        a = sg.synth_shot(spec, np.random.default_rng(77))
        b = sg.synth_shot(spec, np.random.default_rng(77))
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1].samples, b[1].samples)
        assert a[1].samples.tobytes() == b[1].samples.tobytes()

    def test_pistol_blast_durations_within_band(self):
        spec = sg.DEFAULT_CLASS_SPECS[sg.FirearmClass.HANDGUN_PISTOL]
        durs = [sg.synth_shot(spec, np.random.default_rng([1, i]))[0].blast_duration_ms
                for i in range(1000)]
        assert min(durs) >= 3.0 and max(durs) <= 5.0


class TestComposeScene:
    def test_empty_scene_noise_rms_convention(self):
        cfg = sg.SceneConfig(duration_s=1.0, snr_db=20.0)
        clip = sg.compose_scene([], cfg, np.random.default_rng(0))
        rms = float(np.sqrt((clip.samples ** 2).mean()))
        # reference RMS 1.0 -> noise RMS = 10^(-snr/20)
        np.testing.assert_allclose(rms, 0.1, rtol=0.05)

    def test_high_snr_matches_dry_mix(self):
        pulse = sg.synth_muzzle_blast(800.0, 5.0, 0.5, 44100)
        cfg = sg.SceneConfig(duration_s=0.5, snr_db=40.0)
        wet = sg.compose_scene([(0.1, pulse)], cfg, np.random.default_rng(1)).samples
        dry = np.zeros(int(0.5 * 44100))
        dry[4410 : 4410 + len(pulse.samples)] = pulse.samples
        corr = np.corrcoef(wet, dry)[0, 1]
        assert corr >= 0.99

    def test_inverse_distance_scaling(self):
        pulse = sg.synth_muzzle_blast(800.0, 5.0, 0.5, 44100)
        out = {}
        for d in (1.0, 2.0):
            cfg = sg.SceneConfig(duration_s=0.5, snr_db=80.0, distance_m=d)
            out[d] = sg.compose_scene([(0.1, pulse)], cfg, np.random.default_rng(2)).samples
        ratio = np.abs(out[2.0]).max() / np.abs(out[1.0]).max()
        np.testing.assert_allclose(ratio, 0.5, atol=1e-6)

    def test_overflow_raises(self):
        pulse = sg.synth_muzzle_blast(800.0, 5.0, 0.5, 44100)
        cfg = sg.SceneConfig(duration_s=0.1)
        with pytest.raises(SceneOverflow):
            sg.compose_scene([(0.099, pulse)], cfg, np.random.default_rng(0))

    def test_reverb_adds_delayed_copies(self):
        pulse = sg.synth_muzzle_blast(800.0, 4.0, 0.5, 44100)
        cfg = sg.SceneConfig(duration_s=0.5, snr_db=80.0,
                             reverb=sg.ReverbConfig(delay_ms=50.0, decay=0.5, taps=2))
        wet = sg.compose_scene([(0.05, pulse)], cfg, np.random.default_rng(3)).samples
        env = np.abs(wet)
        base = int(0.05 * 44100)
        d = int(0.05 * 44100)
        peak0 = env[base : base + 300].max()
        peak1 = env[base + d : base + d + 300].max()
        np.testing.assert_allclose(peak1 / peak0, 0.5, atol=0.05)

    def test_clipping_guard(self):
        pulse = sg.synth_muzzle_blast(800.0, 5.0, 2.0, 44100)
        cfg = sg.SceneConfig(duration_s=0.2, snr_db=60.0)
        out = sg.compose_scene([(0.05, pulse)], cfg, np.random.default_rng(4)).samples
        assert np.abs(out).max() <= 0.99 + 1e-12


class TestGenerateDataset:
    def test_counts_and_manifest(self, tmp_path):
        counts = {fc: 4 for fc in sg.CLASS_ORDER}
        rows = sg.generate_dataset(counts, 4, True, tmp_path, seed=7)
        assert len(rows) == 24
        assert len(list((tmp_path / "wav").glob("*.wav"))) == 24
        loaded = load_manifest(tmp_path / "manifest.jsonl")
        assert len(loaded) == 24
        assert sum(1 for r in loaded if r.detection_label == "gunshot") == 20

    def test_reference_mix_handgun_largest(self):
        counts = sg.reference_counts(0.05)
        assert max(counts, key=counts.get) == sg.FirearmClass.HANDGUN_PISTOL
        assert sum(counts.values()) == 173

    def test_same_seed_identical_bytes(self, tmp_path):
        counts = {sg.FirearmClass.RIFLE: 2, sg.FirearmClass.SHOTGUN: 2}
        sg.generate_dataset(counts, 2, False, tmp_path / "a", seed=5)
        sg.generate_dataset(counts, 2, False, tmp_path / "b", seed=5)
        man_a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        man_b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert man_a == man_b
        for wav in sorted((tmp_path / "a" / "wav").glob("*.wav")):
            twin = tmp_path / "b" / "wav" / wav.name
            assert wav.read_bytes() == twin.read_bytes()

    def test_different_seed_differs(self, tmp_path):
        counts = {sg.FirearmClass.RIFLE: 1}
        sg.generate_dataset(counts, 0, True, tmp_path / "a", seed=1)
        sg.generate_dataset(counts, 0, True, tmp_path / "b", seed=2)
        a = next((tmp_path / "a" / "wav").glob("*.wav")).read_bytes()
        b = next((tmp_path / "b" / "wav").glob("*.wav")).read_bytes()
        assert a != b

    def test_negative_counts_rejected(self, tmp_path):
        with pytest.raises(InvalidParam):
            sg.generate_dataset({sg.FirearmClass.RIFLE: -1}, 0, True, tmp_path, 0)


class TestClassSpecs:
    def test_default_specs_validate(self):
        for spec in sg.DEFAULT_CLASS_SPECS.values():
            spec.validate()

    def test_exactly_five_classes(self):
        assert len(sg.FirearmClass) == 5
        assert len(sg.DEFAULT_CLASS_SPECS) == 5

    def test_burst_only_on_automatic_classes(self):
        for fc, spec in sg.DEFAULT_CLASS_SPECS.items():
            has_burst = spec.burst is not None
            assert has_burst == (fc in (sg.FirearmClass.MACHINE_GUN,
                                        sg.FirearmClass.SUBMACHINE_GUN))

    def test_invalid_spec_rejected(self):
        spec = sg.FirearmClassSpec(sg.FirearmClass.RIFLE, (1500.0, 200.0),
                                   (5.0, 8.0), (167.0, 171.0), sg.ShockwaveRate.COMMON)
        with pytest.raises(InvalidParam):
            spec.validate()

    def test_spl_amplitude_anchor(self):
        assert sg.spl_to_amplitude(165.0) == 1.0
        np.testing.assert_allclose(sg.spl_to_amplitude(159.0), 10 ** (-6 / 20))

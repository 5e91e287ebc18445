"""DSP contracts: FFT against an independent reference, STFT framing,
mel filterbank geometry, spectrogram behavior, autocorrelation, k-means,
BoAW encoding, summary stats, and input normalization."""

import numpy as np
import pytest

from gunshot_bench import dsp
from gunshot_bench.errors import (
    DimensionMismatch,
    InsufficientData,
    InvalidParam,
    TooShort,
    UnsupportedFormat,
)
from gunshot_bench.synthgun import AudioClip, synth_muzzle_blast


class TestFft:
    @pytest.mark.parametrize("n", [2, 8, 64, 1024])
    def test_matches_reference(self, n):
        x = np.random.default_rng(n).normal(size=n)
        np.testing.assert_allclose(dsp.fft(x), np.fft.fft(x), atol=1e-9)

    def test_round_trip(self):
        for trial in range(5):
            x = np.random.default_rng(trial).normal(size=1024)
            back = dsp.ifft(dsp.fft(x)).real
            assert np.abs(back - x).max() / np.abs(x).max() < 1e-9

    def test_batched(self):
        x = np.random.default_rng(0).normal(size=(7, 256))
        np.testing.assert_allclose(dsp.fft(x), np.fft.fft(x, axis=-1), atol=1e-9)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(InvalidParam):
            dsp.fft(np.zeros(100))


class TestStft:
    def test_frame_count_2048(self):
        clip = AudioClip(np.random.default_rng(0).normal(size=2048))
        assert dsp.stft(clip).shape == (3, 513)

    def test_too_short(self):
        with pytest.raises(TooShort):
            dsp.stft(AudioClip(np.zeros(1000)))

    def test_pure_tone_hits_exact_bin(self):
        # 1378.125 Hz = bin 32 * 44100 / 1024 exactly
        t = np.arange(4096) / 44100.0
        clip = AudioClip(np.sin(2 * np.pi * 1378.125 * t))
        spec = np.abs(dsp.stft(clip))
        assert np.all(spec.argmax(axis=1) == 32)

    def test_parseval(self):
        x = np.random.default_rng(1).normal(size=1024)
        windowed = x * dsp.hann_window(1024)
        spec = dsp.stft(AudioClip(x))[0]
        mags = np.abs(spec) ** 2
        e_freq = (mags[0] + mags[-1] + 2.0 * mags[1:-1].sum()) / 1024.0
        e_time = (windowed ** 2).sum()
        assert abs(e_freq - e_time) / e_time < 1e-6

    def test_frame_count_formula_random_lengths(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1024, 20000))
            clip = AudioClip(rng.normal(size=n))
            expected = 1 + (n - 1024) // 512
            assert dsp.stft(clip).shape[0] == expected


class TestMelScale:
    def test_zero(self):
        assert dsp.hz_to_mel(0.0) == 0.0

    def test_700hz(self):
        np.testing.assert_allclose(dsp.hz_to_mel(700.0), 781.17, atol=0.01)

    def test_round_trip(self):
        for f in (100.0, 1000.0, 10000.0):
            back = float(dsp.mel_to_hz(dsp.hz_to_mel(f)))
            assert abs(back - f) / f < 1e-9


class TestFilterbank:
    def setup_method(self):
        self.bank = dsp.build_mel_filterbank()

    def test_shape(self):
        assert self.bank.weights.shape == (128, 513)

    def test_full_coverage(self):
        freqs = np.arange(513) * 44100 / 1024
        inner = (freqs > 0) & (freqs < 22050)
        coverage = self.bank.weights.sum(axis=0)
        assert np.all(coverage[inner] > 0)

    def test_rows_unimodal(self):
        for row in self.bank.weights:
            nz = np.flatnonzero(row)
            if len(nz) == 0:
                continue
            seg = row[nz[0] : nz[-1] + 1]
            d = np.diff(seg)
            # rises then falls: no increase after the first decrease
            falling = False
            for step in d:
                if step < -1e-15:
                    falling = True
                elif step > 1e-15:
                    assert not falling, "filter row is not unimodal"

    def test_adjacent_filters_overlap(self):
        c = self.bank.center_freqs
        assert np.all(np.diff(c) > 0)
        # triangle i spans (pt[i], pt[i+2]): neighbor peaks fall inside it
        pts = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(22050.0), 130))
        assert np.all(pts[2:-1] < pts[3:])  # each filter overlaps the next span

    def test_fmax_above_nyquist_rejected(self):
        with pytest.raises(InvalidParam):
            dsp.build_mel_filterbank(f_max=30000.0)


class TestMelSpectrogram:
    def test_silence_hits_floor(self):
        mel = dsp.mel_spectrogram(AudioClip(np.zeros(4096)))
        np.testing.assert_allclose(mel.frames, np.log(1e-10), atol=1e-12)

    def test_scaling_shifts_by_log4(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=8192) * 0.2
        a = dsp.mel_spectrogram(AudioClip(x)).frames
        b = dsp.mel_spectrogram(AudioClip(2.0 * x)).frames
        strong = a > np.log(1e-10) + 8.0
        np.testing.assert_allclose((b - a)[strong], np.log(4.0), atol=1e-6)

    def test_shotgun_band_energy(self):
        clip = synth_muzzle_blast(500.0, 10.0, 0.8)
        padded = AudioClip(np.concatenate([np.zeros(256), clip.samples,
                                           np.zeros(2048 - 256 - len(clip.samples))]))
        mel = dsp.mel_spectrogram(padded)
        bank = dsp.default_filterbank()
        frame = mel.frames[np.unravel_index(mel.frames.argmax(), mel.frames.shape)[0]]
        center = bank.center_freqs[int(frame.argmax())]
        assert 100.0 <= center <= 800.0

    def test_translation_covariance(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=6 * 512 + 1024)
        shifted = np.concatenate([np.zeros(512), x])
        a = dsp.mel_spectrogram(AudioClip(x)).frames
        b = dsp.mel_spectrogram(AudioClip(shifted)).frames
        np.testing.assert_allclose(b[1 : a.shape[0] + 1], a, atol=1e-6)

    def test_frame_rate(self):
        mel = dsp.mel_spectrogram(AudioClip(np.zeros(4096)))
        np.testing.assert_allclose(mel.frame_rate, 44100 / 512)


class TestAutocorrelation:
    def test_r0_is_one(self):
        clip = AudioClip(np.random.default_rng(0).normal(size=1000))
        r = dsp.autocorrelation(clip, 10)
        np.testing.assert_allclose(r[0], 1.0, atol=1e-12)

    def test_periodic_burst_peak_at_period(self):
        # impulse train at 10 Hz -> autocorrelation peak near lag 4410
        x = np.zeros(44100)
        for k in range(10):
            x[k * 4410] = 1.0
        r = dsp.autocorrelation(AudioClip(x), 6000)
        window = r[4000:5000]
        assert abs((4000 + int(window.argmax())) - 4410) <= 2
        assert window.max() > 0.5

    def test_white_noise_decorrelates(self):
        clip = AudioClip(np.random.default_rng(7).normal(size=44100))
        r = dsp.autocorrelation(clip, 44099)
        assert np.abs(r[1:]).max() < 0.1

    def test_matches_direct_oracle(self):
        x = np.random.default_rng(5).normal(size=300)
        r = dsp.autocorrelation(AudioClip(x), 20)
        direct = np.array([(x[: 300 - l] * x[l:]).sum() / 300 for l in range(21)])
        direct /= direct[0]
        np.testing.assert_allclose(r, direct, atol=1e-9)

    def test_zero_clip(self):
        r = dsp.autocorrelation(AudioClip(np.zeros(100)), 5)
        np.testing.assert_array_equal(r, np.zeros(6))


class TestKmeans:
    def test_distinct_points_zero_inertia(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
        cb = dsp.kmeans_fit(pts, k=4, seed=0)
        assert cb.inertia_history[-1] < 1e-12

    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(200, 3)) * 0.05 + np.array([0.0, 0.0, 0.0])
        b = rng.normal(size=(200, 3)) * 0.05 + np.array([5.0, 5.0, 5.0])
        cb = dsp.kmeans_fit(np.vstack([a, b]), k=2, seed=1)
        means = sorted([a.mean(axis=0), b.mean(axis=0)], key=lambda m: m[0])
        got = sorted(cb.centroids, key=lambda m: m[0])
        for m, g in zip(means, got):
            assert np.abs(m - g).max() < 0.1

    def test_inertia_monotone(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(300, 8))
        cb = dsp.kmeans_fit(x, k=10, iters=30, seed=3)
        h = cb.inertia_history
        assert all(h[i + 1] <= h[i] + 1e-9 for i in range(len(h) - 1))

    def test_deterministic(self):
        x = np.random.default_rng(4).normal(size=(100, 4))
        a = dsp.kmeans_fit(x, k=5, seed=9).centroids
        b = dsp.kmeans_fit(x, k=5, seed=9).centroids
        np.testing.assert_array_equal(a, b)

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            dsp.kmeans_fit(np.zeros((3, 2)), k=4)


class TestBoaw:
    def _codebook(self):
        rng = np.random.default_rng(0)
        return dsp.BoawCodebook(4, rng.normal(size=(4, 128)), 128)

    def test_histogram_sums_to_one(self):
        cb = self._codebook()
        frames = np.random.default_rng(1).normal(size=(37, 128))
        hist = dsp.boaw_encode(frames, cb).values
        np.testing.assert_allclose(hist.sum(), 1.0, atol=1e-9)
        assert np.all(hist >= 0)

    def test_single_frame_one_hot(self):
        cb = self._codebook()
        hist = dsp.boaw_encode(cb.centroids[2:3], cb).values
        np.testing.assert_array_equal(hist, [0, 0, 1, 0])

    def test_all_frames_nearest_centroid_three(self):
        cb = self._codebook()
        frames = np.tile(cb.centroids[3], (11, 1)) + 1e-6
        hist = dsp.boaw_encode(frames, cb).values
        np.testing.assert_array_equal(hist, [0, 0, 0, 1])

    def test_matches_bruteforce_assignment(self):
        cb = self._codebook()
        frames = np.random.default_rng(2).normal(size=(50, 128))
        expect = np.zeros(4)
        for f in frames:
            d = ((cb.centroids - f) ** 2).sum(axis=1)
            expect[int(d.argmin())] += 1
        np.testing.assert_allclose(dsp.boaw_encode(frames, cb).values, expect / 50)

    def test_dimension_mismatch(self):
        cb = self._codebook()
        with pytest.raises(DimensionMismatch):
            dsp.boaw_encode(np.zeros((5, 64)), cb)


class TestMelStats:
    def test_constant_spectrogram_zero_std(self):
        frames = np.full((10, 128), 3.0)
        v = dsp.mel_stats(frames).values
        assert v.shape == (256,)
        np.testing.assert_allclose(v[:128], 3.0)
        np.testing.assert_allclose(v[128:], 0.0)

    def test_single_frame(self):
        frame = np.random.default_rng(0).normal(size=(1, 128))
        v = dsp.mel_stats(frame).values
        np.testing.assert_allclose(v[:128], frame[0])
        np.testing.assert_allclose(v[128:], 0.0)

    def test_matches_two_pass_oracle(self):
        x = np.random.default_rng(1).normal(size=(10, 128))
        v = dsp.mel_stats(x).values
        mean = x.sum(axis=0) / 10
        var = ((x - mean) ** 2).sum(axis=0) / 10
        np.testing.assert_allclose(v[:128], mean, atol=1e-9)
        np.testing.assert_allclose(v[128:], np.sqrt(var), atol=1e-9)


class TestNormalizeInput:
    def test_identity_path_only_quantizes(self):
        x = np.random.default_rng(0).uniform(-0.9, 0.9, size=5000)
        clip = dsp.normalize_input(AudioClip(x, 44100))
        assert clip.sample_rate == 44100
        assert np.abs(clip.samples - x).max() <= 0.5 / 32767 + 1e-12

    def test_upsample_doubles_length(self):
        n = 3001
        clip = dsp.normalize_input(AudioClip(np.zeros(n), 22050))
        assert abs(len(clip.samples) - 2 * n) <= 2

    def test_48k_sine_keeps_frequency(self):
        t = np.arange(24000) / 48000.0
        x = 0.7 * np.sin(2 * np.pi * 1000.0 * t)
        clip = dsp.normalize_input(AudioClip(x, 48000))
        y = clip.samples
        rising = np.flatnonzero((y[:-1] < 0) & (y[1:] >= 0))
        # average period between first and last crossing avoids edge bias
        span_s = (rising[-1] - rising[0]) / 44100.0
        freq = (len(rising) - 1) / span_s
        assert abs(freq - 1000.0) / 1000.0 < 0.001

    def test_stereo_averaged(self):
        x = np.stack([np.ones(1000), -np.ones(1000)], axis=1)
        clip = dsp.normalize_input(AudioClip(x, 44100))
        np.testing.assert_allclose(clip.samples, 0.0, atol=1e-12)

    def test_unsupported_channels(self):
        with pytest.raises(UnsupportedFormat):
            dsp.normalize_input(AudioClip(np.zeros((100, 3)), 44100))

    def test_unsupported_rate(self):
        with pytest.raises(UnsupportedFormat):
            dsp.normalize_input(AudioClip(np.zeros(100), 4000))

    def test_samples_on_16bit_grid(self):
        x = np.random.default_rng(1).uniform(-1, 1, 2000)
        clip = dsp.normalize_input(AudioClip(x, 44100))
        np.testing.assert_allclose(clip.samples * 32767, np.rint(clip.samples * 32767),
                                   atol=1e-9)


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "x.feat"
        values = np.random.default_rng(0).normal(size=(7, 128)).astype(np.float32)
        dsp.save_feature(path, values, {"id": "x", "kind": "mel", "source_hash": "abc"})
        loaded, hdr = dsp.load_feature(path)
        np.testing.assert_array_equal(loaded, values)
        assert hdr["id"] == "x" and hdr["kind"] == "mel"
        assert hdr["shape"] == [7, 128]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.feat"
        path.write_bytes(b"nope")
        with pytest.raises(InvalidParam):
            dsp.load_feature(path)

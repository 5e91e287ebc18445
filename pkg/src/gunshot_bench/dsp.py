"""Feature extraction pipeline: normalization to 44.1 kHz mono 16-bit,
log-mel spectrograms (128 bands, 1024-sample window, 512 hop), waveform
autocorrelation, and bag-of-audio-words encoding.

The FFT is an in-house iterative radix-2 implementation (vectorized over
leading axes); the resampler is a windowed-sinc polyphase filter. numpy is
used as the array substrate only.
"""

import functools
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientData,
    InvalidParam,
    TooShort,
    UnsupportedFormat,
)
from .synthgun import AudioClip

SAMPLE_RATE = 44100
WIN_SAMPLES = 1024          # ~23.2 ms at 44.1 kHz
HOP_SAMPLES = 512           # ~11.6 ms
N_MELS = 128
LOG_EPS = 1e-10

FEATURE_MAGIC = b"GSBF"
FEATURE_VERSION = 1


# ---------------------------------------------------------------------------
# FFT (iterative radix-2, power-of-two lengths, batched over leading axes)
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=32)
def _bit_reverse_indices(n):
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(1, n):
        rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (bits - 1))
    return rev


def _fft_core(x, sign):
    n = x.shape[-1]
    if n == 0 or n & (n - 1):
        raise InvalidParam(f"FFT length must be a power of two, got {n}")
    y = x[..., _bit_reverse_indices(n)].astype(np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        y = y.reshape(y.shape[:-1] + (n // m, m))
        a = y[..., :half]
        b = y[..., half:] * tw
        y = np.concatenate((a + b, a - b), axis=-1).reshape(y.shape[:-2] + (n,))
        m *= 2
    return y


def fft(x):
    """Forward DFT of the last axis (length must be a power of two)."""
    return _fft_core(np.asarray(x, dtype=np.complex128), -1.0)


def ifft(x):
    """Inverse DFT of the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    return _fft_core(x, +1.0) / x.shape[-1]


def _next_pow2(n):
    return 1 << max(0, (n - 1)).bit_length()


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def hann_window(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples, win=WIN_SAMPLES, hop=HOP_SAMPLES):
    if n_samples < win:
        raise TooShort(f"need at least {win} samples, got {n_samples}")
    return 1 + (n_samples - win) // hop


def stft(clip, win=WIN_SAMPLES, hop=HOP_SAMPLES):
    """Hann-windowed one-sided spectrum, complex [T, win//2 + 1]."""
    x = np.asarray(clip.samples if isinstance(clip, AudioClip) else clip, dtype=np.float64)
    if x.ndim != 1:
        raise UnsupportedFormat("stft expects a mono clip")
    t = frame_count(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:t]
    spec = fft(frames * hann_window(win))
    return spec[:, : win // 2 + 1]


# ---------------------------------------------------------------------------
# mel filterbank
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    n_mels: int
    n_fft: int
    weights: np.ndarray       # [n_mels, n_fft//2 + 1]
    f_min: float
    f_max: float
    center_freqs: np.ndarray  # [n_mels] triangle peaks in Hz


def build_mel_filterbank(n_mels=N_MELS, n_fft=WIN_SAMPLES, f_min=0.0, f_max=SAMPLE_RATE / 2,
                         sample_rate=SAMPLE_RATE):
    """Triangular filters with centers uniformly spaced on the mel scale.

    Each triangle is scaled to unit area (in Hz), so broadband noise maps to
    a roughly flat mel vector.
    """
    if n_mels < 2:
        raise InvalidParam("need at least 2 mel bands")
    if f_max > sample_rate / 2:
        raise InvalidParam(f"f_max {f_max} above Nyquist {sample_rate / 2}")
    if f_min < 0 or f_min >= f_max:
        raise InvalidParam("need 0 <= f_min < f_max")
    pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rise = (bins[None, :] - lo) / (ctr - lo)
    fall = (hi - bins[None, :]) / (hi - ctr)
    weights = np.maximum(0.0, np.minimum(rise, fall))
    weights *= 2.0 / (hi - lo)
    return MelFilterbank(n_mels, n_fft, weights, float(f_min), float(f_max), pts[1:-1].copy())


@functools.lru_cache(maxsize=1)
def default_filterbank():
    return build_mel_filterbank()


# ---------------------------------------------------------------------------
# mel spectrogram
# ---------------------------------------------------------------------------

@dataclass
class MelSpectrogram:
    frames: np.ndarray        # [T, n_mels] log energies
    frame_rate: float         # frames per second
    source_id: str = ""


def mel_spectrogram(clip, bank=None):
    """Log-scaled mel spectrogram: power spectrum x filterbank, then log(x + eps)."""
    if isinstance(clip, AudioClip) and clip.sample_rate != SAMPLE_RATE:
        raise InvalidParam(f"expected a {SAMPLE_RATE} Hz clip, got {clip.sample_rate}")
    bank = bank or default_filterbank()
    spec = stft(clip, win=bank.n_fft, hop=HOP_SAMPLES)
    power = spec.real**2 + spec.imag**2
    mel = power @ bank.weights.T
    source = clip.meta.get("id", "") if isinstance(clip, AudioClip) else ""
    return MelSpectrogram(np.log(mel + LOG_EPS), SAMPLE_RATE / HOP_SAMPLES, source)


# ---------------------------------------------------------------------------
# autocorrelation
# ---------------------------------------------------------------------------

def autocorrelation(clip, max_lag):
    """Biased autocorrelation r[l] = sum_n x[n]x[n+l] / N, scaled so r[0] = 1
    when the clip has energy. Computed via the FFT for speed."""
    x = np.asarray(clip.samples if isinstance(clip, AudioClip) else clip, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise InvalidParam("empty clip")
    if not 0 <= max_lag < n:
        raise InvalidParam(f"max_lag must be in [0, {n - 1}], got {max_lag}")
    nfft = _next_pow2(n + max_lag + 1)
    spec = fft(np.concatenate([x, np.zeros(nfft - n)]))
    r = ifft(spec * np.conj(spec)).real[: max_lag + 1] / n
    if r[0] > 0:
        r = r / r[0]
    return r


# ---------------------------------------------------------------------------
# bag of audio words
# ---------------------------------------------------------------------------

@dataclass
class BoawCodebook:
    k: int
    centroids: np.ndarray            # [k, d]
    d: int
    inertia_history: list = field(default_factory=list)


def _pairwise_sq_dists(x, c):
    d2 = (x * x).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] - 2.0 * (x @ c.T)
    return np.maximum(d2, 0.0)


def kmeans_fit(descriptors, k, iters=50, seed=0):
    """Lloyd's algorithm with k-means++ seeding; deterministic for a fixed seed.

    Ties in assignment go to the lowest centroid index; empty clusters keep
    their previous centroid. inertia_history records the total squared
    distance after each iteration (non-increasing).
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("descriptors must be [n, d]")
    n, d = x.shape
    if k < 2:
        raise InvalidParam("k must be >= 2")
    if n < k:
        raise InsufficientData(f"{n} descriptors for k={k}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, d))
    centroids[0] = x[rng.integers(n)]
    d2 = _pairwise_sq_dists(x, centroids[:1])[:, 0]
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[i]) ** 2).sum(axis=1))

    assign = _pairwise_sq_dists(x, centroids).argmin(axis=1)
    history = []
    for _ in range(max(1, iters)):
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
        dist = _pairwise_sq_dists(x, centroids)
        history.append(float(dist.min(axis=1).sum()))
        new_assign = dist.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return BoawCodebook(k, centroids, d, history)


def boaw_encode(mel, codebook):
    """Histogram of nearest-centroid assignments over frames, L1-normalized."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    if frames.ndim != 2:
        raise DimensionMismatch("expected [T, d] frames")
    if frames.shape[1] != codebook.d:
        raise DimensionMismatch(
            f"frame dim {frames.shape[1]} != codebook dim {codebook.d}"
        )
    assign = _pairwise_sq_dists(frames, codebook.centroids).argmin(axis=1)
    hist = np.bincount(assign, minlength=codebook.k).astype(np.float64)
    return FeatureVector(hist / len(frames), "boaw")


# ---------------------------------------------------------------------------
# summary features
# ---------------------------------------------------------------------------

@dataclass
class FeatureVector:
    values: np.ndarray
    kind: str  # melstats | boaw | autocorr


def mel_stats(mel):
    """Per-band mean and standard deviation over time, concatenated (2*n_mels)."""
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DimensionMismatch("expected a nonempty [T, n_mels] spectrogram")
    return FeatureVector(
        np.concatenate([frames.mean(axis=0), frames.std(axis=0)]), "melstats"
    )


# ---------------------------------------------------------------------------
# input normalization
# ---------------------------------------------------------------------------

def _hann_taper(t, width):
    w = np.zeros_like(t)
    inside = np.abs(t) < width
    w[inside] = 0.5 + 0.5 * np.cos(np.pi * t[inside] / width)
    return w


def resample(x, sr_in, sr_out, half_width=32):
    """Rational-rate windowed-sinc polyphase resampling."""
    x = np.asarray(x, dtype=np.float64)
    g = math.gcd(int(sr_in), int(sr_out))
    up, down = sr_out // g, sr_in // g
    if up == down:
        return x.copy()
    fc = min(1.0, up / down)               # cutoff relative to input Nyquist
    w = int(np.ceil(half_width / fc))      # kernel half-width in input samples
    n_out = int(np.ceil(len(x) * up / down))
    pos = np.arange(n_out) * down
    n0 = pos // up
    phase = pos % up

    offs = np.arange(-w, w + 2)
    t = (np.arange(up)[:, None] / up) - offs[None, :]
    kernel = fc * np.sinc(fc * t) * _hann_taper(t, w + 1)
    kernel /= kernel.sum(axis=1, keepdims=True)   # exact unit DC gain per phase

    xp = np.concatenate([np.zeros(w + 1), x, np.zeros(w + 2)])
    windows = xp[n0[:, None] + (offs[None, :] + w + 1)]
    return (windows * kernel[phase]).sum(axis=1)


def quantize16(x):
    """Snap samples to the 16-bit grid and rescale to [-1, 1]."""
    return np.rint(np.clip(x, -1.0, 1.0) * 32767.0) / 32767.0


def normalize_input(clip):
    """Normalize any supported clip to 44.1 kHz mono on the 16-bit grid."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if not 8000 <= clip.sample_rate <= 192000:
        raise UnsupportedFormat(f"sample rate {clip.sample_rate} outside 8k..192k")
    if x.ndim == 2:
        if x.shape[1] != 2:
            raise UnsupportedFormat(f"expected 1 or 2 channels, got {x.shape[1]}")
        x = x.mean(axis=1)
    elif x.ndim != 1:
        raise UnsupportedFormat("samples must be [n] or [n, 2]")
    if clip.sample_rate != SAMPLE_RATE:
        x = resample(x, clip.sample_rate, SAMPLE_RATE)
    meta = dict(clip.meta)
    meta.update(normalized=True, source_rate=clip.sample_rate)
    return AudioClip(quantize16(x), SAMPLE_RATE, meta)


# ---------------------------------------------------------------------------
# feature cache files: JSON header + row-major float32 little-endian payload
# ---------------------------------------------------------------------------

def save_feature(path, values, header):
    """Write one feature cache file.

    header must carry at least {id, kind}; shape and version are filled in.
    """
    arr = np.asarray(values, dtype="<f4")
    hdr = dict(header)
    hdr["shape"] = list(arr.shape)
    hdr["version"] = FEATURE_VERSION
    blob = json.dumps(hdr, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.tobytes())


def load_feature(path):
    """Read a feature cache file -> (float32 array, header dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise InvalidParam(f"not a feature cache file: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        hdr = json.loads(f.read(hlen).decode("utf-8"))
        if hdr.get("version") != FEATURE_VERSION:
            raise InvalidParam(f"unsupported feature version in {path}")
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(hdr["shape"]).copy(), hdr


def read_feature_header(path):
    with open(path, "rb") as f:
        if f.read(4) != FEATURE_MAGIC:
            raise InvalidParam(f"not a feature cache file: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(hlen).decode("utf-8"))

"""Physically-motivated synthesis of labeled gunshot and background clips.

A shot is modeled as a muzzle blast (Friedlander pulse band-shaped around a
class-typical peak frequency) optionally preceded by a ballistic shockwave
(a ~200-400 microsecond N-wave); automatic weapons emit bursts. Scenes mix
events with comb-filter reverberation, 1/distance attenuation, and white
noise at a target SNR. Generation is a pure function of (arguments, seed):
every clip derives its own RNG stream from (seed, clip index).
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InvalidParam, SceneOverflow
from .wavio import write_wav

SAMPLE_RATE = 44100

# SPL -> linear amplitude anchor: 165 dB maps to 1.0 full scale.
SPL_REFERENCE_DB = 165.0

# acoustic ranges that overlap no firearm class band, for distractor impulses
THUMP_FREQ_RANGE = (30.0, 80.0)
CLICK_FREQ_RANGE = (4000.0, 12000.0)


class FirearmClass(Enum):
    RIFLE = "rifle"
    SUBMACHINE_GUN = "submachine_gun"
    HANDGUN_PISTOL = "handgun_pistol"
    MACHINE_GUN = "machine_gun"
    SHOTGUN = "shotgun"


class ShockwaveRate(Enum):
    NO = "no"
    RARE = "rare"
    VARIABLE = "variable"
    COMMON = "common"


SHOCKWAVE_PROB = {
    ShockwaveRate.NO: 0.0,
    ShockwaveRate.RARE: 0.1,
    ShockwaveRate.VARIABLE: 0.5,
    ShockwaveRate.COMMON: 0.9,
}


@dataclass(frozen=True)
class BurstSpec:
    rate_hz_range: tuple      # shots per second
    count_range: tuple        # inclusive (min, max) shots per burst


@dataclass(frozen=True)
class FirearmClassSpec:
    firearm: FirearmClass
    peak_freq_range: tuple    # Hz
    blast_duration_range: tuple  # ms
    spl_at_1m_range: tuple    # dB
    shockwave: ShockwaveRate
    burst: BurstSpec | None = None

    def validate(self):
        for name, (lo, hi) in (
            ("peak_freq_range", self.peak_freq_range),
            ("blast_duration_range", self.blast_duration_range),
            ("spl_at_1m_range", self.spl_at_1m_range),
        ):
            if not (0 < lo < hi):
                raise InvalidParam(f"{self.firearm.value}: bad {name} ({lo}, {hi})")
        if self.peak_freq_range[1] >= SAMPLE_RATE / 2:
            raise InvalidParam(f"{self.firearm.value}: peak frequency at/above Nyquist")
        if self.burst is not None:
            lo, hi = self.burst.rate_hz_range
            clo, chi = self.burst.count_range
            if not (0 < lo < hi) or not (1 <= clo <= chi):
                raise InvalidParam(f"{self.firearm.value}: bad burst spec")
        return self


# Typical acoustic characteristics per firearm category: spectral peak band,
# per-shot blast duration, source level at 1 m, and shockwave likelihood.
DEFAULT_CLASS_SPECS = {
    FirearmClass.RIFLE: FirearmClassSpec(
        FirearmClass.RIFLE, (200.0, 1500.0), (5.0, 8.0), (167.0, 171.0),
        ShockwaveRate.COMMON),
    FirearmClass.SUBMACHINE_GUN: FirearmClassSpec(
        FirearmClass.SUBMACHINE_GUN, (400.0, 2200.0), (3.0, 4.0), (160.0, 166.0),
        ShockwaveRate.VARIABLE, BurstSpec((12.0, 15.0), (3, 8))),
    FirearmClass.HANDGUN_PISTOL: FirearmClassSpec(
        FirearmClass.HANDGUN_PISTOL, (500.0, 2000.0), (3.0, 5.0), (159.0, 164.0),
        ShockwaveRate.RARE),
    FirearmClass.MACHINE_GUN: FirearmClassSpec(
        FirearmClass.MACHINE_GUN, (300.0, 1800.0), (3.0, 5.0), (165.0, 170.0),
        ShockwaveRate.COMMON, BurstSpec((10.0, 12.0), (8, 15))),
    FirearmClass.SHOTGUN: FirearmClassSpec(
        FirearmClass.SHOTGUN, (100.0, 800.0), (8.0, 12.0), (161.0, 165.0),
        ShockwaveRate.NO),
}

# Reference recording-count mix used by the "paper-ratio" dataset preset.
REFERENCE_CLASS_MIX = {
    FirearmClass.RIFLE: 892,
    FirearmClass.SUBMACHINE_GUN: 522,
    FirearmClass.HANDGUN_PISTOL: 1105,
    FirearmClass.MACHINE_GUN: 543,
    FirearmClass.SHOTGUN: 396,
}


def spl_to_amplitude(spl_db):
    return float(10.0 ** ((spl_db - SPL_REFERENCE_DB) / 20.0))


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.isfinite(self.samples).all():
            raise InvalidParam("clip contains non-finite samples")

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate


@dataclass
class ShotEvent:
    onset: float              # seconds, blast start within its clip
    firearm: FirearmClass
    peak_freq: float          # Hz
    blast_duration_ms: float
    amplitude: float          # linear
    has_shockwave: bool
    shockwave_duration_us: float | None = None


@dataclass
class ReverbConfig:
    delay_ms: float = 0.0
    decay: float = 0.0        # per-tap geometric factor, in [0, 1)
    taps: int = 0


@dataclass
class SceneConfig:
    duration_s: float
    snr_db: float = 40.0
    reverb: ReverbConfig = field(default_factory=ReverbConfig)
    distance_m: float = 1.0
    seed: int = 0

    def validate(self):
        if self.duration_s <= 0:
            raise InvalidParam("scene duration must be positive")
        if not 0.0 <= self.reverb.decay < 1.0:
            raise InvalidParam("reverb decay must lie in [0, 1)")
        if self.distance_m < 1.0:
            raise InvalidParam("distance must be >= 1 m")
        return self


# ---------------------------------------------------------------------------
# waveform primitives
# ---------------------------------------------------------------------------

def _biquad_bandpass(x, center_hz, q, sample_rate):
    """Second-order IIR bandpass (direct form I), peak at center_hz."""
    w0 = 2.0 * np.pi * center_hz / sample_rate
    alpha = np.sin(w0) / (2.0 * q)
    a0 = 1.0 + alpha
    b0, b1, b2 = alpha / a0, 0.0, -alpha / a0
    a1, a2 = -2.0 * np.cos(w0) / a0, (1.0 - alpha) / a0
    y = np.empty_like(x)
    x1 = x2 = y1 = y2 = 0.0
    for i, xi in enumerate(x):
        yi = b0 * xi + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2
        x2, x1 = x1, xi
        y2, y1 = y1, yi
        y[i] = yi
    return y


def _impulse(peak_freq, duration_ms, amplitude, sample_rate, q=2.5):
    """Band-shaped Friedlander pulse; shared by muzzle blasts and distractors."""
    duration_s = duration_ms / 1000.0
    n = int(np.ceil(duration_s * sample_rate))
    if amplitude == 0.0:
        return np.zeros(n)
    t = np.arange(n) / sample_rate
    t0 = duration_s / 4.0    # positive phase; the tail decays within the clip
    pulse = (1.0 - t / t0) * np.exp(-t / t0)
    shaped = _biquad_bandpass(pulse, peak_freq, q, sample_rate)
    peak = np.abs(shaped).max()
    if peak > 0:
        shaped *= amplitude / peak
    return shaped


def synth_muzzle_blast(peak_freq, duration_ms, amplitude, sample_rate=SAMPLE_RATE):
    """Muzzle blast: instant rise, exponential decay crossing zero once,
    band-shaped so the spectral peak lands within 1/3 octave of peak_freq.
    The result has max |sample| = amplitude and length ceil(duration * rate)."""
    if duration_ms <= 0 or duration_ms > 20.0:
        raise InvalidParam(f"blast duration must be in (0, 20] ms, got {duration_ms}")
    if amplitude < 0:
        raise InvalidParam("amplitude must be >= 0")
    if not 0 < peak_freq < sample_rate / 2:
        raise InvalidParam(f"peak frequency {peak_freq} outside (0, Nyquist)")
    samples = _impulse(peak_freq, duration_ms, amplitude, sample_rate)
    return AudioClip(samples, sample_rate, {
        "kind": "muzzle_blast", "peak_freq": peak_freq,
        "duration_ms": duration_ms, "amplitude": amplitude,
    })


def synth_shockwave(duration_us, amplitude, sample_rate=SAMPLE_RATE):
    """Ballistic N-wave: linear up-ramp, sign flip, linear return; zero mean."""
    if not 100.0 <= duration_us <= 1000.0:
        raise InvalidParam(f"shockwave duration must be in [100, 1000] us, got {duration_us}")
    if amplitude < 0:
        raise InvalidParam("amplitude must be >= 0")
    n = max(2, int(round(duration_us * 1e-6 * sample_rate)))
    if amplitude == 0.0:
        samples = np.zeros(n)
    else:
        u = (np.arange(n) + 0.5) / n
        v = np.where(u < 0.5, 2.0 * u, np.where(u > 0.5, 2.0 * u - 2.0, 0.0))
        v -= v.mean()
        samples = amplitude * v
    return AudioClip(samples, sample_rate, {
        "kind": "shockwave", "duration_us": duration_us, "amplitude": amplitude,
    })


# ---------------------------------------------------------------------------
# shots and scenes
# ---------------------------------------------------------------------------

def synth_shot(spec, rng, sample_rate=SAMPLE_RATE):
    """Sample one trigger pull from a class spec.

    Returns (ShotEvent, AudioClip). Burst classes place count shots at
    1/rate spacing with +-10% inter-onset jitter; each supersonic shot is
    preceded by its shockwave 0.2-1.0 ms before the blast."""
    spec.validate()
    peak_freq = float(rng.uniform(*spec.peak_freq_range))
    duration_ms = float(rng.uniform(*spec.blast_duration_range))
    spl = float(rng.uniform(*spec.spl_at_1m_range))
    amplitude = spl_to_amplitude(spl)
    has_shock = bool(rng.random() < SHOCKWAVE_PROB[spec.shockwave])
    shock_dur_us = float(rng.uniform(200.0, 400.0)) if has_shock else None
    lead_s = float(rng.uniform(0.2e-3, 1.0e-3)) if has_shock else 0.0
    shock_amp = amplitude * float(rng.uniform(0.3, 0.9)) if has_shock else 0.0

    if spec.burst is not None:
        lo, hi = spec.burst.count_range
        count = int(rng.integers(lo, hi + 1))
        rate = float(rng.uniform(*spec.burst.rate_hz_range))
        gaps = (1.0 / rate) * (1.0 + rng.uniform(-0.1, 0.1, size=max(0, count - 1)))
        onsets_s = np.concatenate([[0.0], np.cumsum(gaps)])
    else:
        count, rate = 1, None
        onsets_s = np.zeros(1)

    blast = synth_muzzle_blast(peak_freq, duration_ms, amplitude, sample_rate).samples
    lead_n = int(round(lead_s * sample_rate))
    shock = (synth_shockwave(shock_dur_us, shock_amp, sample_rate).samples
             if has_shock else np.zeros(0))

    total = int(round(onsets_s[-1] * sample_rate)) + lead_n + len(blast)
    out = np.zeros(total)
    for onset_s in onsets_s:
        i0 = int(round(onset_s * sample_rate))
        if has_shock:
            out[i0 : i0 + len(shock)] += shock
        out[i0 + lead_n : i0 + lead_n + len(blast)] += blast

    event = ShotEvent(
        onset=lead_s, firearm=spec.firearm, peak_freq=peak_freq,
        blast_duration_ms=duration_ms, amplitude=amplitude,
        has_shockwave=has_shock, shockwave_duration_us=shock_dur_us,
    )
    clip = AudioClip(out, sample_rate, {
        "kind": "shot", "firearm": spec.firearm.value, "burst_count": count,
        "burst_rate_hz": rate, "peak_freq": peak_freq,
    })
    return event, clip


def compose_scene(events, config, rng):
    """Mix (onset, clip) events into a scene.

    Pipeline: sum at onsets -> 1/distance scaling -> feed-forward comb reverb
    (taps at multiples of delay with geometric decay) -> white noise sized so
    event RMS over the active region sits snr_db above the noise RMS. With no
    events the SNR reference is full scale (RMS 1.0). The mix is peak-scaled
    to 0.99 only if it would clip."""
    config.validate()
    sr = SAMPLE_RATE
    n = int(round(config.duration_s * sr))
    mix = np.zeros(n)
    for onset_s, clip in events:
        i0 = int(round(onset_s * sr))
        if i0 < 0 or i0 + len(clip.samples) > n:
            raise SceneOverflow(
                f"event at {onset_s:.3f}s (+{clip.duration_s:.3f}s) exceeds "
                f"{config.duration_s:.3f}s scene")
        mix[i0 : i0 + len(clip.samples)] += clip.samples

    mix /= config.distance_m

    rv = config.reverb
    if rv.taps > 0 and rv.delay_ms > 0 and rv.decay > 0:
        d = int(round(rv.delay_ms * sr / 1000.0))
        if d > 0:
            wet = mix.copy()
            for k in range(1, rv.taps + 1):
                shift = k * d
                if shift >= n:
                    break
                wet[shift:] += (rv.decay ** k) * mix[: n - shift]
            mix = wet

    if events:
        peak = np.abs(mix).max()
        active = np.abs(mix) > 1e-4 * peak if peak > 0 else np.zeros(n, bool)
        ref_rms = float(np.sqrt((mix[active] ** 2).mean())) if active.any() else 0.0
    else:
        ref_rms = 1.0
    noise_rms = ref_rms * 10.0 ** (-config.snr_db / 20.0)
    out = mix + rng.normal(0.0, noise_rms, n) if noise_rms > 0 else mix

    peak = np.abs(out).max()
    if peak > 0.99:
        out = out * (0.99 / peak)
    return AudioClip(out, sr, {"kind": "scene", "snr_db": config.snr_db,
                               "distance_m": config.distance_m})


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

CLASS_ORDER = list(FirearmClass)

# Event onsets are confined to the window a 128-frame center crop of a
# 2-second clip can see (~0.24..1.74 s), so labels stay truthful downstream.
ONSET_MARGIN_S = 0.26


def reference_counts(scale):
    """Class counts proportional to the reference recording mix."""
    return {fc: int(round(REFERENCE_CLASS_MIX[fc] * scale)) for fc in CLASS_ORDER}


def _sample_scene_config(rng, duration_s, clean):
    if clean:
        return SceneConfig(duration_s, snr_db=float(rng.uniform(30.0, 50.0)),
                           reverb=ReverbConfig(), distance_m=1.0)
    return SceneConfig(
        duration_s,
        snr_db=float(rng.uniform(0.0, 15.0)),
        reverb=ReverbConfig(delay_ms=float(rng.uniform(20.0, 80.0)),
                            decay=float(rng.uniform(0.2, 0.6)),
                            taps=int(rng.integers(2, 7))),
        distance_m=float(rng.uniform(1.0, 50.0)),
    )


def _sample_onset(rng, duration_s, event_len_s):
    lo = ONSET_MARGIN_S
    hi = max(lo, duration_s - ONSET_MARGIN_S - event_len_s)
    return float(rng.uniform(lo, hi)) if hi > lo else lo


def _distractor(rng, sample_rate):
    """Door-slam-like or click-like impulse with an out-of-band spectrum."""
    if rng.random() < 0.5:
        freq = float(rng.uniform(*THUMP_FREQ_RANGE))
        dur_ms = float(rng.uniform(25.0, 60.0))
    else:
        freq = float(rng.uniform(*CLICK_FREQ_RANGE))
        dur_ms = float(rng.uniform(1.0, 5.0))
    amp = float(rng.uniform(0.2, 0.8))
    return AudioClip(_impulse(freq, dur_ms, amp, sample_rate), sample_rate,
                     {"kind": "distractor", "peak_freq": freq})


def generate_dataset(class_counts, negatives, clean, out_dir, seed,
                     duration_s=2.0, specs=None):
    """Write WAV files plus a line-delimited manifest; returns manifest rows.

    clean=True: SNR >= 30 dB, no reverb, 1 m. clean=False: SNR in [0, 15] dB,
    reverb on, distances in [1, 50] m. Negatives are noise-only scenes or
    impulse distractors. Deterministic: clip i uses rng stream (seed, i)."""
    specs = specs or DEFAULT_CLASS_SPECS
    for fc, cnt in class_counts.items():
        if cnt < 0:
            raise InvalidParam(f"negative count for {fc}")
    if negatives < 0:
        raise InvalidParam("negative count of negatives")

    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    idx = 0
    for fc in CLASS_ORDER:
        for _ in range(class_counts.get(fc, 0)):
            rng = np.random.default_rng([seed, idx])
            _, shot_clip = synth_shot(specs[fc], rng)
            cfg = _sample_scene_config(rng, duration_s, clean)
            onset = _sample_onset(rng, duration_s, shot_clip.duration_s)
            scene = compose_scene([(onset, shot_clip)], cfg, rng)
            clip_id = f"{idx:05d}_{fc.value}"
            rel = f"wav/{clip_id}.wav"
            write_wav(out_dir / rel, scene.samples, SAMPLE_RATE)
            rows.append({
                "id": clip_id, "path": rel, "detection_label": "gunshot",
                "class": fc.value, "duration_s": duration_s,
                "clean": bool(clean), "seed": int(seed),
            })
            idx += 1

    for _ in range(negatives):
        rng = np.random.default_rng([seed, idx])
        cfg = _sample_scene_config(rng, duration_s, clean)
        events = []
        if rng.random() < 2.0 / 3.0:    # impulse distractor; else pure noise
            clip = _distractor(rng, SAMPLE_RATE)
            events = [(_sample_onset(rng, duration_s, clip.duration_s), clip)]
        scene = compose_scene(events, cfg, rng)
        clip_id = f"{idx:05d}_background"
        rel = f"wav/{clip_id}.wav"
        write_wav(out_dir / rel, scene.samples, SAMPLE_RATE)
        rows.append({
            "id": clip_id, "path": rel, "detection_label": "no_gunshot",
            "class": None, "duration_s": duration_s,
            "clean": bool(clean), "seed": int(seed),
        })
        idx += 1

    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return rows

"""Shared test utilities: finite-difference gradient checking and small
synthetic dataset builders."""

import numpy as np

from gunshot_bench import dsp, models, nncore as nn, synthgun as sg

FD_STEP = 1e-3
FD_TOL = 1e-4


def numeric_grad(loss_fn, params, step=FD_STEP):
    """Central finite differences of a scalar loss w.r.t. each param tensor."""
    grads = []
    for t in params:
        g = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = t.data[idx]
            t.data[idx] = orig + step
            lp = float(loss_fn(params).data)
            t.data[idx] = orig - step
            lm = float(loss_fn(params).data)
            t.data[idx] = orig
            g[idx] = (lp - lm) / (2 * step)
        grads.append(g)
    return grads


def max_rel_err(a, b):
    denom = np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(np.asarray(a, float), 1e-6)])
    return float((np.abs(a - b) / denom).max())


def gradcheck(loss_fn, params, tol=FD_TOL):
    """Assert analytic gradients match central finite differences."""
    loss = loss_fn(params)
    nn.zero_grads(params)
    nn.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numeric_grad(loss_fn, params)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e}"
    return worst


def safe_random(rng, shape, low=0.1, high=1.0):
    """Values bounded away from zero, so relu/maxpool kinks stay out of
    finite-difference reach."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def make_clip_set(per_class, negatives, clean, seed, duration=2.0):
    """In-memory labeled mel set mirroring generate_dataset's sampling."""
    mels, y_det, y_type = [], [], []
    idx = 0
    for ci, fc in enumerate(sg.CLASS_ORDER):
        for _ in range(per_class):
            rng = np.random.default_rng([seed, idx])
            idx += 1
            _, shot = sg.synth_shot(sg.DEFAULT_CLASS_SPECS[fc], rng)
            cfg = sg._sample_scene_config(rng, duration, clean)
            onset = sg._sample_onset(rng, duration, shot.duration_s)
            scene = sg.compose_scene([(onset, shot)], cfg, rng)
            mels.append(dsp.mel_spectrogram(scene).frames)
            y_det.append(1)
            y_type.append(ci)
    for _ in range(negatives):
        rng = np.random.default_rng([seed, idx])
        idx += 1
        cfg = sg._sample_scene_config(rng, duration, clean)
        events = []
        if rng.random() < 2 / 3:
            clip = sg._distractor(rng, sg.SAMPLE_RATE)
            events = [(sg._sample_onset(rng, duration, clip.duration_s), clip)]
        scene = sg.compose_scene(events, cfg, rng)
        mels.append(dsp.mel_spectrogram(scene).frames)
        y_det.append(0)
        y_type.append(models.NEGATIVE_LABEL)
    return mels, np.array(y_det), np.array(y_type)


def detection_f1(y_true, y_pred):
    tp = int(((y_pred == 1) & (y_true == 1)).sum())
    fp = int(((y_pred == 1) & (y_true == 0)).sum())
    fn = int(((y_pred == 0) & (y_true == 1)).sum())
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0

"""Operator-facing pipeline: generate -> featurize -> train -> evaluate,
plus k-fold cross-validation. All commands echo their fully-resolved config
(defaults and seeds included) into the output directory, and rerunning an
identical config reproduces identical outputs byte for byte.

Exit codes: 0 ok, 2 usage error, 3 I/O failure, 4 numeric failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time
import wave as wave_mod
from pathlib import Path

import numpy as np

from . import dsp, evaluation, models, nncore, synthgun
from .errors import InvalidParam, NonFiniteLoss
from .manifest import (
    CLASS_NAMES,
    ManifestRow,
    load_manifest,
    manifest_digest,
    save_manifest,
)
from .synthgun import CLASS_ORDER, FirearmClass
from .wavio import read_wav

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

FEATURE_KINDS = ("mel", "melstats", "boaw", "autocorr")
DEFAULT_AUTOCORR_LAG = 2048


class UsageError(Exception):
    pass


def _default_seed():
    env = os.environ.get("GSB_SEED")
    return int(env) if env else 0


def _echo_config(args, out_dir, command):
    """Write the resolved config for provenance/reruns."""
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    resolved["command"] = command
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _parse_counts(args):
    if args.preset == "paper-ratio":
        return synthgun.reference_counts(args.scale)
    if args.counts:
        vals = [int(v) for v in args.counts.split(",")]
        if len(vals) != len(CLASS_ORDER):
            raise UsageError(f"--counts needs {len(CLASS_ORDER)} comma-separated values "
                             f"(order: {', '.join(fc.value for fc in CLASS_ORDER)})")
        return dict(zip(CLASS_ORDER, vals))
    return {fc: args.per_class for fc in CLASS_ORDER}


def cmd_generate(args):
    out_dir = Path(args.out)
    counts = _parse_counts(args)
    _echo_config(args, out_dir, "generate")
    rows = synthgun.generate_dataset(counts, args.negatives, not args.noisy,
                                     out_dir, args.seed, duration_s=args.duration)
    hist = {fc.value: counts.get(fc, 0) for fc in CLASS_ORDER}
    print(f"wrote {len(rows)} clips to {out_dir}")
    print("class histogram: " + json.dumps(hist) + f' + {{"no_gunshot": {args.negatives}}}')
    return EXIT_OK


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

def _source_hash(wav_bytes, params):
    h = hashlib.sha256(wav_bytes)
    h.update(json.dumps(params, sort_keys=True).encode())
    return h.hexdigest()


def _extract(kind, clip, boaw_codebook=None, autocorr_lag=DEFAULT_AUTOCORR_LAG):
    mel = dsp.mel_spectrogram(clip)
    if kind == "mel":
        return mel.frames
    if kind == "melstats":
        return dsp.mel_stats(mel).values
    if kind == "boaw":
        return dsp.boaw_encode(mel, boaw_codebook).values
    if kind == "autocorr":
        return dsp.autocorrelation(clip, autocorr_lag)
    raise UsageError(f"unknown feature kind {kind}")


def _load_clip(base, row):
    samples, rate = read_wav(base / row.path)
    clip = synthgun.AudioClip(samples, rate, {"id": row.id})
    if rate != dsp.SAMPLE_RATE or samples.ndim != 1:
        clip = dsp.normalize_input(clip)
    return clip


def _fit_boaw_codebook(base, rows, k, seed, max_frames_per_clip=32):
    """Codebook over a deterministic subsample of log-mel frames."""
    frames = []
    for row in rows:
        mel = dsp.mel_spectrogram(_load_clip(base, row)).frames
        rng = np.random.default_rng([seed, hash(row.id) & 0x7FFFFFFF])
        take = min(max_frames_per_clip, len(mel))
        frames.append(mel[rng.choice(len(mel), size=take, replace=False)])
    return dsp.kmeans_fit(np.concatenate(frames), k=k, iters=25, seed=seed)


def cmd_featurize(args):
    manifest_path = Path(args.manifest)
    rows = load_manifest(manifest_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(args, out_dir, "featurize")
    base = manifest_path.parent

    params = {"kind": args.kind, "win": dsp.WIN_SAMPLES, "hop": dsp.HOP_SAMPLES,
              "n_mels": dsp.N_MELS}
    if args.kind == "boaw":
        params.update(boaw_k=args.boaw_k, boaw_seed=args.seed)
    if args.kind == "autocorr":
        params.update(max_lag=args.autocorr_lag)

    codebook = None
    if args.kind == "boaw":
        codebook = _fit_boaw_codebook(base, rows, args.boaw_k, args.seed)

    computed = skipped = 0
    corrupt = []
    for row in rows:
        dest = out_dir / f"{row.id}.feat"
        try:
            wav_bytes = (base / row.path).read_bytes()
        except OSError as e:
            corrupt.append((row.id, str(e)))
            continue
        src_hash = _source_hash(wav_bytes, params)
        if dest.exists():
            try:
                hdr = dsp.read_feature_header(dest)
                if hdr.get("source_hash") == src_hash:
                    skipped += 1
                    continue
            except (InvalidParam, json.JSONDecodeError, OSError):
                pass
        try:
            clip = _load_clip(base, row)
            values = _extract(args.kind, clip, codebook, args.autocorr_lag)
        except (wave_mod.Error, EOFError, ValueError) as e:
            corrupt.append((row.id, str(e)))
            continue
        dsp.save_feature(dest, values, {"id": row.id, "kind": args.kind,
                                        "source_hash": src_hash})
        computed += 1

    index = {"kind": args.kind, "params": params, "count": computed + skipped}
    with open(out_dir / "index.json", "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    print(f"featurize: {computed} computed, {skipped} up-to-date, "
          f"{len(corrupt)} failed")
    for cid, msg in corrupt:
        print(f"  FAILED {cid}: {msg}", file=sys.stderr)
    return EXIT_IO if corrupt else EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _feature_kind(features_dir):
    with open(Path(features_dir) / "index.json", encoding="utf-8") as f:
        return json.load(f)["kind"]


def _load_features(features_dir, rows):
    feats = {}
    for row in rows:
        path = Path(features_dir) / f"{row.id}.feat"
        if not path.exists():
            raise UsageError(f"missing feature cache for {row.id}; run featurize first")
        values, _ = dsp.load_feature(path)
        feats[row.id] = values.astype(np.float64)
    return feats


def _labels_for(rows):
    y_det = np.array([1 if r.detection_label == "gunshot" else 0 for r in rows])
    y_type = np.array([r.class_index if r.class_index is not None
                       else models.NEGATIVE_LABEL for r in rows])
    return y_det, y_type


def _split_rows(rows, split):
    by_id = {r.id: r for r in rows}
    pick = lambda ids: [by_id[i] for i in ids if i in by_id]
    return pick(split.train_ids), pick(split.val_ids), pick(split.test_ids)


def _mel_set(rows, feats):
    y_det, y_type = _labels_for(rows)
    return models.LabeledMelSet([feats[r.id] for r in rows], y_det, y_type)


def _train_cnn(rows, feats, split, args, out_dir):
    train_rows, val_rows, _ = _split_rows(rows, split)
    model = models.JointCnnModel(seed=args.seed, t_frames=args.input_frames)
    config = models.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        momentum=args.momentum, lambda_type=args.lambda_type,
        early_stop_patience=args.patience, seed=args.seed,
        input_frames=args.input_frames)
    history = models.cnn_train(model, _mel_set(train_rows, feats),
                               _mel_set(val_rows, feats), config)
    nncore.save_checkpoint(out_dir / "model.ckpt", model.named_arrays())
    meta = {
        "model": "cnn", "feature_kind": "mel", "threshold": args.threshold,
        "class_list": CLASS_NAMES, "architecture_hash": model.architecture_hash(),
        "input_frames": args.input_frames, "n_mels": model.n_mels,
        "input_mean": model.input_mean, "input_std": model.input_std,
        "seed": args.seed,
    }
    return meta, history


def _train_svm(rows, feats, split, args, out_dir):
    train_rows, _, _ = _split_rows(rows, split)
    x = np.stack([feats[r.id] for r in train_rows])
    _, y_type = _labels_for(train_rows)
    scaler = models.Standardizer.fit(x)
    model = svm = models.svm_train(scaler.transform(x), y_type, c=args.svm_c,
                                   epochs=args.epochs, seed=args.seed,
                                   feature_kind=_feature_kind(args.features),
                                   n_classes=len(CLASS_NAMES))
    arrays = {
        "weights": svm.weights, "biases": svm.biases,
        "scaler_mean": scaler.mean, "scaler_std": scaler.std,
    }
    if svm.det_weight is not None:
        arrays["det_weight"] = svm.det_weight
        arrays["det_bias"] = np.array([svm.det_bias])
    nncore.save_checkpoint(out_dir / "model.ckpt", arrays)
    meta = {
        "model": "svm", "feature_kind": model.feature_kind, "threshold": 0.0,
        "class_list": CLASS_NAMES, "c": args.svm_c, "seed": args.seed,
    }
    history = [{"machine": i, "objective": h} for i, h in enumerate(svm.objective_history)]
    return meta, history


def cmd_train(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(args, out_dir, "train")
    rows = load_manifest(Path(args.manifest))
    if args.split:
        split = evaluation.SplitSpec.load(args.split)
    else:
        split = evaluation.stratified_split(rows, seed=args.seed)
    split.save(out_dir / "split.json")

    kind = _feature_kind(args.features)
    if args.model == "cnn" and kind != "mel":
        raise UsageError(f"cnn needs kind=mel features, found {kind}")
    if args.model == "svm" and kind == "mel":
        raise UsageError("svm needs vector features (melstats/boaw/autocorr), found mel")
    feats = _load_features(args.features, rows)

    t0 = time.perf_counter()
    if args.model == "cnn":
        meta, history = _train_cnn(rows, feats, split, args, out_dir)
    else:
        meta, history = _train_svm(rows, feats, split, args, out_dir)
    meta["train_seconds"] = round(time.perf_counter() - t0, 3)

    with open(out_dir / "model.meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    with open(out_dir / "history.json", "w", encoding="utf-8") as f:
        json.dump(history, f, indent=2, sort_keys=True)
    print(f"trained {args.model} in {meta['train_seconds']}s; "
          f"checkpoint at {out_dir / 'model.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def load_model(checkpoint_dir):
    checkpoint_dir = Path(checkpoint_dir)
    with open(checkpoint_dir / "model.meta.json", encoding="utf-8") as f:
        meta = json.load(f)
    arrays = nncore.load_checkpoint(checkpoint_dir / "model.ckpt")
    if meta["model"] == "cnn":
        model = models.JointCnnModel(seed=0, t_frames=meta["input_frames"],
                                     n_mels=meta["n_mels"])
        model.load_arrays(arrays)
        model.input_mean = meta["input_mean"]
        model.input_std = meta["input_std"]
        return model, meta
    svm = models.SvmModel(
        weights=arrays["weights"], biases=arrays["biases"],
        det_weight=arrays.get("det_weight"),
        det_bias=float(arrays["det_bias"][0]) if "det_bias" in arrays else 0.0,
        feature_kind=meta["feature_kind"], c=meta.get("c", 1.0))
    scaler = models.Standardizer(arrays["scaler_mean"], arrays["scaler_std"])
    return (svm, scaler), meta


def _predict_rows(model_bundle, meta, rows, feats, threshold):
    if meta["model"] == "cnn":
        preds = models.predict_dataset(model_bundle, [feats[r.id] for r in rows],
                                       threshold=threshold)
        scores = models.class_scores(preds)
    else:
        svm, scaler = model_bundle
        preds, score_rows = [], []
        for r in rows:
            x = scaler.transform(feats[r.id])
            preds.append(models.svm_prediction(svm, x, threshold=0.0))
            score_rows.append(svm_scores_for(svm, x))
        scores = np.stack(score_rows)
    return preds, scores


def svm_scores_for(svm, x):
    scores, _ = models.svm_predict(svm, x)
    return scores


def evaluate_rows(model_bundle, meta, rows, feats, threshold, *,
                  dataset_hash="", split_seed=None, config=None):
    preds, scores = _predict_rows(model_bundle, meta, rows, feats, threshold)
    true_class = [r.class_index for r in rows]
    pred_gun = [p.decided_class is not None for p in preds]
    pred_class = [int(np.argmax(p.type_posteriors)) for p in preds]
    return evaluation.build_report(
        true_class, pred_gun, pred_class, scores, threshold=threshold,
        dataset_hash=dataset_hash, split_seed=split_seed,
        model_meta={k: meta[k] for k in ("model", "feature_kind") if k in meta},
        config=config or {})


def cmd_evaluate(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(args, out_dir, "evaluate")
    rows = load_manifest(Path(args.manifest))
    model_bundle, meta = load_model(args.checkpoint)
    threshold = args.threshold if args.threshold is not None else meta.get("threshold", 0.5)

    split_seed = None
    if args.split:
        split = evaluation.SplitSpec.load(args.split)
        split_seed = split.seed
        train_rows, val_rows, test_rows = _split_rows(rows, split)
        subset = {"train": train_rows, "val": val_rows, "test": test_rows}[args.subset]
        if args.subset == "train":
            print("WARNING: evaluating on the training split (leakage)", file=sys.stderr)
    else:
        subset = rows

    kind = _feature_kind(args.features)
    expected = "mel" if meta["model"] == "cnn" else meta["feature_kind"]
    if kind != expected:
        raise UsageError(f"feature kind {kind} does not match model ({expected})")
    feats = _load_features(args.features, subset)

    try:
        report = evaluate_rows(
            model_bundle, meta, subset, feats, threshold,
            dataset_hash=manifest_digest(args.manifest), split_seed=split_seed,
            config={"subset": args.subset, "threshold": threshold})
    except NonFiniteLoss:
        raise
    evaluation.emit_report(report, out_dir / "report.json", "record-file")
    evaluation.emit_report(report, out_dir / "report.txt", "text-table")
    print(evaluation.render_text_report(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# crossval
# ---------------------------------------------------------------------------

def cmd_crossval(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(args, out_dir, "crossval")
    rows = load_manifest(Path(args.manifest))
    split = evaluation.stratified_split(rows, seed=args.seed)
    pool_ids = set(split.train_ids) | set(split.val_ids)
    pool = [r for r in rows if r.id in pool_ids]
    by_class = {}
    for r in pool:
        by_class.setdefault(r.class_name or "no_gunshot", []).append(r.id)
    plan = evaluation.kfold(by_class, k=args.k, seed=args.seed)
    feats = _load_features(args.features, pool)
    by_id = {r.id: r for r in pool}

    fold_metrics = []
    for i, fold in enumerate(plan.folds):
        fold_dir = out_dir / f"fold{i}"
        fold_dir.mkdir(exist_ok=True)
        train_rows = [by_id[x] for x in plan.train_ids(i)]
        test_rows = [by_id[x] for x in fold]
        if args.model == "cnn":
            model = models.JointCnnModel(seed=args.seed, t_frames=args.input_frames)
            config = models.TrainConfig(
                epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                momentum=args.momentum, lambda_type=args.lambda_type,
                early_stop_patience=args.patience, seed=args.seed,
                input_frames=args.input_frames)
            # last 20% of the training pool (per fold) serves as val
            n_val = max(1, len(train_rows) // 5)
            models.cnn_train(model, _mel_set(train_rows[:-n_val], feats),
                             _mel_set(train_rows[-n_val:], feats), config)
            bundle, meta = model, {"model": "cnn", "feature_kind": "mel"}
            threshold = args.threshold if args.threshold is not None else 0.5
        else:
            x = np.stack([feats[r.id] for r in train_rows])
            _, y_type = _labels_for(train_rows)
            scaler = models.Standardizer.fit(x)
            svm = models.svm_train(scaler.transform(x), y_type, c=args.svm_c,
                                   epochs=args.epochs, seed=args.seed,
                                   n_classes=len(CLASS_NAMES))
            bundle, meta = (svm, scaler), {"model": "svm", "feature_kind": "vector"}
            threshold = 0.0
        report = evaluate_rows(bundle, meta, test_rows, feats, threshold,
                               dataset_hash=manifest_digest(args.manifest),
                               split_seed=args.seed, config={"fold": i})
        evaluation.emit_report(report, fold_dir / "report.json", "record-file")
        fold_metrics.append({
            "fold": i,
            "test_size": len(test_rows),
            "detection_f1_gunshot": report.detection["per_class"]["gunshot"]["f1"],
            "type_macro_f1_overall": evaluation.macro_f1(report.type_overall["per_class"]),
            "type_macro_f1_relevant": evaluation.macro_f1(report.type_relevant["per_class"]),
            "mean_ap": report.mean_ap,
        })

    keys = ["detection_f1_gunshot", "type_macro_f1_overall",
            "type_macro_f1_relevant", "mean_ap"]
    aggregate = {}
    for key in keys:
        vals = [m[key] for m in fold_metrics if m[key] is not None]
        aggregate[key] = {"mean": float(np.mean(vals)) if vals else None,
                          "std": float(np.std(vals)) if vals else None}
    with open(out_dir / "aggregate.json", "w", encoding="utf-8") as f:
        json.dump({"folds": fold_metrics, "aggregate": aggregate}, f,
                  indent=2, sort_keys=True)
    print(json.dumps(aggregate, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--model", choices=("svm", "cnn"), required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lambda-type", type=float, default=1.0)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--input-frames", type=int, default=models.T_FIXED_DEFAULT)
    p.add_argument("--svm-c", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gsb",
        description="Synthetic gunshot audio benchmark pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a labeled WAV dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--counts", help="comma-separated per-class counts")
    g.add_argument("--preset", choices=("paper-ratio",))
    g.add_argument("--scale", type=float, default=0.05,
                   help="scale factor for the preset class mix")
    g.add_argument("--negatives", type=int, default=0)
    g.add_argument("--noisy", action="store_true",
                   help="low SNR, reverb, random distances (default is clean)")
    g.add_argument("--duration", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=_default_seed())
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("featurize", help="extract feature caches for a manifest")
    f.add_argument("--manifest", required=True)
    f.add_argument("--kind", choices=FEATURE_KINDS, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--boaw-k", type=int, default=64)
    f.add_argument("--autocorr-lag", type=int, default=DEFAULT_AUTOCORR_LAG)
    f.add_argument("--seed", type=int, default=_default_seed())
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="train a classifier on cached features")
    t.add_argument("--manifest", required=True)
    t.add_argument("--features", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", help="reuse an existing split file")
    t.add_argument("--seed", type=int, default=_default_seed())
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint, emit reports")
    e.add_argument("--checkpoint", required=True,
                   help="training output directory (model.ckpt + model.meta.json)")
    e.add_argument("--manifest", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split")
    e.add_argument("--subset", choices=("train", "val", "test"), default="test")
    e.add_argument("--threshold", type=float, default=None)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("crossval", help="k-fold cross-validation over train+val")
    c.add_argument("--manifest", required=True)
    c.add_argument("--features", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--seed", type=int, default=_default_seed())
    _add_train_flags(c)
    c.set_defaults(func=cmd_crossval)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidParam as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Classifiers: a one-vs-rest linear SVM baseline and a joint
detection + gun-type CNN (shared conv trunk, two heads), with training loops.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .errors import DegenerateData, NonFiniteLoss, NonFiniteTensor, ShapeMismatch
from .manifest import CLASS_NAMES
from .dsp import LOG_EPS

N_CLASSES = len(CLASS_NAMES)
NEGATIVE_LABEL = -1          # type label for no-gunshot examples
PAD_VALUE = float(np.log(LOG_EPS))   # log-mel silence floor used for padding


# ---------------------------------------------------------------------------
# shared bits
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8))

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass
class Prediction:
    p_gunshot: float
    type_posteriors: np.ndarray      # 5-simplex
    decided_class: str | None        # argmax class if detected, else None

    @property
    def decided_label(self):
        return self.decided_class if self.decided_class else "no_gunshot"


def _decide(p, posteriors, threshold):
    if p >= threshold:
        return CLASS_NAMES[int(np.argmax(posteriors))]
    return None


# ---------------------------------------------------------------------------
# SVM baseline
# ---------------------------------------------------------------------------

@dataclass
class SvmModel:
    weights: np.ndarray              # [K, d] one-vs-rest machines
    biases: np.ndarray               # [K]
    det_weight: np.ndarray | None    # optional binary gunshot machine
    det_bias: float
    feature_kind: str
    c: float
    objective_history: list = field(default_factory=list)  # per machine


def _hinge_objective(x, y, w, b, c):
    """||w||^2 / (2C) + total hinge loss (sum form: points outside the margin
    contribute nothing, so dropping one leaves the objective unchanged)."""
    margins = 1.0 - y * (x @ w + b)
    return float((w @ w) / (2.0 * c) + np.maximum(margins, 0.0).sum())


def _train_binary_svm(x, y, c, epochs, rng, lr0=0.5):
    """Subgradient descent on the L2-regularized hinge loss with a
    1/(1 + lr0*lam*t) step decay (strongly convex rate) and deterministic
    seeded shuffling. Iterates over the second half of training are tail-
    averaged; the better of (averaged, best-seen) by full objective is
    returned, and the recorded history tracks the running best, so it is
    non-increasing."""
    n, d = x.shape
    lam = 1.0 / (c * n)     # per-example weight of the regularizer
    w = np.zeros(d)
    b = 0.0
    best = _hinge_objective(x, y, w, b, c)
    best_w, best_b = w.copy(), b
    history = [best]
    total = epochs * n
    tail_start = total // 2
    w_sum = np.zeros(d)
    b_sum = 0.0
    tail_count = 0
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = lr0 / (1.0 + lr0 * lam * t)
            margin = y[i] * (x[i] @ w + b)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * y[i] * x[i]
                b += eta * y[i]
            if t > tail_start:
                w_sum += w
                b_sum += b
                tail_count += 1
        obj = _hinge_objective(x, y, w, b, c)
        if obj < best:
            best, best_w, best_b = obj, w.copy(), b
        history.append(best)
    if tail_count:
        w_avg = w_sum / tail_count
        b_avg = b_sum / tail_count
        obj_avg = _hinge_objective(x, y, w_avg, b_avg, c)
        if obj_avg < best:
            best, best_w, best_b = obj_avg, w_avg, b_avg
            history[-1] = best
    return best_w, best_b, history


def svm_train(features, labels, c=1.0, epochs=100, seed=0, feature_kind="melstats",
              n_classes=None, fit_detector=True):
    """Fit one-vs-rest binary machines on standardized features.

    labels: int array; 0..K-1 are gun types, NEGATIVE_LABEL marks
    no-gunshot examples (negative for every machine). If both polarities of
    the detection task are present, a separate binary detector is fit too."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(labels) != len(x):
        raise ShapeMismatch("features must be [n, d] with one label per row")
    k = int(n_classes) if n_classes else int(labels.max()) + 1
    present = np.unique(labels[labels >= 0])
    if len(present) < 2:
        raise DegenerateData(f"need >= 2 classes, got {len(present)}")
    for cls in range(k):
        if not np.any(labels == cls):
            raise DegenerateData(f"class {cls} has no training examples")

    rng = np.random.default_rng(seed)
    weights = np.zeros((k, x.shape[1]))
    biases = np.zeros(k)
    histories = []
    for cls in range(k):
        y = np.where(labels == cls, 1.0, -1.0)
        weights[cls], biases[cls], hist = _train_binary_svm(x, y, c, epochs, rng)
        histories.append(hist)

    det_w, det_b = None, 0.0
    if fit_detector:
        y_det = np.where(labels >= 0, 1.0, -1.0)
        if len(np.unique(y_det)) == 2:
            det_w, det_b, hist = _train_binary_svm(x, y_det, c, epochs, rng)
            histories.append(hist)

    return SvmModel(weights, biases, det_w, det_b, feature_kind, float(c), histories)


def svm_predict(model, feature):
    """Per-class decision scores w_c . x + b_c; argmax ties go to the lowest index."""
    x = np.asarray(feature, dtype=np.float64)
    scores = model.weights @ x + model.biases
    return scores, int(np.argmax(scores))


def svm_prediction(model, feature, threshold=0.0):
    """Wrap SVM scores as a Prediction (detector score -> pseudo-probability)."""
    scores, best = svm_predict(model, feature)
    if model.det_weight is not None:
        det_score = float(model.det_weight @ np.asarray(feature, float) + model.det_bias)
    else:
        det_score = float(scores[best])
    p = 1.0 / (1.0 + np.exp(-det_score))
    e = np.exp(scores - scores.max())
    posteriors = e / e.sum()
    decided = CLASS_NAMES[best] if det_score >= threshold else None
    return Prediction(p, posteriors, decided)


# ---------------------------------------------------------------------------
# joint CNN
# ---------------------------------------------------------------------------

TRUNK_CHANNELS = (16, 32, 64)
HEAD_WIDTH = 32
T_FIXED_DEFAULT = 128


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    lambda_type: float = 1.0
    early_stop_patience: int = 5
    seed: int = 0
    input_frames: int = T_FIXED_DEFAULT

    def validate(self):
        if self.lambda_type < 0:
            raise ShapeMismatch("lambda_type must be >= 0")
        if self.input_frames <= 0:
            raise ShapeMismatch("input_frames must be positive")
        return self


class JointCnnModel:
    """Shared conv trunk (3x3 convs, 16->32->64 channels, 2x2 max pools,
    global average pool) feeding a sigmoid detection head and a softmax
    gun-type head."""

    def __init__(self, seed=0, t_frames=T_FIXED_DEFAULT, n_mels=128):
        self.t_frames = int(t_frames)
        self.n_mels = int(n_mels)
        self.input_mean = 0.0
        self.input_std = 1.0
        rng = np.random.default_rng(seed)
        p = {}
        cin = 1
        for li, cout in enumerate(TRUNK_CHANNELS, start=1):
            p[f"conv{li}.w"] = self._he(rng, (cout, cin, 3, 3), cin * 9)
            p[f"conv{li}.b"] = nn.Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        trunk_out = TRUNK_CHANNELS[-1]
        for head, width_out in (("det", 1), ("typ", N_CLASSES)):
            p[f"{head}1.w"] = self._he(rng, (HEAD_WIDTH, trunk_out), trunk_out)
            p[f"{head}1.b"] = nn.Tensor(np.zeros(HEAD_WIDTH), requires_grad=True)
            p[f"{head}2.w"] = self._he(rng, (width_out, HEAD_WIDTH), HEAD_WIDTH)
            p[f"{head}2.b"] = nn.Tensor(np.zeros(width_out), requires_grad=True)
        self.params = p

    @staticmethod
    def _he(rng, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return nn.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def named_arrays(self):
        out = {name: t.data for name, t in self.params.items()}
        out["input_stats"] = np.array([self.input_mean, self.input_std])
        return out

    def load_arrays(self, arrays):
        for name, t in self.params.items():
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"checkpoint entry {name} has shape {arr.shape}")
            t.data = arr.astype(np.float64).copy()
        if "input_stats" in arrays:
            self.input_mean, self.input_std = map(float, arrays["input_stats"])

    def architecture_hash(self):
        desc = json.dumps({name: list(t.data.shape) for name, t in self.params.items()},
                          sort_keys=True)
        return hashlib.sha256(desc.encode()).hexdigest()[:16]

    # -- input handling -----------------------------------------------------

    def prepare_input(self, mel_frames):
        """Center-crop or pad log-mel frames to t_frames, then standardize."""
        m = np.asarray(mel_frames, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != self.n_mels:
            raise ShapeMismatch(f"expected [T, {self.n_mels}] frames, got {m.shape}")
        t = self.t_frames
        if m.shape[0] > t:
            start = (m.shape[0] - t) // 2
            m = m[start : start + t]
        elif m.shape[0] < t:
            padded = np.full((t, self.n_mels), PAD_VALUE)
            start = (t - m.shape[0]) // 2
            padded[start : start + m.shape[0]] = m
            m = padded
        return (m - self.input_mean) / self.input_std

    # -- forward ------------------------------------------------------------

    def forward_graph(self, x_batch):
        """x_batch: np [B, 1, T, M] (already standardized).
        Returns (p_gunshot Tensor [B], type_logits Tensor [B, 5])."""
        p = self.params
        h = nn.Tensor(x_batch)
        for li in range(1, len(TRUNK_CHANNELS) + 1):
            h = nn.conv2d(h, p[f"conv{li}.w"], p[f"conv{li}.b"], stride=1, pad=1)
            # relu(maxpool(x)) == maxpool(relu(x)) (values and gradients);
            # pooling first runs the activation on a 4x smaller tensor.
            h = nn.maxpool2d(h, 2, 2)
            h = nn.relu(h)
        h = nn.global_avg_pool(h)
        det = nn.relu(nn.dense(h, p["det1.w"], p["det1.b"]))
        det = nn.dense(det, p["det2.w"], p["det2.b"])
        p_gun = nn.reshape(nn.sigmoid(det), (-1,))
        typ = nn.relu(nn.dense(h, p["typ1.w"], p["typ1.b"]))
        type_logits = nn.dense(typ, p["typ2.w"], p["typ2.b"])
        return p_gun, type_logits

    def forward_arrays(self, x_batch):
        """Forward pass without gradient tracking; returns numpy arrays."""
        p_gun, logits = self.forward_graph(x_batch)
        post = nn.softmax(logits, axis=1)
        return p_gun.data.copy(), post.data.copy()


def cnn_forward(model, mel_frames, threshold=0.5):
    """Run one clip through the joint CNN; deterministic."""
    x = model.prepare_input(mel_frames)[None, None, :, :]
    p, post = model.forward_arrays(x)
    posteriors = post[0]
    return Prediction(float(p[0]), posteriors, _decide(float(p[0]), posteriors, threshold))


def joint_loss(pred, detection_label, type_label=None, lambda_type=1.0):
    """Scalar joint loss for one prediction: detection BCE plus, for true
    gunshots only, the weighted type cross-entropy."""
    y = 1.0 if detection_label == "gunshot" or detection_label == 1 else 0.0
    p = np.clip(pred.p_gunshot, nn.BCE_EPS, 1.0 - nn.BCE_EPS)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    if y == 1.0 and type_label is not None:
        q = np.clip(pred.type_posteriors[int(type_label)], 1e-300, None)
        loss += lambda_type * -np.log(q)
    return float(loss)


def batch_loss_graph(model, x_batch, y_det, y_type, lambda_type):
    """Joint loss over a batch as a graph node: mean detection BCE plus
    lambda * masked type cross-entropy (positives only)."""
    p_gun, type_logits = model.forward_graph(x_batch)
    det_loss = nn.bce(p_gun, y_det.astype(np.float64))
    mask = ((y_det == 1) & (y_type >= 0)).astype(np.float64)
    safe_cls = np.where(y_type >= 0, y_type, 0)
    type_loss = nn.cross_entropy(type_logits, safe_cls, sample_weight=mask)
    return nn.add(det_loss, nn.mul(type_loss, float(lambda_type)))


@dataclass
class LabeledMelSet:
    """Log-mel clips with detection (0/1) and type (-1 or 0..4) labels."""
    mels: list
    y_det: np.ndarray
    y_type: np.ndarray

    def __len__(self):
        return len(self.mels)


def _stack_inputs(model, mels):
    return np.stack([model.prepare_input(m) for m in mels])[:, None, :, :]


def _eval_loss(model, x, y_det, y_type, lam, batch_size=64):
    total = 0.0
    for i in range(0, len(x), batch_size):
        sl = slice(i, min(i + batch_size, len(x)))
        loss = batch_loss_graph(model, x[sl], y_det[sl], y_type[sl], lam)
        total += float(loss.data) * (sl.stop - sl.start)
    return total / len(x)


def cnn_train(model, train_set, val_set, config):
    """Minibatch momentum SGD with early stopping on validation joint loss.

    Returns the training history; the model is left holding the best-val
    parameters. Raises NonFiniteLoss (with diagnostics) if the loss leaves
    the finite domain."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    # input standardization from the training distribution
    flat = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in train_set.mels])
    model.input_mean = float(flat.mean())
    model.input_std = float(max(flat.std(), 1e-8))

    x_train = _stack_inputs(model, train_set.mels)
    x_val = _stack_inputs(model, val_set.mels)
    params = model.parameters()
    state = nn.OptimizerState(config.lr, config.momentum)
    n = len(x_train)

    history = []
    best_val = np.inf
    best_snapshot = None
    bad_epochs = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                loss = batch_loss_graph(model, x_train[idx], train_set.y_det[idx],
                                        train_set.y_type[idx], config.lambda_type)
            except NonFiniteTensor as e:
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: {e}") from e
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: loss={loss.data}")
            nn.zero_grads(params)
            nn.backward(loss)
            nn.sgd_step(params, [p.grad for p in params], state)
            epoch_loss += float(loss.data) * len(idx)
        train_loss = epoch_loss / n
        val_loss = _eval_loss(model, x_val, val_set.y_det, val_set.y_type,
                              config.lambda_type)
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(f"epoch {epoch}: validation loss={val_loss}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})

        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = {k: t.data.copy() for k, t in model.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
        if bad_epochs >= config.early_stop_patience:
            break

    if best_snapshot is not None:
        for k, t in model.params.items():
            t.data = best_snapshot[k]
    return history


def predict_dataset(model, mels, threshold=0.5):
    """Predictions in input order; decided label = gunshot iff p >= threshold.

    Clips run one at a time so results match cnn_forward bit for bit
    (batched GEMMs round differently for different batch shapes)."""
    return [cnn_forward(model, m, threshold=threshold) for m in mels]


def class_scores(predictions):
    """Score matrix [n, K] for ranking-based metrics: p_gunshot * posterior."""
    return np.array([p.p_gunshot * p.type_posteriors for p in predictions])

"""Compact convolutional feature extractor with hand-rolled training.

Six 3x3 same-padded convolutions with Leaky ReLU, 2x2 max pooling after the
third and sixth, dropout after each pooling block, and L2 weight decay.  A
temporary single-logit sigmoid head is attached for training and stripped
when the network is used as a feature extractor.  All math is plain numpy so
analytic gradients can be verified against finite differences.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture description; the default is the 8-layer extractor
    (6 convolutions + 2 pooling layers) producing 4096-dim features."""

    input_shape: tuple[int, int, int] = (32, 32, 3)
    conv_filters: tuple[int, ...] = (32, 32, 32, 64, 64, 64)
    kernel: tuple[int, int] = (3, 3)
    pool_after: tuple[int, ...] = (3, 6)  # 1-based conv layer indices
    leaky_alpha: float = 0.1
    dropout_rates: tuple[float, ...] = (0.25, 0.25)
    l2_coefficient: float = 1e-4

    def validate(self) -> None:
        if self.kernel != (3, 3):
            raise ValueError("kernel size is fixed at 3x3")
        if not self.conv_filters or any(f < 1 for f in self.conv_filters):
            raise ValueError("conv_filters must be positive")
        n = len(self.conv_filters)
        if list(self.pool_after) != sorted(set(self.pool_after)) or any(
            not 1 <= p <= n for p in self.pool_after
        ):
            raise ValueError("pool_after must be increasing 1-based conv indices")
        if len(self.dropout_rates) != len(self.pool_after):
            raise ValueError("need one dropout rate per pooling block")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ValueError("dropout rates must be in [0, 1)")
        if self.leaky_alpha < 0 or self.l2_coefficient < 0:
            raise ValueError("leaky_alpha and l2_coefficient must be non-negative")
        h, w, c = self.input_shape
        if h < 1 or w < 1 or c < 1:
            raise ValueError("bad input shape")
        for li in range(1, n + 1):
            if li in self.pool_after:
                if h % 2 or w % 2:
                    raise ValueError(f"spatial size {h}x{w} not poolable at layer {li}")
                h, w = h // 2, w // 2

    def feature_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.input_shape
        for li in range(1, len(self.conv_filters) + 1):
            if li in self.pool_after:
                h, w = h // 2, w // 2
        return h, w, self.conv_filters[-1]

    @property
    def feature_dim(self) -> int:
        h, w, f = self.feature_shape()
        return h * w * f


@dataclass
class NetParams:
    """Per-layer weights/biases plus the temporary training head."""

    config: NetConfig
    weights: list[np.ndarray]  # (kh, kw, c_in, c_out) per conv layer
    biases: list[np.ndarray]  # (c_out,) per conv layer
    head_w: np.ndarray  # (feature_dim,)
    head_b: np.ndarray  # scalar ()
    seed: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            config=self.config,
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
            head_w=self.head_w.astype(dtype),
            head_b=self.head_b.astype(dtype),
            seed=self.seed,
        )

    def copy(self) -> "NetParams":
        return copy.deepcopy(self)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter tensors in a fixed order (conv pairs, then head)."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"conv{i}_w", w))
            out.append((f"conv{i}_b", b))
        out.append(("head_w", self.head_w))
        out.append(("head_b", self.head_b))
        return out


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    early_stop_patience: int = 5
    precision_mode: str = "fast"  # fast: float32, check: float64

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.precision_mode not in ("fast", "check"):
            raise ValueError("precision_mode must be 'fast' or 'check'")

    @property
    def dtype(self):
        return np.float64 if self.precision_mode == "check" else np.float32


def build(config: NetConfig, seed: int = 0) -> NetParams:
    """He-initialized parameters; bit-identical for a fixed seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    kh, kw = config.kernel
    c_in = config.input_shape[2]
    for f in config.conv_filters:
        fan_in = kh * kw * c_in
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (kh, kw, c_in, f)).astype(np.float32))
        biases.append(np.zeros(f, dtype=np.float32))
        c_in = f
    d = config.feature_dim
    head_w = rng.normal(0.0, np.sqrt(2.0 / d), d).astype(np.float32)
    head_b = np.zeros((), dtype=np.float32)
    return NetParams(config=config, weights=weights, biases=biases, head_w=head_w, head_b=head_b, seed=seed)


# ---------------------------------------------------------------------------
# layer primitives

def _im2col(x_padded: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, hp, wp, c = x_padded.shape
    h, w = hp - kh + 1, wp - kw + 1
    s = x_padded.strides
    view = np.lib.stride_tricks.as_strided(
        x_padded, (b, h, w, kh, kw, c), (s[0], s[1], s[2], s[1], s[2], s[3])
    )
    return view.reshape(b * h * w, kh * kw * c)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded stride-1 convolution.  Returns output and backward cache."""
    kh, kw, c_in, c_out = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw)
    z = cols @ w.reshape(-1, c_out) + b
    z = z.reshape(x.shape[0], x.shape[1], x.shape[2], c_out)
    return z, (cols, x.shape)


def _conv_backward(dz: np.ndarray, w: np.ndarray, cache):
    cols, x_shape = cache
    b, h, w_sp, _ = x_shape
    kh, kw, c_in, c_out = w.shape
    dz_mat = dz.reshape(-1, c_out)
    dw = (cols.T @ dz_mat).reshape(w.shape)
    db = dz_mat.sum(axis=0)
    dcols = dz_mat @ w.reshape(-1, c_out).T
    dcols = dcols.reshape(b, h, w_sp, kh, kw, c_in)
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((b, h + 2 * ph, w_sp + 2 * pw, c_in), dtype=dz.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w_sp, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, ph:ph + h, pw:pw + w_sp, :]
    return dx, dw, db


def _maxpool_forward(x: np.ndarray):
    """2x2 stride-2 max pooling; ties route to the first window position."""
    b, h, w, c = x.shape
    windows = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        b, h // 2, w // 2, c, 4
    )
    idx = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return pooled, (idx, x.shape)


def _maxpool_backward(dy: np.ndarray, cache):
    idx, x_shape = cache
    b, h, w, c = x_shape
    dwin = np.zeros((b, h // 2, w // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x_shape)


# ---------------------------------------------------------------------------
# forward / backward over the whole net

def _run_forward(params: NetParams, batch: np.ndarray, dropout_rng):
    """Forward pass recording a tape for backprop.

    ``dropout_rng`` None means deterministic (dropout disabled), which is the
    inference behavior.
    """
    cfg = params.config
    x = np.asarray(batch, dtype=params.dtype)
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match input {cfg.input_shape}")
    tape = []
    block = 0
    for li in range(len(cfg.conv_filters)):
        z, conv_cache = _conv_forward(x, params.weights[li], params.biases[li])
        pos = z >= 0
        x = np.where(pos, z, cfg.leaky_alpha * z)
        tape.append(("conv", li, conv_cache, pos))
        if (li + 1) in cfg.pool_after:
            x, pool_cache = _maxpool_forward(x)
            tape.append(("pool", pool_cache))
            rate = cfg.dropout_rates[block]
            if dropout_rng is not None and rate > 0.0:
                mask = (dropout_rng.random(x.shape) >= rate) / (1.0 - rate)
                mask = mask.astype(x.dtype)
                x = x * mask
                tape.append(("drop", mask))
            block += 1
    features = x.reshape(x.shape[0], -1)
    logits = features @ params.head_w + params.head_b
    return features, logits, tape


def forward(
    params: NetParams,
    batch: np.ndarray,
    mode: str = "infer",
    dropout_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the network; returns (features B x D, one logit per sample).

    ``mode='train'`` applies dropout (seeded from the params when no
    generator is supplied); inference mode is deterministic.
    """
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    rng = None
    if mode == "train":
        rng = dropout_rng if dropout_rng is not None else np.random.default_rng(params.seed)
    features, logits, _ = _run_forward(params, batch, rng)
    return features, logits


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _loss_and_grads(params: NetParams, x: np.ndarray, y: np.ndarray, dropout_rng):
    """Mean binary cross-entropy + L2 penalty, with gradients for every tensor."""
    cfg = params.config
    features, logits, tape = _run_forward(params, x, dropout_rng)
    y = np.asarray(y, dtype=logits.dtype)
    n = logits.shape[0]
    bce = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    l2 = cfg.l2_coefficient
    reg = l2 * (sum(float((w * w).sum()) for w in params.weights) + float((params.head_w ** 2).sum()))
    loss = bce + reg

    grads = {name: None for name, _ in params.tensors()}
    dz = (_sigmoid(logits) - y) / n
    grads["head_w"] = features.T @ dz + 2.0 * l2 * params.head_w
    grads["head_b"] = np.asarray(dz.sum(), dtype=logits.dtype)
    dx = np.outer(dz, params.head_w).reshape((n,) + cfg.feature_shape())

    for entry in reversed(tape):
        if entry[0] == "drop":
            dx = dx * entry[1]
        elif entry[0] == "pool":
            dx = _maxpool_backward(dx, entry[1])
        else:
            _, li, conv_cache, pos = entry
            dz_conv = np.where(pos, dx, cfg.leaky_alpha * dx)
            dx, dw, db = _conv_backward(dz_conv, params.weights[li], conv_cache)
            grads[f"conv{li}_w"] = dw + 2.0 * l2 * params.weights[li]
            grads[f"conv{li}_b"] = db
    return loss, grads


def _loss_only(params: NetParams, x: np.ndarray, y: np.ndarray) -> float:
    cfg = params.config
    _, logits, _ = _run_forward(params, x, None)
    bce = float(np.mean(np.logaddexp(0.0, logits) - np.asarray(y, dtype=logits.dtype) * logits))
    reg = cfg.l2_coefficient * (
        sum(float((w * w).sum()) for w in params.weights) + float((params.head_w ** 2).sum())
    )
    return bce + reg


def _batched_logits(params: NetParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        _, logits = forward(params, x[i:i + batch_size], mode="infer")
        out.append(logits)
    return np.concatenate(out) if out else np.zeros(0, dtype=params.dtype)


def _binary_f1(preds: np.ndarray, truth: np.ndarray) -> float:
    tp = int(np.sum((preds == 1) & (truth == 1)))
    fp = int(np.sum((preds == 1) & (truth == 0)))
    fn = int(np.sum((preds == 0) & (truth == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def train(
    params: NetParams,
    train_data: tuple[np.ndarray, np.ndarray],
    valid_data: tuple[np.ndarray, np.ndarray],
    tc: TrainConfig,
) -> tuple[NetParams, list[dict]]:
    """Adam on cross-entropy + L2, early-stopped on validation F1.

    Returns the parameters from the best-validation epoch and a per-epoch
    history of mean training loss and validation F1.  Fully deterministic for
    a fixed seed.  Raises TrainingDivergedError on a non-finite loss.
    """
    if tc.epochs == 0:
        return params, []
    x_train, y_train = train_data
    x_valid, y_valid = valid_data
    if len(x_train) == 0 or len(x_valid) == 0:
        raise ValueError("train and validation sets must be non-empty")
    y_train = np.asarray(y_train)
    y_valid = np.asarray(y_valid)

    work = params.astype(tc.dtype)
    rng = np.random.default_rng(tc.seed)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {name: np.zeros_like(t) for name, t in work.tensors()}
    v = {name: np.zeros_like(t) for name, t in work.tensors()}
    step = 0

    history: list[dict] = []
    best_f1 = -1.0
    best_params = work.copy()
    since_best = 0

    for epoch in range(tc.epochs):
        perm = rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(perm), tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            loss, grads = _loss_and_grads(work, x_train[idx], y_train[idx], rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, step {step}"
                )
            losses.append(loss)
            step += 1
            bc1 = 1.0 - beta1 ** step
            bc2 = 1.0 - beta2 ** step
            for name, tensor in work.tensors():
                g = grads[name]
                m[name] = beta1 * m[name] + (1.0 - beta1) * g
                v[name] = beta2 * v[name] + (1.0 - beta2) * (g * g)
                tensor -= (tc.learning_rate * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)).astype(tensor.dtype)

        val_logits = _batched_logits(work, x_valid)
        val_f1 = _binary_f1((val_logits > 0).astype(int), y_valid)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_f1": val_f1})

        if val_f1 > best_f1:
            best_f1 = val_f1
            best_params = work.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= tc.early_stop_patience > 0:
                break
    return best_params, history


def extract_features(params: NetParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode features for a batch of images; the head is ignored."""
    out = []
    for i in range(0, len(images), batch_size):
        feats, _ = forward(params, images[i:i + batch_size], mode="infer")
        out.append(feats)
    if not out:
        return np.zeros((0, params.config.feature_dim), dtype=params.dtype)
    return np.concatenate(out)


def gradient_check(
    params: NetParams,
    sample: tuple[np.ndarray, float],
    epsilon: float = 1e-5,
    num_coords: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central finite differences.

    Runs in float64 (check mode) with dropout disabled, over a random subset
    of at least ``num_coords`` parameter coordinates.
    """
    x, y = sample
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    y_arr = np.asarray([y] if np.isscalar(y) else y, dtype=np.float64).reshape(-1)

    work = params.astype(np.float64)
    _, analytic = _loss_and_grads(work, x, y_arr, None)

    named = work.tensors()
    sizes = np.array([t.size for _, t in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(num_coords, total), replace=False)

    bounds = np.cumsum(sizes)
    max_err = 0.0
    for flat in chosen:
        ti = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[ti - 1] if ti else 0))
        name, tensor = named[ti]
        view = tensor.reshape(-1)
        orig = view[offset]
        view[offset] = orig + epsilon
        lo_plus = _loss_only(work, x, y_arr)
        view[offset] = orig - epsilon
        lo_minus = _loss_only(work, x, y_arr)
        view[offset] = orig
        numeric = (lo_plus - lo_minus) / (2.0 * epsilon)
        a = float(analytic[name].reshape(-1)[offset])
        err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8)
        max_err = max(max_err, err)
    return max_err

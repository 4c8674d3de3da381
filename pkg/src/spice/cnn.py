"""2-D CNN classifier over frontend feature maps, trained jointly with the
learnable frontend.

Blocks alternate 3-tap convolutions along time and frequency, each followed
by a rectifier and an optional stride-2 max pool along the block's own axis.
A global average pool (excluding padded frames) feeds an affine head. All
gradients are computed manually; convolutions are evaluated as batched
matmuls over shifted views.

Batch members are zero-padded to a common length. Invalid frames are zeroed
after every block, which makes logits exactly independent of how much padding
a member carries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import frontend as fe
from .audio import AudioClip, load_wav
from .data import ManifestRow
from .labels import softmax
from .metrics import binarize_mildplus

TIME_AXIS = 3
FREQ_AXIS = 2
_AXES = {"time": TIME_AXIS, "freq": FREQ_AXIS}


@dataclass
class CnnConfig:
    n_classes: int
    blocks: list[tuple[str, int, str]]  # (axis, out_channels, pool none|max2)

    def __post_init__(self):
        if self.n_classes not in (2, 5):
            raise ValueError(f"n_classes must be 2 or 5, got {self.n_classes}")
        if len(self.blocks) < 2:
            raise ValueError("need at least 2 blocks")
        for i, (axis, ch, pool) in enumerate(self.blocks):
            expected = "time" if i % 2 == 0 else "freq"
            if axis != expected:
                raise ValueError(
                    f"blocks must alternate axes starting with time; "
                    f"block {i} is {axis!r}"
                )
            if ch < 1:
                raise ValueError(f"block {i}: out_channels must be >= 1")
            if pool not in ("none", "max2"):
                raise ValueError(f"block {i}: unknown pool {pool!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    weight_decay: float = 1e-6

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "weight_decay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


def default_config(n_classes: int) -> CnnConfig:
    return CnnConfig(
        n_classes=n_classes,
        blocks=[("time", 32, "max2"), ("freq", 32, "none"),
                ("time", 64, "max2"), ("freq", 64, "none")],
    )


def paper_scale_config(n_classes: int) -> CnnConfig:
    """Preset targeting roughly 8M parameters; nothing depends on it."""
    return CnnConfig(
        n_classes=n_classes,
        blocks=[("time", 384, "max2"), ("freq", 384, "none"),
                ("time", 768, "max2"), ("freq", 768, "none"),
                ("time", 1024, "max2"), ("freq", 1024, "none")],
    )


def init_weights(config: CnnConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    weights: dict[str, np.ndarray] = {}
    in_ch = 1
    for i, (_, out_ch, _) in enumerate(config.blocks):
        std = math.sqrt(2.0 / (in_ch * 3))
        weights[f"block{i}/w"] = rng.normal(0, std, (out_ch, in_ch, 3)).astype(dtype)
        weights[f"block{i}/b"] = np.zeros(out_ch, dtype=dtype)
        in_ch = out_ch
    std = math.sqrt(1.0 / in_ch)
    weights["head/w"] = rng.normal(0, std, (config.n_classes, in_ch)).astype(dtype)
    weights["head/b"] = np.zeros(config.n_classes, dtype=dtype)
    return weights


def n_parameters(weights: dict) -> int:
    return sum(int(np.prod(w.shape)) for w in weights.values())


def _conv3(x: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    b, c = x.shape[:2]
    out_ch = w.shape[0]
    length = x.shape[axis]
    pad = [(0, 0)] * 4
    pad[axis] = (1, 1)
    xp = np.pad(x, pad)
    sl = [slice(None)] * 4
    shifts = []
    for k in range(3):
        s = list(sl)
        s[axis] = slice(k, k + length)
        shifts.append(xp[tuple(s)])
    xs = np.stack(shifts, axis=2)  # [B, C, 3, F, T]
    fdim, tdim = xs.shape[3], xs.shape[4]
    y = np.matmul(w.reshape(out_ch, -1), xs.reshape(b, c * 3, fdim * tdim))
    return y.reshape(b, out_ch, fdim, tdim)


def _conv3_grads(dy: np.ndarray, x: np.ndarray, w: np.ndarray, axis: int):
    b, c = x.shape[:2]
    out_ch = w.shape[0]
    length = x.shape[axis]
    pad = [(0, 0)] * 4
    pad[axis] = (1, 1)
    xp = np.pad(x, pad)
    shifts = []
    for k in range(3):
        s = [slice(None)] * 4
        s[axis] = slice(k, k + length)
        shifts.append(xp[tuple(s)])
    xs = np.stack(shifts, axis=2)
    fdim, tdim = xs.shape[3], xs.shape[4]
    x2 = xs.reshape(b, c * 3, fdim * tdim)
    dy2 = dy.reshape(b, out_ch, fdim * tdim)

    dw = np.matmul(dy2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
    dx2 = np.matmul(w.reshape(out_ch, -1).T, dy2)
    dxs = dx2.reshape(b, c, 3, fdim, tdim)
    dxp = np.zeros_like(xp)
    for k in range(3):
        s = [slice(None)] * 4
        s[axis] = slice(k, k + length)
        dxp[tuple(s)] += dxs[:, :, k]
    crop = [slice(None)] * 4
    crop[axis] = slice(1, 1 + length)
    return dw, db, dxp[tuple(crop)]


def _maxpool2(x: np.ndarray, axis: int):
    length = x.shape[axis]
    out_len = (length + 1) // 2
    pad = [(0, 0)] * 4
    pad[axis] = (0, 2 * out_len - length)
    xp = np.pad(x, pad)  # post-relu values are >= 0, so zero-pad never wins
    xm = np.moveaxis(xp, axis, -1)
    pair = xm.reshape(*xm.shape[:-1], out_len, 2)
    arg = pair.argmax(axis=-1)
    out = np.take_along_axis(pair, arg[..., None], axis=-1)[..., 0]
    return np.moveaxis(out, -1, axis), arg, length


def _maxpool2_backward(dy: np.ndarray, arg: np.ndarray, axis: int, length: int):
    out_len = dy.shape[axis]
    dym = np.moveaxis(dy, axis, -1)
    dpair = np.zeros((*dym.shape, 2), dtype=dy.dtype)
    np.put_along_axis(dpair, arg[..., None], dym[..., None], axis=-1)
    dxp = dpair.reshape(*dym.shape[:-1], out_len * 2)
    dxp = np.moveaxis(dxp, -1, axis)
    crop = [slice(None)] * 4
    crop[axis] = slice(0, length)
    return dxp[tuple(crop)]


def _time_mask(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    t = x.shape[TIME_AXIS]
    mask = np.arange(t)[None, :] < valid[:, None]
    return x * mask[:, None, None, :].astype(x.dtype)


def _forward_batch(feats: np.ndarray, valid: np.ndarray, weights: dict, config: CnnConfig):
    """feats [B, F, T] zero-padded, valid frame counts [B] -> (logits, cache)."""
    if feats.ndim != 3 or feats.shape[1] == 0 or feats.shape[2] == 0:
        raise ValueError(f"feature batch must be [B, F, T], got {feats.shape}")
    x = feats[:, None, :, :]
    x = _time_mask(x, valid)
    cache = {"blocks": [], "valid0": valid}
    v = valid.copy()
    for i, (axis_name, _, pool) in enumerate(config.blocks):
        axis = _AXES[axis_name]
        blk = {"x_in": x, "valid_in": v.copy(), "axis": axis, "pool": pool}
        h = _conv3(x, weights[f"block{i}/w"], axis) + weights[f"block{i}/b"][None, :, None, None]
        r = np.maximum(h, 0)
        blk["relu_mask"] = h > 0
        # zero invalid frames before pooling so windows straddling the valid
        # boundary see exactly the zeros an unpadded input would see
        r = _time_mask(r, v)
        if pool == "max2":
            r, arg, pre_len = _maxpool2(r, axis)
            blk["pool_arg"] = arg
            blk["pool_len"] = pre_len
            if axis == TIME_AXIS:
                v = (v + 1) // 2
        x = _time_mask(r, v)
        blk["valid_out"] = v.copy()
        cache["blocks"].append(blk)

    f_cur = x.shape[FREQ_AXIS]
    # per-item slice so the reduction order (and hence the rounding) cannot
    # depend on how much padding a batch member carries
    gap = np.stack(
        [
            x[b, :, :, : v[b]].sum(axis=(1, 2), dtype=np.float64) / (f_cur * v[b])
            for b in range(x.shape[0])
        ]
    ).astype(x.dtype)
    logits = gap @ weights["head/w"].T + weights["head/b"][None, :]
    cache["gap"] = gap
    cache["x_last"] = x
    cache["valid_last"] = v
    return logits, cache


def _backward_batch(dlogits: np.ndarray, weights: dict, config: CnnConfig, cache: dict):
    grads: dict[str, np.ndarray] = {}
    gap = cache["gap"]
    grads["head/w"] = dlogits.T @ gap
    grads["head/b"] = dlogits.sum(axis=0)
    dgap = dlogits @ weights["head/w"]

    x = cache["x_last"]
    v = cache["valid_last"]
    f_cur = x.shape[FREQ_AXIS]
    denom = (f_cur * v).astype(x.dtype)
    dx = np.broadcast_to(
        (dgap / denom[:, None])[:, :, None, None], x.shape
    ).astype(x.dtype)
    dx = _time_mask(dx, v)

    for i in range(len(config.blocks) - 1, -1, -1):
        blk = cache["blocks"][i]
        axis = blk["axis"]
        dx = _time_mask(dx, blk["valid_out"])
        if blk["pool"] == "max2":
            dx = _maxpool2_backward(dx, blk["pool_arg"], axis, blk["pool_len"])
        dx = _time_mask(dx, blk["valid_in"])
        dx = dx * blk["relu_mask"].astype(dx.dtype)
        dw, db, dx = _conv3_grads(dx, blk["x_in"], weights[f"block{i}/w"], axis)
        grads[f"block{i}/w"] = dw
        grads[f"block{i}/b"] = db

    dfeats = _time_mask(dx, cache["valid0"])[:, 0, :, :]
    return grads, dfeats


def cnn_forward(features, weights: dict, config: CnnConfig) -> np.ndarray:
    """Logits for a single feature map [n_channels, n_frames]."""
    vals = features.values if isinstance(features, fe.FeatureMap) else np.asarray(features)
    if vals.ndim != 2 or vals.size == 0:
        raise ValueError(f"feature map must be a non-empty matrix, got shape {vals.shape}")
    batch = vals[None, :, :].astype(weights["head/w"].dtype)
    valid = np.array([vals.shape[1]])
    logits, _ = _forward_batch(batch, valid, weights, config)
    return logits[0].astype(np.float64)


def cross_entropy(logits: np.ndarray, label: int):
    """Stable -log softmax[label]; returns (loss, gradient wrt logits)."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < z.shape[-1]:
        raise ValueError(f"label {label} outside logits of size {z.shape[-1]}")
    shift = z - z.max()
    lse = math.log(np.exp(shift).sum())
    loss = lse - shift[int(label)]
    grad = np.exp(shift - lse)
    grad[int(label)] -= 1.0
    return loss, grad


@dataclass
class CnnModel:
    config: CnnConfig
    weights: dict
    frontend: fe.GaborFrontendParams
    sample_rate: int = 16000


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1t = 1 - self.b1**self.t
        b2t = 1 - self.b2**self.t
        for name, g in grads.items():
            p = params[name]
            g = g.astype(p.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m += (1 - self.b1) * (g - m)
            v += (1 - self.b2) * (g * g - v)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _joint_loss_and_grads(
    xb: np.ndarray,
    lengths: np.ndarray,
    labels: np.ndarray,
    fparams: fe.GaborFrontendParams,
    weights: dict,
    config: CnnConfig,
    sample_rate: int,
    dtype=np.float32,
    with_grads: bool = True,
):
    """Mean cross-entropy over one padded batch, plus gradients for the CNN
    weights and every frontend parameter group."""
    feats, n_frames, fcache = fe._forward_batch(xb, lengths, fparams, sample_rate, dtype)
    logits, ccache = _forward_batch(feats, n_frames, weights, config)
    b = len(labels)
    losses = np.empty(b, dtype=np.float64)
    dlogits = np.empty_like(logits, dtype=np.float64)
    correct = 0
    for i in range(b):
        losses[i], dlogits[i] = cross_entropy(logits[i], labels[i])
        correct += int(np.argmax(logits[i]) == labels[i])
    mean_loss = float(losses.sum() / b)
    if not with_grads:
        return mean_loss, correct, None, None
    cnn_grads, dfeats = _backward_batch(
        (dlogits / b).astype(logits.dtype), weights, config, ccache
    )
    fgrads = fe._backward_batch(fcache, dfeats)
    return mean_loss, correct, cnn_grads, fgrads


def _batches(rows: list, clips: dict, batch_size: int):
    order = sorted(rows, key=lambda r: (len(clips[r.utterance_id]), r.utterance_id))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _pad_batch(batch, clips, labels, dtype):
    lengths = np.array([len(clips[r.utterance_id]) for r in batch])
    t_max = int(lengths.max())
    xb = np.zeros((len(batch), t_max), dtype=dtype)
    for i, r in enumerate(batch):
        xb[i, : lengths[i]] = clips[r.utterance_id]
    yb = np.array([labels[r.utterance_id] for r in batch])
    return xb, lengths, yb


def _task_label(row: ManifestRow, n_classes: int) -> int:
    return binarize_mildplus(row.label) if n_classes == 2 else int(row.label)


def train(
    train_rows: list[ManifestRow],
    val_rows: list[ManifestRow],
    cnn_config: CnnConfig,
    train_config: TrainConfig,
    frontend_params: fe.GaborFrontendParams | None = None,
    sample_rate: int = 16000,
    dtype=np.float32,
    progress=None,
) -> tuple[CnnModel, list[EpochStats]]:
    """Joint frontend + CNN training with Adam, length-grouped padded
    mini-batches, and early stopping on validation loss (best weights are
    restored). Fully reproducible from train_config.seed."""
    if not train_rows or not val_rows:
        raise ValueError("empty split")
    k = cnn_config.n_classes
    labels = {}
    for r in train_rows + val_rows:
        lab = _task_label(r, k)
        if not 0 <= lab < k:
            raise ValueError(f"{r.utterance_id}: label {lab} outside task range")
        labels[r.utterance_id] = lab

    clips = {}
    for r in train_rows + val_rows:
        clip = load_wav(r.audio_path)
        if clip.sample_rate != sample_rate:
            raise ValueError(
                f"{r.utterance_id}: sample rate {clip.sample_rate} != {sample_rate}"
            )
        clips[r.utterance_id] = clip.samples

    rng = np.random.default_rng(train_config.seed)
    fparams = (frontend_params or fe.init_gabor_mel(40, sample_rate)).copy()
    fparams.validate(sample_rate)
    weights = init_weights(cnn_config, rng, dtype)

    opt_w = _Adam(train_config.learning_rate)
    opt_f = _Adam(train_config.learning_rate)

    train_batches = _batches(train_rows, clips, train_config.batch_size)
    val_batches = _batches(val_rows, clips, train_config.batch_size)

    def evaluate():
        total, correct, n = 0.0, 0, 0
        for batch in val_batches:
            xb, lengths, yb = _pad_batch(batch, clips, labels, dtype)
            loss, c, _, _ = _joint_loss_and_grads(
                xb, lengths, yb, fparams, weights, cnn_config, sample_rate,
                dtype, with_grads=False,
            )
            total += loss * len(batch)
            correct += c
            n += len(batch)
        return total / n, correct / n

    history: list[EpochStats] = []
    best = (math.inf, None, None)
    wait = 0
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train_batches))
        run_loss, n_seen = 0.0, 0
        for bi in order:
            batch = train_batches[bi]
            xb, lengths, yb = _pad_batch(batch, clips, labels, dtype)
            loss, _, cnn_grads, fgrads = _joint_loss_and_grads(
                xb, lengths, yb, fparams, weights, cnn_config, sample_rate, dtype
            )
            wd = train_config.weight_decay
            for name, g in cnn_grads.items():
                if name.endswith("/w"):
                    cnn_grads[name] = g + wd * weights[name]
            opt_w.step(weights, cnn_grads)
            fdict = {n_: getattr(fparams, n_) for n_ in fe.LEARNABLE_FIELDS}
            opt_f.step(fdict, fgrads)
            fparams.clamp_(sample_rate)
            run_loss += loss * len(batch)
            n_seen += len(batch)

        val_loss, val_acc = evaluate()
        stats = EpochStats(epoch, run_loss / n_seen, val_loss, val_acc)
        history.append(stats)
        if progress:
            progress(stats)

        if val_loss < best[0]:
            best = (val_loss, {n_: w.copy() for n_, w in weights.items()}, fparams.copy())
            wait = 0
        else:
            wait += 1
            if wait >= train_config.patience:
                break

    if best[1] is not None:
        weights, fparams = best[1], best[2]
    model = CnnModel(cnn_config, weights, fparams, sample_rate)
    return model, history


def predict_utterance(clip: AudioClip, model: CnnModel) -> np.ndarray:
    """Softmax class scores for one clip."""
    if len(clip.samples) < model.frontend.filter_len:
        raise ValueError(
            f"clip of {len(clip.samples)} samples is shorter than one frontend "
            f"window ({model.frontend.filter_len})"
        )
    fm = fe.gabor_forward(clip, model.frontend)
    logits = cnn_forward(fm, model.weights, model.config)
    return softmax(logits)

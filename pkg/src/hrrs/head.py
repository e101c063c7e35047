"""Trainable retrieval head: mlpconv stack + global average pooling + softmax.

The head sits on top of frozen backbone feature maps consumed from files. It
is a three-stage shared perceptron applied at every spatial site — one 3x3
convolution (padding 1, stride 1) followed by two 1x1 convolutions — whose
final stage emits one map per class. Global average pooling turns those class
maps into the logits; the same pooled vector, L2-normalized, is the retrieval
feature.

Everything here is plain numpy: forward, exact backprop, and minibatch SGD
with momentum, weight decay and a plateau-triggered learning-rate drop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EncodedFeature, l2_normalize
from .tensor_store import read_tensor, write_tensor

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int = 512
    in_spatial: tuple[int, int] = (6, 6)
    hidden1: int = 4096
    hidden2: int = 4096
    classes: int = 30
    dropout_rate: float = 0.5
    init_std: float = 0.01

    def __post_init__(self):
        for name in ("in_channels", "hidden1", "hidden2", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        object.__setattr__(self, "in_spatial", tuple(self.in_spatial))
        if len(self.in_spatial) != 2 or any(s < 1 for s in self.in_spatial):
            raise ValueError(f"in_spatial must be [h, w] with positive dims, got {self.in_spatial}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.init_std <= 0:
            raise ValueError("init_std must be > 0")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "W1": (3, 3, self.in_channels, self.hidden1),
            "b1": (self.hidden1,),
            "W2": (1, 1, self.hidden1, self.hidden2),
            "b2": (self.hidden2,),
            "W3": (1, 1, self.hidden2, self.classes),
            "b3": (self.classes,),
        }


class MlpconvHead:
    """Parameter container; all math lives in the module-level functions."""

    def __init__(self, config: HeadConfig, params: dict[str, np.ndarray]):
        shapes = config.param_shapes()
        if set(params) != set(PARAM_NAMES):
            raise ValueError(f"params must have exactly keys {PARAM_NAMES}")
        for name, arr in params.items():
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        self.config = config
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in PARAM_NAMES}

    def copy(self) -> "MlpconvHead":
        return MlpconvHead(self.config, {k: v.copy() for k, v in self.params.items()})

    def __getattr__(self, name):
        if name in PARAM_NAMES:
            return self.params[name]
        raise AttributeError(name)


@dataclass(frozen=True)
class ForwardResult:
    logits: np.ndarray  # (n,)
    gap_feature: np.ndarray  # (n,) — identical values to logits
    class_maps: np.ndarray  # (h, w, n)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 50
    plateau_patience: int = 5
    lr_drop: float = 0.1
    min_lr: float = 1e-6
    max_epochs: int = 30
    min_improvement: float = 1e-3

    def __post_init__(self):
        if self.lr0 <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.plateau_patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, plateau_patience and max_epochs must be >= 1")
        if not 0.0 < self.lr_drop < 1.0:
            raise ValueError("lr_drop must lie in (0, 1)")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainState:
    epoch: int
    learning_rate: float
    velocities: dict[str, np.ndarray]
    seed: int
    history: list[EpochRecord] = field(default_factory=list)
    lr_drops: list[int] = field(default_factory=list)


def head_init(config: HeadConfig, seed: int = 0) -> MlpconvHead:
    """Gaussian(0, init_std) weights, zero biases; deterministic given seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.startswith("W"):
            params[name] = rng.normal(0.0, config.init_std, shape)
        else:
            params[name] = np.zeros(shape)
    return MlpconvHead(config, params)


def _im2col3_batch(maps: np.ndarray) -> np.ndarray:
    """(B, h, w, c) -> (B*h*w, 9c) patch matrix for a 3x3 pad-1 convolution."""
    b, h, w, c = maps.shape
    padded = np.pad(maps, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    # windows: (B, h, w, c, 3, 3) -> patch layout (di, dj, channel)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask with values in {0, 1/(1-rate)}."""
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _check_maps(maps: np.ndarray, config: HeadConfig) -> np.ndarray:
    maps = np.asarray(maps, dtype=np.float64)
    expected = (*config.in_spatial, config.in_channels)
    if maps.ndim != 4 or maps.shape[1:] != expected:
        raise ValueError(f"feature maps must have shape (B, {expected[0]}, {expected[1]}, {expected[2]})")
    return maps


def _forward(head: MlpconvHead, maps: np.ndarray, train: bool, rng) -> dict:
    cfg = head.config
    maps = _check_maps(maps, cfg)
    b = maps.shape[0]
    hw = cfg.in_spatial[0] * cfg.in_spatial[1]
    drop = train and cfg.dropout_rate > 0
    if drop and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    w1 = head.params["W1"].reshape(-1, cfg.hidden1)
    w2 = head.params["W2"].reshape(cfg.hidden1, cfg.hidden2)
    w3 = head.params["W3"].reshape(cfg.hidden2, cfg.classes)
    cols = _im2col3_batch(maps)
    a1 = cols @ w1 + head.params["b1"]
    d1 = np.maximum(a1, 0.0)
    m1 = None
    if drop:
        m1 = _dropout_mask(rng, a1.shape, cfg.dropout_rate)
        d1 = d1 * m1
    a2 = d1 @ w2 + head.params["b2"]
    d2 = np.maximum(a2, 0.0)
    m2 = None
    if drop:
        m2 = _dropout_mask(rng, a2.shape, cfg.dropout_rate)
        d2 = d2 * m2
    a3 = d2 @ w3 + head.params["b3"]
    gap = a3.reshape(b, hw, cfg.classes).mean(axis=1)
    return {
        "b": b, "hw": hw, "cols": cols,
        "a1": a1, "d1": d1, "m1": m1,
        "a2": a2, "d2": d2, "m2": m2,
        "a3": a3, "gap": gap,
    }


def _grads_from_cache(head: MlpconvHead, cache: dict, dgap: np.ndarray) -> dict[str, np.ndarray]:
    cfg = head.config
    hw = cache["hw"]
    w2 = head.params["W2"].reshape(cfg.hidden1, cfg.hidden2)
    w3 = head.params["W3"].reshape(cfg.hidden2, cfg.classes)
    da3 = np.repeat(dgap / hw, hw, axis=0)  # GAP spreads each class gradient over sites
    g_w3 = cache["d2"].T @ da3
    g_b3 = da3.sum(axis=0)
    dd2 = da3 @ w3.T
    if cache["m2"] is not None:
        dd2 = dd2 * cache["m2"]
    da2 = dd2 * (cache["a2"] > 0)
    g_w2 = cache["d1"].T @ da2
    g_b2 = da2.sum(axis=0)
    dd1 = da2 @ w2.T
    if cache["m1"] is not None:
        dd1 = dd1 * cache["m1"]
    da1 = dd1 * (cache["a1"] > 0)
    g_w1 = cache["cols"].T @ da1
    g_b1 = da1.sum(axis=0)
    return {
        "W1": g_w1.reshape(head.params["W1"].shape), "b1": g_b1,
        "W2": g_w2.reshape(head.params["W2"].shape), "b2": g_b2,
        "W3": g_w3.reshape(head.params["W3"].shape), "b3": g_b3,
    }


def _softmax_xent_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    logp = logits - lse
    rows = np.arange(len(labels))
    losses = -logp[rows, labels]
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def _loss_and_grads(head, maps, labels, train, rng) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch plus exact parameter gradients."""
    cache = _forward(head, maps, train, rng)
    losses, dlogits = _softmax_xent_batch(cache["gap"], labels)
    grads = _grads_from_cache(head, cache, dlogits / len(labels))
    return float(losses.mean()), grads


def head_forward(head: MlpconvHead, feature_map, mode: str = "eval", rng=None) -> ForwardResult:
    """Run the head on one feature map.

    Eval mode is deterministic (no dropout); train mode applies inverted
    dropout after each of the first two ReLUs and needs an rng.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be rank 3, got rank {fmap.ndim}")
    cache = _forward(head, fmap[None], mode == "train", rng)
    h, w = head.config.in_spatial
    gap = cache["gap"][0]
    class_maps = cache["a3"].reshape(h, w, head.config.classes)
    return ForwardResult(gap.copy(), gap.copy(), class_maps)


def softmax_xent(logits, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy loss -log softmax(logits)[label] and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    losses, dlogits = _softmax_xent_batch(logits[None], np.array([label]))
    return float(losses[0]), dlogits[0]


def head_backward(head: MlpconvHead, feature_map, label: int, dropout_mask_seed: int) -> dict[str, np.ndarray]:
    """Exact loss gradients for one sample with dropout masks fixed by seed."""
    _, grads = _train_sample(head, feature_map, label, dropout_mask_seed)
    return grads


def head_loss(head: MlpconvHead, feature_map, label: int, dropout_mask_seed: int) -> float:
    """Train-mode loss with the same masks head_backward(seed) samples."""
    loss, _ = _train_sample(head, feature_map, label, dropout_mask_seed)
    return loss


def _train_sample(head, feature_map, label, dropout_mask_seed):
    fmap = np.asarray(feature_map, dtype=np.float64)
    if not 0 <= label < head.config.classes:
        raise ValueError(f"label {label} out of range for {head.config.classes} classes")
    rng = np.random.default_rng(dropout_mask_seed)
    return _loss_and_grads(head, fmap[None], np.array([label]), train=True, rng=rng)


def _accuracy(head: MlpconvHead, maps: np.ndarray, labels: np.ndarray, chunk: int = 256) -> float:
    hits = 0
    for lo in range(0, len(labels), chunk):
        cache = _forward(head, maps[lo : lo + chunk], train=False, rng=None)
        hits += int((cache["gap"].argmax(axis=1) == labels[lo : lo + chunk]).sum())
    return hits / len(labels)


def _check_dataset(data, config: HeadConfig) -> tuple[np.ndarray, np.ndarray]:
    maps, labels = data
    maps = _check_maps(np.asarray(maps, dtype=np.float64), config)
    labels = np.asarray(labels)
    if maps.shape[0] == 0:
        raise ValueError("empty dataset")
    if maps.shape[0] != labels.shape[0]:
        raise ValueError("maps and labels disagree on sample count")
    if labels.min() < 0 or labels.max() >= config.classes:
        raise ValueError(f"labels must lie in [0, {config.classes})")
    return maps, labels.astype(np.int64)


def head_train(
    head: MlpconvHead,
    train: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    hp: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[MlpconvHead, TrainState]:
    """Minibatch SGD with momentum and weight decay.

    After each epoch the train accuracy is recorded (eval mode); when the best
    value has not improved by more than `min_improvement` for
    `plateau_patience` epochs, the learning rate drops by `lr_drop`. Training
    stops when the rate falls below `min_lr` or `max_epochs` is reached.
    Deterministic given seeds (shuffling and dropout are re-seeded per epoch).
    """
    hp = hp or TrainConfig()
    maps_tr, y_tr = _check_dataset(train, head.config)
    maps_te, y_te = _check_dataset(test, head.config)
    head = head.copy()
    state = TrainState(
        epoch=0,
        learning_rate=hp.lr0,
        velocities={name: np.zeros_like(arr) for name, arr in head.params.items()},
        seed=seed,
    )
    best_acc = -np.inf
    stall = 0
    n = len(y_tr)
    for epoch in range(1, hp.max_epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        perm = rng.permutation(n)
        losses = []
        for lo in range(0, n, hp.batch_size):
            idx = perm[lo : lo + hp.batch_size]
            loss, grads = _loss_and_grads(head, maps_tr[idx], y_tr[idx], train=True, rng=rng)
            losses.append(loss)
            for name, grad in grads.items():
                vel = state.velocities[name]
                vel *= hp.momentum
                vel -= state.learning_rate * (grad + hp.weight_decay * head.params[name])
                head.params[name] += vel
        train_acc = _accuracy(head, maps_tr, y_tr)
        test_acc = _accuracy(head, maps_te, y_te)
        state.history.append(
            EpochRecord(epoch, state.learning_rate, float(np.mean(losses)), train_acc, test_acc)
        )
        state.epoch = epoch
        if train_acc > best_acc + hp.min_improvement:
            best_acc = train_acc
            stall = 0
        else:
            stall += 1
        if stall >= hp.plateau_patience:
            state.learning_rate *= hp.lr_drop
            state.lr_drops.append(epoch)
            stall = 0
            if state.learning_rate < hp.min_lr:
                break
    return head, state


def head_feature(head: MlpconvHead, feature_map) -> EncodedFeature:
    """Eval-mode GAP vector (pre-softmax), L2-normalized; dimension = classes."""
    result = head_forward(head, feature_map, mode="eval")
    vec, normalized = l2_normalize(result.gap_feature)
    return EncodedFeature(vec, "ldcnn", normalized)


# ---------------------------------------------------------------------------
# Parameter accounting. A layer is (in, out) for fully-connected stages or
# (kh, kw, in_channels, out_channels) for convolutions; each contributes its
# weight count plus one bias per output.

LDCNN_HEAD_LAYERS = ((3, 3, 512, 4096), (1, 1, 4096, 4096), (1, 1, 4096, 30))
VGGM_FC_LAYERS = ((18432, 4096), (4096, 4096), (4096, 1000))
VGGM_FINETUNE_FC_LAYERS = ((18432, 4096), (4096, 4096), (4096, 30))


def param_count(layers) -> int:
    """Exact weights + biases count for a stack of conv / fully-connected layers."""
    total = 0
    for layer in layers:
        t = tuple(int(x) for x in layer)
        if any(x < 1 for x in t):
            raise ValueError(f"layer sizes must be >= 1, got {layer}")
        if len(t) == 2:
            din, dout = t
            total += din * dout + dout
        elif len(t) == 4:
            kh, kw, cin, cout = t
            total += kh * kw * cin * cout + cout
        else:
            raise ValueError(f"layer must be (in, out) or (kh, kw, cin, cout), got {layer}")
    return total


# ---------------------------------------------------------------------------
# Checkpoints: FTNS tensors per parameter + JSON sidecar (config, history).


def save_head(out_dir: str | Path, head: MlpconvHead, state: TrainState | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in head.params.items():
        write_tensor(out_dir / f"{name}.ftns", arr)
    cfg = head.config
    sidecar = {
        "config": {
            "in_channels": cfg.in_channels,
            "in_spatial": list(cfg.in_spatial),
            "hidden1": cfg.hidden1,
            "hidden2": cfg.hidden2,
            "classes": cfg.classes,
            "dropout_rate": cfg.dropout_rate,
            "init_std": cfg.init_std,
        },
        "history": [
            {
                "epoch": r.epoch,
                "lr": r.lr,
                "train_loss": r.train_loss,
                "train_acc": r.train_acc,
                "test_acc": r.test_acc,
            }
            for r in (state.history if state else [])
        ],
        "lr_drops": list(state.lr_drops) if state else [],
        "seed": state.seed if state else None,
    }
    (out_dir / "head.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_head(model_dir: str | Path) -> tuple[MlpconvHead, dict]:
    model_dir = Path(model_dir)
    sidecar = json.loads((model_dir / "head.json").read_text())
    raw = dict(sidecar["config"])
    raw["in_spatial"] = tuple(raw["in_spatial"])
    config = HeadConfig(**raw)
    params = {
        name: read_tensor(model_dir / f"{name}.ftns").astype(np.float64)
        for name in PARAM_NAMES
    }
    return MlpconvHead(config, params), sidecar

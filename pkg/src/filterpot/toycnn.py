"""A small self-contained CNN with hand-written forward/backward passes.

Architecture (fixed): 1x16x16 input -> [conv 3x3 pad 1, ReLU, 2x2 max-pool]
x3 with 8/16/32 filters -> fully connected to 4 logits. All arithmetic is
float64 and single-threaded, so every operation is bit-deterministic.

States are value objects: pruning, fine-tuning and training return new
states and never mutate their inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import NUM_CLASSES, SyntheticDataset
from .errors import FormatError, ParameterError, ShapeError
from .profiles import FilterMeta

KERNEL = 3
STAGE_FILTERS = (8, 16, 32)
STAGE_IN_CHANNELS = (1, 8, 16)
STAGE_INPUT_DIMS = ((1, 16, 16), (8, 8, 8), (16, 4, 4))
LAYER_NAMES = ("conv1", "conv2", "conv3")
NUM_FILTERS = sum(STAGE_FILTERS)  # 56
FC_IN = STAGE_FILTERS[-1] * 2 * 2

_STAGE_OFFSETS = (0, STAGE_FILTERS[0], STAGE_FILTERS[0] + STAGE_FILTERS[1])

_WEIGHTS_MAGIC = b"TCN1"
_PARAM_ORDER = (
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "fc.weight",
    "fc.bias",
)


@dataclass
class ToyCnnState:
    conv_w: tuple[np.ndarray, ...]  # (F, C, 3, 3) per stage
    conv_b: tuple[np.ndarray, ...]  # (F,) per stage
    fc_w: np.ndarray  # (4, FC_IN)
    fc_b: np.ndarray  # (4,)
    seed: int | None = None

    def copy(self) -> "ToyCnnState":
        return ToyCnnState(
            conv_w=tuple(w.copy() for w in self.conv_w),
            conv_b=tuple(b.copy() for b in self.conv_b),
            fc_w=self.fc_w.copy(),
            fc_b=self.fc_b.copy(),
            seed=self.seed,
        )


@dataclass
class Gradients:
    conv_w: tuple[np.ndarray, ...]
    conv_b: tuple[np.ndarray, ...]
    fc_w: np.ndarray
    fc_b: np.ndarray


def _build_im2col_indices(dims: tuple[int, int, int]) -> np.ndarray:
    """Gather indices mapping a zero-padded (C, H+2, W+2) input to im2col
    layout (H*W patches, C*9 patch entries), matching w.reshape(F, C*9)."""
    c, h, w = dims
    hp, wp = h + 2, w + 2
    ci = np.repeat(np.arange(c), KERNEL * KERNEL)
    ki = np.tile(np.repeat(np.arange(KERNEL), KERNEL), c)
    kj = np.tile(np.arange(KERNEL), KERNEL * c)
    oi = np.repeat(np.arange(h), w)
    oj = np.tile(np.arange(w), h)
    rows = oi[:, None] + ki[None, :]
    cols = oj[:, None] + kj[None, :]
    return (ci[None, :] * hp + rows) * wp + cols


_IM2COL = tuple(_build_im2col_indices(dims) for dims in STAGE_INPUT_DIMS)


def filter_location(filter_id: int) -> tuple[int, int]:
    """Map a global filter id to (stage, output channel)."""
    if not 0 <= filter_id < NUM_FILTERS:
        raise IndexError(f"filter_id {filter_id} out of range [0, {NUM_FILTERS})")
    for stage in reversed(range(3)):
        if filter_id >= _STAGE_OFFSETS[stage]:
            return stage, filter_id - _STAGE_OFFSETS[stage]
    raise AssertionError("unreachable")


def filter_metas() -> list[FilterMeta]:
    """Metadata for the 56 conv filters, in global id order. The parameter
    index set of a filter is its kernel slice plus its bias."""
    metas = []
    filter_id = 0
    for stage in range(3):
        num_params = STAGE_IN_CHANNELS[stage] * KERNEL * KERNEL + 1
        for _ in range(STAGE_FILTERS[stage]):
            metas.append(
                FilterMeta(
                    filter_id=filter_id,
                    layer_name=LAYER_NAMES[stage],
                    layer_group=LAYER_NAMES[stage],
                    num_params=num_params,
                )
            )
            filter_id += 1
    return metas


def init_state(seed: int) -> ToyCnnState:
    """He-normal kernels, zero biases, seeded."""
    rng = np.random.default_rng([int(seed), 0])
    conv_w = []
    conv_b = []
    for stage in range(3):
        fan_in = STAGE_IN_CHANNELS[stage] * KERNEL * KERNEL
        conv_w.append(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), (STAGE_FILTERS[stage], STAGE_IN_CHANNELS[stage], KERNEL, KERNEL))
        )
        conv_b.append(np.zeros(STAGE_FILTERS[stage]))
    fc_w = rng.normal(0.0, np.sqrt(2.0 / FC_IN), (NUM_CLASSES, FC_IN))
    fc_b = np.zeros(NUM_CLASSES)
    return ToyCnnState(tuple(conv_w), tuple(conv_b), fc_w, fc_b, seed=int(seed))


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.shape != STAGE_INPUT_DIMS[0]:
        raise ShapeError(f"image must have shape {STAGE_INPUT_DIMS[0]}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    return img


def _check_label(label) -> int:
    lab = int(label)
    if not 0 <= lab < NUM_CLASSES:
        raise ParameterError(f"label must be in [0, {NUM_CLASSES}), got {label!r}")
    return lab


def _conv_forward(x, w, b, idx):
    c, h, wd = x.shape
    padded = np.zeros((c, h + 2, wd + 2))
    padded[:, 1:-1, 1:-1] = x
    cols = padded.reshape(-1)[idx]  # (H*W, C*9)
    out = cols @ w.reshape(w.shape[0], -1).T + b  # (H*W, F)
    return out.T.reshape(w.shape[0], h, wd), cols


def _conv_backward(dout, cols, w, idx, in_dims):
    c, h, wd = in_dims
    f = w.shape[0]
    dflat = dout.reshape(f, -1)  # (F, H*W)
    dw = (dflat @ cols).reshape(w.shape)
    db = dflat.sum(axis=1)
    dcols = dflat.T @ w.reshape(f, -1)  # (H*W, C*9)
    dpad = np.bincount(idx.ravel(), weights=dcols.ravel(), minlength=c * (h + 2) * (wd + 2))
    dx = dpad.reshape(c, h + 2, wd + 2)[:, 1:-1, 1:-1]
    return dw, db, dx


def _pool_forward(x):
    c, h, w = x.shape
    blocks = (
        x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    )
    arg = blocks.argmax(axis=3)  # first maximum: deterministic tie-break
    out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]
    return out, arg


def _pool_backward(dout, arg, in_shape):
    c, h, w = in_shape
    dblocks = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=3)
    return (
        dblocks.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
    )


def _forward_pass(state: ToyCnnState, image: np.ndarray):
    x = image
    caches = []
    for stage in range(3):
        z, cols = _conv_forward(x, state.conv_w[stage], state.conv_b[stage], _IM2COL[stage])
        mask = z > 0.0
        a = z * mask
        pooled, arg = _pool_forward(a)
        caches.append((cols, mask, arg, a.shape))
        x = pooled
    flat = x.reshape(-1)
    logits = state.fc_w @ flat + state.fc_b
    m = logits.max()
    exps = np.exp(logits - m)
    total = exps.sum()
    probs = exps / total
    loss_terms = (m + np.log(total), logits)
    return logits, probs, (caches, flat, loss_terms)


def forward(state: ToyCnnState, image) -> tuple[np.ndarray, np.ndarray]:
    """Run the network; returns (logits, softmax confidences)."""
    img = _check_image(image)
    logits, probs, _ = _forward_pass(state, img)
    return logits, probs


def predict(state: ToyCnnState, image) -> int:
    """Argmax class (ties resolve to the lowest class index)."""
    _, probs = forward(state, image)
    return int(np.argmax(probs))


def loss(state: ToyCnnState, image, label) -> float:
    """Cross-entropy loss of one sample."""
    img = _check_image(image)
    lab = _check_label(label)
    _, _, (_, _, (lse, logits)) = _forward_pass(state, img)
    return float(lse - logits[lab])


def backward(state: ToyCnnState, image, label) -> Gradients:
    """Cross-entropy gradient for every parameter of the network."""
    img = _check_image(image)
    lab = _check_label(label)
    _, probs, (caches, flat, _) = _forward_pass(state, img)

    dlogits = probs.copy()
    dlogits[lab] -= 1.0
    dfc_w = np.outer(dlogits, flat)
    dfc_b = dlogits
    dx = (state.fc_w.T @ dlogits).reshape(STAGE_FILTERS[-1], 2, 2)

    dconv_w: list[np.ndarray] = [None] * 3  # type: ignore[list-item]
    dconv_b: list[np.ndarray] = [None] * 3  # type: ignore[list-item]
    for stage in reversed(range(3)):
        cols, mask, arg, a_shape = caches[stage]
        da = _pool_backward(dx, arg, a_shape)
        dz = da * mask
        dw, db, dx = _conv_backward(
            dz, cols, state.conv_w[stage], _IM2COL[stage], STAGE_INPUT_DIMS[stage]
        )
        dconv_w[stage] = dw
        dconv_b[stage] = db
    return Gradients(tuple(dconv_w), tuple(dconv_b), dfc_w, dfc_b)


def filter_saliency_profile(state: ToyCnnState, image, label) -> np.ndarray:
    """Mean absolute gradient over each conv filter's kernel + bias; length 56."""
    grads = backward(state, image, label)
    parts = []
    for stage in range(3):
        abs_w = np.abs(grads.conv_w[stage]).reshape(STAGE_FILTERS[stage], -1)
        abs_b = np.abs(grads.conv_b[stage])
        parts.append((abs_w.sum(axis=1) + abs_b) / (abs_w.shape[1] + 1))
    return np.concatenate(parts)


def _check_filter_ids(filter_ids) -> list[int]:
    ids = [int(f) for f in filter_ids]
    for f in ids:
        if not 0 <= f < NUM_FILTERS:
            raise IndexError(f"filter_id {f} out of range [0, {NUM_FILTERS})")
    return ids


def zero_filters(state: ToyCnnState, filter_ids) -> ToyCnnState:
    """New state with the named filters' kernels and biases set to zero, so
    their output channels are identically zero for any input."""
    ids = _check_filter_ids(filter_ids)
    new = state.copy()
    for f in ids:
        stage, channel = filter_location(f)
        new.conv_w[stage][channel] = 0.0
        new.conv_b[stage][channel] = 0.0
    return new


def apply_filter_update(state: ToyCnnState, grads: Gradients, filter_ids, lr: float) -> ToyCnnState:
    """theta -> theta - lr * grad, restricted to the named filters' slices."""
    ids = _check_filter_ids(filter_ids)
    if not lr > 0.0:
        raise ParameterError(f"learning rate must be positive, got {lr!r}")
    new = state.copy()
    for f in ids:
        stage, channel = filter_location(f)
        new.conv_w[stage][channel] -= lr * grads.conv_w[stage][channel]
        new.conv_b[stage][channel] -= lr * grads.conv_b[stage][channel]
    return new


def one_step_finetune(state: ToyCnnState, image, label, filter_ids, lr: float = 0.001) -> ToyCnnState:
    """Single gradient-descent step on the named filters only; gradients are
    taken at the input state, every other parameter is untouched."""
    grads = backward(state, image, label)
    return apply_filter_update(state, grads, filter_ids, lr)


def train(
    dataset: SyntheticDataset,
    epochs: int = 8,
    seed: int = 0,
    lr: float = 0.08,
    batch_size: int = 32,
) -> ToyCnnState:
    """Mini-batch gradient descent from a seeded He init.

    Plain SGD, shuffled each epoch from a stream derived from the seed; the
    result is a pure function of (dataset, epochs, seed, lr, batch_size).
    """
    if len(dataset) < 1:
        raise ParameterError("training dataset is empty")
    state = init_state(seed)
    shuffle_rng = np.random.default_rng([int(seed), 1])
    n = len(dataset)
    for _ in range(int(epochs)):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            acc = None
            for i in batch:
                g = backward(state, dataset.images[i], int(dataset.labels[i]))
                if acc is None:
                    acc = g
                else:
                    acc = Gradients(
                        tuple(a + b for a, b in zip(acc.conv_w, g.conv_w)),
                        tuple(a + b for a, b in zip(acc.conv_b, g.conv_b)),
                        acc.fc_w + g.fc_w,
                        acc.fc_b + g.fc_b,
                    )
            scale = lr / len(batch)
            state = ToyCnnState(
                conv_w=tuple(w - scale * gw for w, gw in zip(state.conv_w, acc.conv_w)),
                conv_b=tuple(b - scale * gb for b, gb in zip(state.conv_b, acc.conv_b)),
                fc_w=state.fc_w - scale * acc.fc_w,
                fc_b=state.fc_b - scale * acc.fc_b,
                seed=state.seed,
            )
    return state


def accuracy(state: ToyCnnState, dataset: SyntheticDataset) -> float:
    correct = sum(
        1
        for i in range(len(dataset))
        if predict(state, dataset.images[i]) == int(dataset.labels[i])
    )
    return correct / len(dataset)


def _param_arrays(state: ToyCnnState) -> dict[str, np.ndarray]:
    return {
        "conv1.weight": state.conv_w[0],
        "conv1.bias": state.conv_b[0],
        "conv2.weight": state.conv_w[1],
        "conv2.bias": state.conv_b[1],
        "conv3.weight": state.conv_w[2],
        "conv3.bias": state.conv_b[2],
        "fc.weight": state.fc_w,
        "fc.bias": state.fc_b,
    }


def save_weights(state: ToyCnnState, path) -> Path:
    """Weights file: magic, uint32 header length, JSON header, then the
    float64 little-endian parameter blob in _PARAM_ORDER."""
    path = Path(path)
    params = _param_arrays(state)
    header = {
        "version": 1,
        "dtype": "f64le",
        "seed": state.seed,
        "arch": {
            "input": [1, 16, 16],
            "stage_filters": list(STAGE_FILTERS),
            "kernel": KERNEL,
            "num_classes": NUM_CLASSES,
        },
        "params": [
            {"name": name, "shape": list(params[name].shape)} for name in _PARAM_ORDER
        ],
    }
    header_bytes = json.dumps(header, indent=None, separators=(",", ":")).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(params[name].astype("<f8")).tobytes() for name in _PARAM_ORDER
    )
    path.write_bytes(_WEIGHTS_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + blob)
    return path


def load_weights(path) -> ToyCnnState:
    raw = Path(path).read_bytes()
    if raw[:4] != _WEIGHTS_MAGIC:
        raise FormatError(f"{path} is not a toy-CNN weights file")
    (header_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad weights header in {path}: {exc}") from exc
    if header.get("version") != 1 or header.get("dtype") != "f64le":
        raise FormatError(f"unsupported weights format in {path}")
    declared = {rec["name"]: tuple(rec["shape"]) for rec in header.get("params", [])}
    if tuple(declared) != _PARAM_ORDER:
        raise FormatError(f"unexpected parameter order in {path}")
    blob = raw[8 + header_len :]
    arrays = {}
    offset = 0
    for name in _PARAM_ORDER:
        shape = declared[name]
        count = int(np.prod(shape))
        end = offset + count * 8
        if end > len(blob):
            raise FormatError(f"weights blob in {path} is truncated")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise FormatError(f"weights blob in {path} has trailing bytes")
    expected_shapes = {
        name: arr.shape for name, arr in _param_arrays(init_state(0)).items()
    }
    for name, arr in arrays.items():
        if arr.shape != expected_shapes[name]:
            raise FormatError(
                f"{name} has shape {arr.shape}, expected {expected_shapes[name]}"
            )
    return ToyCnnState(
        conv_w=(arrays["conv1.weight"], arrays["conv2.weight"], arrays["conv3.weight"]),
        conv_b=(arrays["conv1.bias"], arrays["conv2.bias"], arrays["conv3.bias"]),
        fc_w=arrays["fc.weight"],
        fc_b=arrays["fc.bias"],
        seed=header.get("seed"),
    )

"""
Convolutional predictor from a sphere image to the N x N vanishing point
likelihood grid, written directly on numpy.

Layers run on (batch, channels, height, width) arrays. The head is a sigmoid
per bin trained with binary cross entropy, so several vanishing points can be
active in one grid.
"""

import logging
import math
import struct
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from spherevp.errors import (
    BadMagic,
    ModelFileError,
    NonFiniteLoss,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)
from spherevp.geometry import lines_from_segments
from spherevp.sphere_raster import BinGrid, SphereImage, local_maxima, render_sphere_image, vp_to_bin
from spherevp.synthgen import SynthScene, load_manifest, load_scene
from spherevp.types import ConvLayer, FullyConnectedLayer, MaxPoolLayer, NetSpec, ReluLayer, TrainConfig
from spherevp.utils import Settings

logger = logging.getLogger(__name__)

MAGIC = b"SVPM"
FORMAT_VERSION = 1
PROB_CLAMP = 1e-7

Batch = Sequence[Tuple[SphereImage, BinGrid]]


# Parameters
# ------------------------

def param_shapes(spec: NetSpec) -> Dict[str, Tuple[int, ...]]:
    """Ordered tensor names and shapes for every layer that carries weights."""
    shapes = {}
    in_shape: Tuple[int, ...] = (1, spec.input_resolution, spec.input_resolution)
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.output_shapes())):
        if isinstance(layer, ConvLayer):
            shapes[f"layer{i}.weight"] = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
            shapes[f"layer{i}.bias"] = (layer.out_channels,)
        elif isinstance(layer, FullyConnectedLayer):
            shapes[f"layer{i}.weight"] = (layer.out, int(np.prod(in_shape)))
            shapes[f"layer{i}.bias"] = (layer.out,)
        in_shape = out_shape
    return shapes


@dataclass
class NetParams:
    spec: NetSpec
    tensors: Dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if list(self.tensors) != list(expected):
            raise ShapeMismatch(f"Expected tensors {list(expected)}, got {list(self.tensors)}")
        for name, shape in expected.items():
            tensor = self.tensors[name]
            if tensor.shape != shape:
                raise ShapeMismatch(f"Tensor {name} has shape {tensor.shape}, expected {shape}")
            if not np.all(np.isfinite(tensor)):
                raise ValueError(f"Tensor {name} contains non-finite values")

    def copy(self) -> "NetParams":
        return NetParams(self.spec, {name: t.copy() for name, t in self.tensors.items()})

    def as_dtype(self, dtype) -> "NetParams":
        return NetParams(self.spec, {name: t.astype(dtype) for name, t in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def init_params(spec: NetSpec, seed: int = 0) -> NetParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.normal(size=shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return NetParams(spec, tensors)


def zero_params(spec: NetSpec) -> NetParams:
    return NetParams(spec, {name: np.zeros(shape, dtype=np.float32) for name, shape in param_shapes(spec).items()})


# Layers
# ------------------------

def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    win = _windows(x, weight.shape[2], stride)
    return np.einsum("bchwij,ocij->bohw", win, weight, optimize=True) + bias[None, :, None, None]


def conv_backward(x, weight, stride, grad_out):
    k = weight.shape[2]
    win = _windows(x, k, stride)
    d_weight = np.einsum("bchwij,bohw->ocij", win, grad_out, optimize=True)
    d_bias = grad_out.sum(axis=(0, 2, 3))
    d_x = np.zeros_like(x)
    ho, wo = grad_out.shape[2:]
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("bohw,oc->bchw", grad_out, weight[:, :, i, j], optimize=True)
            d_x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    return d_x, d_weight, d_bias


def maxpool_forward(x: np.ndarray, kernel: int, stride: int):
    win = _windows(x, kernel, stride)
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def maxpool_backward(x_shape, arg, kernel: int, stride: int, grad_out):
    d_x = np.zeros(x_shape, dtype=grad_out.dtype)
    b, c, ho, wo = np.indices(arg.shape)
    rows = ho * stride + arg // kernel
    cols = wo * stride + arg % kernel
    np.add.at(d_x, (b, c, rows, cols), grad_out)
    return d_x


# Forward and backward passes
# ------------------------

def _stack_images(params: NetParams, images: Sequence[SphereImage]) -> np.ndarray:
    res = params.spec.input_resolution
    for img in images:
        if img.resolution != res:
            raise ShapeMismatch(f"Network expects {res}x{res} sphere images, got {img.resolution}")
    return np.stack([img.intensities for img in images])[:, None, :, :].astype(params.dtype)


def _check_finite(x: np.ndarray, layer: str):
    bad = ~np.isfinite(x.reshape(len(x), -1)).all(axis=1)
    if np.any(bad):
        raise NonFiniteLoss(layer, int(np.flatnonzero(bad)[0]))


def _forward_logits(params: NetParams, x: np.ndarray, keep_cache: bool = False):
    cache = []
    for i, layer in enumerate(params.spec.layers):
        inp = x
        if isinstance(layer, ConvLayer):
            x = conv_forward(x, params.tensors[f"layer{i}.weight"], params.tensors[f"layer{i}.bias"], layer.stride)
            aux = None
        elif isinstance(layer, ReluLayer):
            x = np.maximum(x, 0)
            aux = None
        elif isinstance(layer, MaxPoolLayer):
            x, aux = maxpool_forward(x, layer.kernel, layer.stride)
        else:
            aux = x.shape
            inp = x.reshape(len(x), -1)
            x = inp @ params.tensors[f"layer{i}.weight"].T + params.tensors[f"layer{i}.bias"]
        _check_finite(x, f"{i}:{layer.kind}")
        if keep_cache:
            cache.append((inp, aux))
    return x, cache


def forward_batch(params: NetParams, images: Sequence[SphereImage]) -> np.ndarray:
    """(B, N^2) sigmoid outputs."""
    logits, _ = _forward_logits(params, _stack_images(params, images))
    return expit(logits)


def forward(params: NetParams, img: SphereImage) -> BinGrid:
    probs = forward_batch(params, [img])[0]
    return BinGrid(params.spec.grid_n, probs.astype(float))


# Loss
# ------------------------

def _bce(probs: np.ndarray, targets: np.ndarray) -> float:
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p))))


def loss_bce(pred: BinGrid, target: BinGrid) -> float:
    if pred.n != target.n:
        raise ShapeMismatch(f"Prediction grid n={pred.n} does not match target n={target.n}")
    return _bce(pred.values, target.values)


def make_target(scene: SynthScene, n: int) -> BinGrid:
    values = np.zeros(n * n)
    for vp in scene.true_vps:
        values[vp_to_bin(vp, n)] = 1.0
    return BinGrid(n, values)


def loss_and_gradients(params: NetParams, batch: Batch) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean BCE over the batch and its gradient with respect to every tensor."""
    if not batch:
        raise ValueError("Batch must contain at least one example")
    n = params.spec.grid_n
    for _, target in batch:
        if target.n != n:
            raise ShapeMismatch(f"Target grid n={target.n} does not match network grid n={n}")
    x = _stack_images(params, [img for img, _ in batch])
    targets = np.stack([t.values for _, t in batch]).astype(params.dtype)
    logits, cache = _forward_logits(params, x, keep_cache=True)
    probs = expit(logits)
    loss = _bce(probs, targets)
    if not math.isfinite(loss):
        raise NonFiniteLoss("loss", 0)
    grad = (probs - targets) / targets.size
    return loss, _backprop(params, cache, grad)


def _backprop(params: NetParams, cache, grad: np.ndarray) -> Dict[str, np.ndarray]:
    grads = {}
    for i in reversed(range(len(params.spec.layers))):
        layer = params.spec.layers[i]
        inp, aux = cache[i]
        if isinstance(layer, ConvLayer):
            grad, dw, db = conv_backward(inp, params.tensors[f"layer{i}.weight"], layer.stride, grad)
            grads[f"layer{i}.weight"], grads[f"layer{i}.bias"] = dw, db
        elif isinstance(layer, ReluLayer):
            grad = grad * (inp > 0)
        elif isinstance(layer, MaxPoolLayer):
            grad = maxpool_backward(inp.shape, aux, layer.kernel, layer.stride, grad)
        else:
            grads[f"layer{i}.weight"] = grad.T @ inp
            grads[f"layer{i}.bias"] = grad.sum(axis=0)
            grad = grad @ params.tensors[f"layer{i}.weight"]
            grad = grad.reshape(aux)
    return {name: grads[name].astype(params.dtype) for name in params.tensors}


# Training
# ------------------------

def train_step(
    params: NetParams,
    batch: Batch,
    cfg: TrainConfig,
    velocity: Optional[Dict[str, np.ndarray]] = None,
    learning_rate: Optional[float] = None,
) -> Tuple[NetParams, float]:
    """
    One momentum SGD update. ``velocity`` is updated in place when given so
    consecutive calls share momentum; ``params`` itself is never mutated.
    """
    loss, grads = loss_and_gradients(params, batch)
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    if velocity is None:
        velocity = {}
    updated = {}
    for name, tensor in params.tensors.items():
        v = cfg.momentum * velocity.get(name, np.zeros_like(tensor)) + grads[name]
        velocity[name] = v
        updated[name] = (tensor - lr * v).astype(tensor.dtype)
    return NetParams(params.spec, updated), loss


def gradient_check(
    params: NetParams,
    batch: Batch,
    samples: int = 100,
    h: float = 1e-3,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    params = params.as_dtype(np.float64)
    _, grads = loss_and_gradients(params, batch)
    rng = np.random.default_rng(seed)
    names = list(params.tensors)
    sizes = np.array([params.tensors[name].size for name in names])
    worst = 0.0
    for _ in range(samples):
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        name = names[k]
        idx = int(rng.integers(sizes[k]))
        shifted = params.copy()
        flat = shifted.tensors[name].reshape(-1)
        original = flat[idx]
        flat[idx] = original + h
        plus, _ = loss_and_gradients(shifted, batch)
        flat[idx] = original - h
        minus, _ = loss_and_gradients(shifted, batch)
        numeric = (plus - minus) / (2 * h)
        analytic = float(grads[name].reshape(-1)[idx])
        denom = max(abs(numeric) + abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def scene_example(scene: SynthScene, spec: NetSpec) -> Tuple[SphereImage, BinGrid]:
    image = render_sphere_image(lines_from_segments(scene.segments), spec.input_resolution)
    return image, make_target(scene, spec.grid_n)


def _recall_counts(params: NetParams, examples: Batch, k: int) -> Tuple[int, int]:
    hits = total = 0
    for img, target in examples:
        found = set(local_maxima(forward(params, img), k, theta_act=0.0))
        wanted = np.flatnonzero(target.values)
        hits += sum(int(b) in found for b in wanted)
        total += len(wanted)
    return hits, total


def topk_recall(params: NetParams, examples: Batch, k: int) -> float:
    """Fraction of target bins found among the k strongest local maxima."""
    hits, total = _recall_counts(params, examples, k)
    return hits / total if total else 0.0


def _batch_loss(params: NetParams, batch: Batch) -> float:
    probs = forward_batch(params, [img for img, _ in batch])
    targets = np.stack([t.values for _, t in batch])
    return _bce(probs, targets)


def _identity(item):
    return item


def rendered_batches(
    items: Sequence,
    order: Sequence[int],
    batch_size: int,
    load: Callable,
    pool: Executor,
) -> Iterator[Batch]:
    """
    Yield `load(items[i])` in mini-batches following `order`. The next batch
    is submitted to the pool before the current one is handed out, so only
    two batches are ever held in memory.
    """
    chunks = [order[start:start + batch_size] for start in range(0, len(order), batch_size)]

    def submit(chunk):
        return [pool.submit(load, items[i]) for i in chunk]

    pending = submit(chunks[0]) if chunks else []
    for k in range(len(chunks)):
        current = pending
        pending = submit(chunks[k + 1]) if k + 1 < len(chunks) else []
        yield [f.result() for f in current]


def fit(
    params: NetParams,
    examples: Sequence,
    cfg: TrainConfig,
    checkpoint: Optional[Union[str, Path]] = None,
    load: Optional[Callable] = None,
    workers: Optional[int] = None,
) -> Tuple[NetParams, List[dict]]:
    """
    Train with a deterministic validation split and shuffling. Returns the
    best-validation parameters and per-epoch history.

    `examples` holds either rendered (image, target) pairs or anything `load`
    turns into one; loading happens per mini-batch on a thread pool.
    """
    if len(examples) < 2:
        raise ValueError("Training needs at least two examples")
    load = load or _identity
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(examples))
    n_val = min(max(1, int(round(len(examples) * cfg.validation_fraction))), len(examples) - 1)
    val = [examples[i] for i in order[:n_val]]
    train_set = [examples[i] for i in order[n_val:]]
    decay_epoch = int(math.ceil(cfg.epochs * cfg.lr_decay_at))

    velocity: Dict[str, np.ndarray] = {}
    best, best_loss, history = params, math.inf, []
    with ThreadPoolExecutor(max_workers=workers or Settings().threads) as pool:
        for epoch in range(cfg.epochs):
            lr = cfg.learning_rate * (cfg.lr_decay if epoch >= decay_epoch else 1.0)
            perm = rng.permutation(len(train_set))
            losses = []
            for batch in rendered_batches(train_set, perm, cfg.batch_size, load, pool):
                params, loss = train_step(params, batch, cfg, velocity, learning_rate=lr)
                losses.append(loss)
            loss_sum, hits, total = 0.0, 0, 0
            for batch in rendered_batches(val, range(len(val)), cfg.batch_size, load, pool):
                loss_sum += _batch_loss(params, batch) * len(batch)
                h, t = _recall_counts(params, batch, cfg.recall_k)
                hits, total = hits + h, total + t
            val_loss = loss_sum / len(val)
            recall = hits / total if total else 0.0
            record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "recall": recall}
            history.append(record)
            logger.info(
                f"Epoch {epoch + 1}/{cfg.epochs}: train loss {record['train_loss']:.5f}, "
                f"validation loss {val_loss:.5f}, top-{cfg.recall_k} recall {recall:.3f}"
            )
            if val_loss < best_loss:
                best, best_loss = params, val_loss
                if checkpoint is not None:
                    save_model(best, checkpoint)
    return best, history


def train(
    data_dir: Union[str, Path],
    spec: NetSpec,
    cfg: TrainConfig,
    out_path: Optional[Union[str, Path]] = None,
) -> Tuple[NetParams, List[dict]]:
    """Train a freshly initialized network on a generated dataset directory."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    logger.info(f"Training on {len(manifest)} scenes from {data_dir}, rendered per mini-batch")

    def load(entry):
        return scene_example(load_scene(data_dir / entry.file), spec)

    return fit(init_params(spec, cfg.seed), manifest, cfg, checkpoint=out_path, load=load)


# Model files
# ------------------------

def save_model(params: NetParams, path: Union[str, Path]):
    spec_json = params.spec.model_dump_json().encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(spec_json)), spec_json]
    for name, tensor in params.tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{tensor.ndim}I", tensor.ndim, *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(b"".join(chunks))
    except OSError as e:
        raise ModelFileError(f"Could not write model {path}: {e}") from e


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedFile(f"Model file {self.path} ends at byte {len(self.data)}, needed {self.offset + size}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path: Union[str, Path]) -> NetParams:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ModelFileError(f"Could not read model {path}: {e}") from e
    reader = _Reader(data, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise BadMagic(f"{path} is not a model file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    try:
        spec = NetSpec.model_validate_json(reader.take(reader.u32()).decode("utf-8"))
    except ValueError as e:
        raise ModelFileError(f"Invalid network description in {path}: {e}") from e
    tensors = {}
    for _ in param_shapes(spec):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = np.frombuffer(reader.take(4 * count), dtype="<f4")
        tensors[name] = payload.astype(np.float32).reshape(shape)
    if reader.offset != len(data):
        raise ModelFileError(f"{path} has {len(data) - reader.offset} trailing bytes")
    return NetParams(spec, tensors)

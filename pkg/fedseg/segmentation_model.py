"""
Miniature 2D U-Net over a flat parameter vector.

The model has no object state: ``build_model`` returns a ``ParamSet`` (one float32
vector plus a segment table) and ``forward`` evaluates the network for a given
ParamSet. Segments are tagged with a kind so federated methods can select which
parts to aggregate (FedBN leaves every ``bn_*`` segment on the clients).
"""
import logging
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import rng
from .errors import ConfigurationError, DataFormatError, NumericError, UsageError, VersionError
from .tensor_core import (
    BN_MOMENTUM,
    Tape,
    Tensor,
    backward,
    batch_norm,
    bce_loss,
    concat_channels,
    conv2d,
    max_pool2,
    no_tape,
    relu,
    sigmoid,
    upsample_nearest2,
)

logger = logging.getLogger(__name__)

SEGMENT_KINDS = (
    "conv_weight",
    "conv_bias",
    "bn_gamma",
    "bn_beta",
    "bn_running_mean",
    "bn_running_var",
)
BN_KINDS = frozenset(k for k in SEGMENT_KINDS if k.startswith("bn_"))
CONV_KINDS = frozenset(k for k in SEGMENT_KINDS if k.startswith("conv_"))
RUNNING_KINDS = frozenset({"bn_running_mean", "bn_running_var"})
TRAINABLE_KINDS = frozenset(SEGMENT_KINDS) - RUNNING_KINDS

CHECKPOINT_MAGIC = b"FOBP"
CHECKPOINT_VERSION = 1

# block name -> (in, out) channel multipliers of base for conv1 and conv2; 0 means in_channels
_BLOCKS = (
    ("enc1", ((0, 1), (1, 1))),
    ("enc2", ((1, 2), (2, 2))),
    ("mid", ((2, 4), (4, 2))),
    ("dec2", ((4, 2), (2, 1))),
    ("dec1", ((2, 1), (1, 1))),
)


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if not isinstance(self.base_channels, int) or self.base_channels < 2 or self.base_channels % 2:
            raise ConfigurationError(f"must be an even integer >= 2, got {self.base_channels!r}", field="base_channels")
        if self.in_channels != 1:
            raise ConfigurationError("only single-channel slices are supported", field="in_channels")
        if self.out_channels != 1:
            raise ConfigurationError("only binary segmentation is supported", field="out_channels")


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    kind: str
    shape: Tuple[int, ...]


def conv_layers(config: ModelConfig) -> List[Tuple[str, int, int, int]]:
    """(layer name, in channels, out channels, kernel size) in forward order."""
    b = config.base_channels
    layers = []
    for block, convs in _BLOCKS:
        for i, (cin, cout) in enumerate(convs, start=1):
            layers.append((f"{block}.conv{i}", cin * b if cin else config.in_channels, cout * b, 3))
    layers.append(("head", b, config.out_channels, 1))
    return layers


@lru_cache(maxsize=None)
def build_layout(config: ModelConfig) -> Tuple[Segment, ...]:
    segments: List[Segment] = []
    offset = 0

    def add(name: str, kind: str, shape: Tuple[int, ...]):
        nonlocal offset
        length = int(np.prod(shape))
        segments.append(Segment(name, offset, length, kind, shape))
        offset += length

    for name, cin, cout, k in conv_layers(config):
        add(f"{name}.weight", "conv_weight", (cout, cin, k, k))
        add(f"{name}.bias", "conv_bias", (cout,))
        if name == "head":
            continue
        bn = name.replace(".conv", ".bn")
        add(f"{bn}.gamma", "bn_gamma", (cout,))
        add(f"{bn}.beta", "bn_beta", (cout,))
        add(f"{bn}.running_mean", "bn_running_mean", (cout,))
        add(f"{bn}.running_var", "bn_running_var", (cout,))
    return tuple(segments)


@lru_cache(maxsize=256)
def _kind_mask(segments: Tuple[Segment, ...], kinds: FrozenSet[str]) -> np.ndarray:
    total = segments[-1].offset + segments[-1].length
    mask = np.zeros(total, dtype=bool)
    for seg in segments:
        if seg.kind in kinds:
            mask[seg.offset:seg.offset + seg.length] = True
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Immutable flat parameter vector with its segment table."""

    config: ModelConfig
    values: np.ndarray
    segments: Tuple[Segment, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, copy=True).reshape(-1)
        expected = 0
        for seg in self.segments:
            if seg.offset != expected or seg.kind not in SEGMENT_KINDS:
                raise ConfigurationError(f"segment {seg.name} breaks the layout tiling")
            expected += seg.length
        if expected != values.size:
            raise ConfigurationError(f"segments cover {expected} values, vector has {values.size}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", {seg.name: seg for seg in self.segments})

    @property
    def size(self) -> int:
        return self.values.size

    def segment_info(self, name: str) -> Segment:
        try:
            return self._index[name]
        except KeyError:
            raise UsageError(f"unknown parameter segment {name!r}") from None

    def segment(self, name: str) -> np.ndarray:
        seg = self.segment_info(name)
        return self.values[seg.offset:seg.offset + seg.length].reshape(seg.shape)

    def kind_mask(self, kinds: Iterable[str]) -> np.ndarray:
        return _kind_mask(self.segments, frozenset(kinds))

    @property
    def bn_mask(self) -> np.ndarray:
        return self.kind_mask(BN_KINDS)

    def same_layout(self, other: "ParamSet") -> bool:
        return self.segments == other.segments

    def identical(self, other: "ParamSet") -> bool:
        return self.same_layout(other) and self.values.tobytes() == other.values.tobytes()

    def with_values(self, values: np.ndarray) -> "ParamSet":
        return ParamSet(self.config, values, self.segments)

    def merged(self, source: np.ndarray, mask: np.ndarray) -> "ParamSet":
        """Copy of self with the masked positions taken from ``source``."""
        values = self.values.copy()
        values[mask] = source[mask]
        return self.with_values(values)

    def flat_grad(self, leaves: Dict[str, Tensor], grads: Dict[int, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.size, dtype=np.float32)
        for name, leaf in leaves.items():
            g = grads.get(leaf.id)
            if g is None:
                continue
            seg = self._index[name]
            out[seg.offset:seg.offset + seg.length] = g.reshape(-1)
        return out


def parameter_count(config: ModelConfig) -> int:
    last = build_layout(config)[-1]
    return last.offset + last.length


def build_model(config: ModelConfig, seed: int) -> ParamSet:
    """He-normal conv weights, zero biases, identity batch norm; a pure function of seed."""
    segments = build_layout(config)
    values = np.zeros(parameter_count(config), dtype=np.float32)
    stream = rng.stream(seed, "model-init")
    for seg in segments:
        view = values[seg.offset:seg.offset + seg.length]
        if seg.kind == "conv_weight":
            fan_in = int(np.prod(seg.shape[1:]))
            view[:] = stream.normal(0.0, np.sqrt(2.0 / fan_in), size=seg.length)
        elif seg.kind in ("bn_gamma", "bn_running_var"):
            view[:] = 1.0
    return ParamSet(config, values, segments)


@dataclass
class ForwardPass:
    prob_map: Tensor
    params: ParamSet
    leaves: Dict[str, Tensor]


@contextmanager
def _layer(name: str) -> Iterator[None]:
    try:
        yield
    except NumericError as exc:
        raise NumericError(f"layer {name}: {exc}") from exc


def forward(
    params: ParamSet,
    images: Union[Tensor, np.ndarray],
    mode: str = "eval",
    bn_momentum: float = BN_MOMENTUM,
) -> ForwardPass:
    """Run the U-Net.

    Train mode records on the active tape (if any) and returns params carrying the
    updated BN running statistics; eval mode records nothing and returns ``params``
    unchanged.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown mode {mode!r}", field="mode")
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if x.ndim != 4 or x.shape[1] != params.config.in_channels:
        raise ConfigurationError(f"images must be [N,{params.config.in_channels},H,W], got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ConfigurationError(f"image size {x.shape[2]}x{x.shape[3]} is not divisible by 4")
    if mode == "eval":
        with no_tape():
            return _run(params, x, mode, bn_momentum)
    return _run(params, x, mode, bn_momentum)


def _run(params: ParamSet, x: Tensor, mode: str, bn_momentum: float) -> ForwardPass:
    train = mode == "train"
    leaves = {
        seg.name: Tensor(params.segment(seg.name), requires_grad=train)
        for seg in params.segments
        if seg.kind in TRAINABLE_KINDS
    }
    new_values = params.values.copy() if train else None

    def double_conv(block: str, h: Tensor) -> Tensor:
        for i in (1, 2):
            conv, bn = f"{block}.conv{i}", f"{block}.bn{i}"
            with _layer(conv):
                h = conv2d(h, leaves[f"{conv}.weight"], leaves[f"{conv}.bias"])
            with _layer(bn):
                stats = (params.segment(f"{bn}.running_mean"), params.segment(f"{bn}.running_var"))
                h, (mean, var) = batch_norm(
                    h, leaves[f"{bn}.gamma"], leaves[f"{bn}.beta"], stats, mode=mode, momentum=bn_momentum
                )
                h = relu(h)
            if train:
                for suffix, value in (("running_mean", mean), ("running_var", var)):
                    seg = params.segment_info(f"{bn}.{suffix}")
                    new_values[seg.offset:seg.offset + seg.length] = value
        return h

    skips = []
    h = x
    for block in ("enc1", "enc2"):
        h = double_conv(block, h)
        skips.append(h)
        h = max_pool2(h)
    h = double_conv("mid", h)
    for block, skip in (("dec2", skips[1]), ("dec1", skips[0])):
        h = concat_channels(upsample_nearest2(h), skip)
        h = double_conv(block, h)
    with _layer("head"):
        prob = sigmoid(conv2d(h, leaves["head.weight"], leaves["head.bias"]))
    out_params = params.with_values(new_values) if train else params
    return ForwardPass(prob, out_params, leaves)


def loss_and_grad(
    params: ParamSet,
    images: np.ndarray,
    masks: np.ndarray,
    bn_momentum: float = BN_MOMENTUM,
) -> Tuple[float, np.ndarray, ParamSet]:
    """Train-mode BCE on one batch: (loss, flat gradient, params with updated BN stats).

    Running-statistic positions of the gradient are zero.
    """
    with Tape() as tape:
        fp = forward(params, images, mode="train", bn_momentum=bn_momentum)
        loss = bce_loss(fp.prob_map, masks)
    grads = backward(loss, tape)
    return loss.item(), params.flat_grad(fp.leaves, grads), fp.params


def predict(params: ParamSet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probability maps for a stack of images [N,1,H,W]."""
    chunks = [
        forward(params, images[i:i + batch_size], mode="eval").prob_map.data
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def recalibrate_bn(params: ParamSet, batches: Sequence[np.ndarray]) -> ParamSet:
    """Replace running statistics with the cumulative average over ``batches``."""
    fresh = params.values.copy()
    for seg in params.segments:
        if seg.kind == "bn_running_mean":
            fresh[seg.offset:seg.offset + seg.length] = 0.0
        elif seg.kind == "bn_running_var":
            fresh[seg.offset:seg.offset + seg.length] = 1.0
    current = params.with_values(fresh)
    with no_tape():
        for i, batch in enumerate(batches):
            current = forward(current, batch, mode="train", bn_momentum=1.0 / (i + 1)).params
    return current


def binarize(prob_map: Union[Tensor, np.ndarray], threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}", field="threshold")
    data = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map)
    return (data >= threshold).astype(np.uint8)


def dice(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise UsageError(f"dice needs equal shapes, got {pred.shape} and {true.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(true, (0, 1)).all()):
        raise UsageError("dice needs binary masks")
    pred = pred.astype(bool)
    true = true.astype(bool)
    total = int(pred.sum()) + int(true.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, true).sum()) / total


# checkpoint header: magic, version u32, segment count u32
_HEADER = struct.Struct("<4sII")
_SEG_FIXED = struct.Struct("<QQB")


def save_checkpoint(params: ParamSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params.segments))]
    for seg in params.segments:
        name = seg.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(_SEG_FIXED.pack(seg.offset, seg.length, SEGMENT_KINDS.index(seg.kind)))
    parts.append(params.values.astype("<f4").tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> ParamSet:
    """Read a checkpoint; with no config the base width is inferred from the first layer."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc

    def need(offset: int, size: int):
        if offset + size > len(blob):
            raise DataFormatError(f"truncated checkpoint (need {size} bytes)", offset, str(path))

    need(0, _HEADER.size)
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", 0, str(path))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = _HEADER.size
    table = []
    for _ in range(count):
        need(offset, 2)
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        need(offset, name_len + _SEG_FIXED.size)
        try:
            name = blob[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError("segment name is not valid UTF-8", offset, str(path)) from None
        offset += name_len
        seg_offset, seg_length, kind = _SEG_FIXED.unpack_from(blob, offset)
        offset += _SEG_FIXED.size
        if kind >= len(SEGMENT_KINDS):
            raise DataFormatError(f"unknown segment kind {kind}", offset - 1, str(path))
        table.append((name, seg_offset, seg_length, SEGMENT_KINDS[kind]))

    if config is None:
        first_bias = next((length for name, _, length, _ in table if name == "enc1.conv1.bias"), None)
        if first_bias is None:
            raise VersionError(f"{path}: checkpoint has no enc1.conv1.bias segment")
        config = ModelConfig(base_channels=int(first_bias))
    layout = build_layout(config)
    if [(s.name, s.offset, s.length, s.kind) for s in layout] != table:
        raise VersionError(f"{path}: checkpoint layout does not match base_channels={config.base_channels}")

    total = parameter_count(config)
    need(offset, total * 4)
    values = np.frombuffer(blob, dtype="<f4", count=total, offset=offset).astype(np.float32)
    return ParamSet(config, values, layout)

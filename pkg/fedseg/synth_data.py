"""
Procedural CT-like slices with tumor masks, split into non-IID clients.

Every slice is drawn from its own named random stream, so a dataset is a pure function
of the global seed and does not depend on generation order. Client heterogeneity comes
from the tumor-size distribution, scanner noise level, contrast and dataset size.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from scipy.ndimage import gaussian_filter

from . import rng
from .errors import ConfigurationError, DataFormatError, GenerationError, UsageError

logger = logging.getLogger(__name__)

BASE_INTENSITY = 0.35
TEXTURE_AMPLITUDE = 0.05
DEFAULT_NOISE = 0.03
HIGH_NOISE = 0.10
LARGE_SHARE = 0.70
MAX_CENTER_ATTEMPTS = 100
MAX_TUMORS = 3

DATASET_MAGIC = b"FOBD"
DATASET_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.txt"

RADIUS_MODES = ("large-skew", "small-skew", "uniform")

_HEADER = struct.Struct("<4sIIHH")
_META = struct.Struct("<BIQB")


@dataclass(frozen=True)
class DataScale:
    size: Tuple[int, int]
    client_counts: Tuple[int, ...]
    test_count: int
    shadow_count: int


DATA_SCALES: Dict[str, DataScale] = {
    "paper": DataScale((256, 256), (1000, 1000, 1000, 500, 500), 1000, 1000),
    "desk": DataScale((32, 32), (200, 200, 200, 100, 100), 200, 200),
}


@dataclass(frozen=True)
class RadiusDist:
    min_frac: float
    max_frac: float
    mode: str = "uniform"

    def __post_init__(self):
        if not 0.0 < self.min_frac < self.max_frac < 0.5:
            raise ConfigurationError(
                f"need 0 < min_frac < max_frac < 0.5, got {self.min_frac}, {self.max_frac}", field="tumor_radius_dist"
            )
        if self.mode not in RADIUS_MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}", field="tumor_radius_dist")

    def draw(self, stream: np.random.Generator) -> float:
        lo, hi = self.min_frac, self.max_frac
        if self.mode == "uniform":
            return float(stream.uniform(lo, hi))
        mid = 0.5 * (lo + hi)
        in_majority = stream.random() < LARGE_SHARE
        upper = in_majority if self.mode == "large-skew" else not in_majority
        return float(stream.uniform(mid, hi) if upper else stream.uniform(lo, mid))


@dataclass(frozen=True)
class ClientSpec:
    client_id: int
    n_train: int
    tumor_radius_dist: RadiusDist
    noise_sigma: float = DEFAULT_NOISE
    contrast_delta: float = 0.3

    def __post_init__(self):
        if not 0 <= self.client_id < 256:
            raise ConfigurationError(f"client id {self.client_id} does not fit in a byte", field="client_id")
        if self.n_train < 0:
            raise ConfigurationError("must be non-negative", field="n_train")
        if self.noise_sigma < 0:
            raise ConfigurationError("must be non-negative", field="noise_sigma")


LARGE_RADII = (0.08, 0.25)
SMALL_RADII = (0.03, 0.10)
UNIFORM_RADII = (0.05, 0.20)


def default_client_specs(scale: str) -> List[ClientSpec]:
    """Five clients: large tumors, small tumors, noisy scanner, and two smaller sites."""
    counts = DATA_SCALES[scale].client_counts
    return [
        ClientSpec(1, counts[0], RadiusDist(*LARGE_RADII, "large-skew"), DEFAULT_NOISE, 0.30),
        ClientSpec(2, counts[1], RadiusDist(*SMALL_RADII, "small-skew"), DEFAULT_NOISE, 0.30),
        ClientSpec(3, counts[2], RadiusDist(*UNIFORM_RADII, "uniform"), HIGH_NOISE, 0.35),
        ClientSpec(4, counts[3], RadiusDist(*UNIFORM_RADII, "uniform"), DEFAULT_NOISE, 0.25),
        ClientSpec(5, counts[4], RadiusDist(*UNIFORM_RADII, "uniform"), DEFAULT_NOISE, 0.20),
    ]


@dataclass(frozen=True)
class SliceMeta:
    client_id: int
    sample_index: int
    seed_used: int
    n_tumors: int
    # radii are not stored on disk
    radii: Tuple[float, ...] = field(default=(), compare=False)


@dataclass(eq=False)
class SliceSample:
    image: np.ndarray
    mask: np.ndarray
    meta: SliceMeta

    def __eq__(self, other):
        if not isinstance(other, SliceSample):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
            and self.mask.tobytes() == other.mask.tobytes()
        )


def _check_size(size: Tuple[int, int]) -> Tuple[int, int]:
    h, w = size
    if h < 16 or w < 16 or h % 4 or w % 4:
        raise ConfigurationError(f"slice size must be >= 16 and divisible by 4, got {h}x{w}", field="size")
    return int(h), int(w)


def generate_slice(
    stream: np.random.Generator,
    spec: ClientSpec,
    size: Tuple[int, int],
    sample_index: int = 0,
    seed_used: int = 0,
    texture: bool = True,
) -> SliceSample:
    """Draw one slice: textured body ellipse, 1-3 tumor ellipses, scanner noise, clamp.

    ``texture=False`` keeps the stream consumption identical but drops the texture
    field, which makes intensities exactly piecewise constant before noise.
    """
    h, w = _check_size(size)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    cy = h / 2 + stream.uniform(-0.05, 0.05) * h
    cx = w / 2 + stream.uniform(-0.05, 0.05) * w
    ay = stream.uniform(0.35, 0.45) * h
    ax = stream.uniform(0.35, 0.45) * w
    body = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0

    field_ = gaussian_filter(stream.standard_normal((h, w)), sigma=max(h, w) / 8.0, mode="reflect")
    field_ /= max(float(np.abs(field_).max()), 1e-12)
    tex = TEXTURE_AMPLITUDE * field_ if texture else np.zeros((h, w))

    k = int(stream.integers(1, MAX_TUMORS + 1))
    tumors: List[np.ndarray] = []
    radii: List[float] = []
    for _ in range(k):
        frac = spec.tumor_radius_dist.draw(stream)
        major = max(frac * w, 1.0)
        minor = max(major * stream.uniform(0.6, 1.0), 1.0)
        theta = stream.uniform(0.0, np.pi)
        for _attempt in range(MAX_CENTER_ATTEMPTS):
            py = stream.uniform(cy - ay, cy + ay)
            px = stream.uniform(cx - ax, cx + ax)
            if ((py - cy) / ay) ** 2 + ((px - cx) / ax) ** 2 <= 1.0:
                break
        else:
            raise GenerationError(
                f"client {spec.client_id} sample {sample_index}: no tumor center inside the body "
                f"after {MAX_CENTER_ATTEMPTS} attempts"
            )
        dy, dx = yy - py, xx - px
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        tumors.append((u / major) ** 2 + (v / minor) ** 2 <= 1.0)
        radii.append(frac)

    mask = np.logical_or.reduce(tumors)
    # masks must stay under half the image; trailing tumors are dropped until they do
    while len(tumors) > 1 and mask.mean() >= 0.5:
        tumors.pop()
        radii.pop()
        mask = np.logical_or.reduce(tumors)

    image = np.where(body, BASE_INTENSITY + tex, 0.0)
    image = np.where(mask, BASE_INTENSITY + spec.contrast_delta + tex, image)
    image = image + spec.noise_sigma * stream.standard_normal((h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    meta = SliceMeta(spec.client_id, sample_index, seed_used, len(tumors), tuple(radii))
    return SliceSample(image, mask.astype(np.uint8), meta)


def generate_split(
    global_seed: int,
    split: str,
    specs: Sequence[ClientSpec],
    count: int,
    size: Tuple[int, int],
) -> List[SliceSample]:
    """``count`` slices cycling through ``specs``; each slice owns the stream (split, client, index)."""
    samples = []
    for index in range(count):
        spec = specs[index % len(specs)]
        seed_used = rng.derive_seed(global_seed, "slice", split, spec.client_id, index)
        samples.append(generate_slice(rng.generator(seed_used), spec, size, index, seed_used))
    return samples


def split_counts(count: int) -> Tuple[int, int]:
    """80/20 train/validation split, validation rounded down."""
    val = count // 5
    return count - val, val


# dataset files ---------------------------------------------------------------------


def write_dataset(samples: Sequence[SliceSample], path: Union[str, Path]) -> Path:
    if not samples:
        raise UsageError("cannot write an empty dataset")
    h, w = samples[0].image.shape
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), h, w)]
    for s in samples:
        if s.image.shape != (h, w) or s.mask.shape != (h, w):
            raise UsageError(f"sample {s.meta.sample_index} is {s.image.shape}, dataset is {h}x{w}")
        m = s.meta
        parts.append(s.image.astype("<f4").tobytes())
        parts.append(s.mask.astype(np.uint8).tobytes())
        parts.append(_META.pack(m.client_id, m.sample_index, m.seed_used, m.n_tumors))
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc
    return path


def dataset_file_size(count: int, height: int, width: int) -> int:
    return _HEADER.size + count * (height * width * 5 + _META.size)


def read_dataset(path: Union[str, Path]) -> List[SliceSample]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DataFormatError("truncated header", len(blob), str(path))
    magic, version, count, h, w = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", 0, str(path))
    if version != DATASET_VERSION:
        raise DataFormatError(f"unsupported version {version}", 4, str(path))

    pixels = h * w
    record = pixels * 5 + _META.size
    samples = []
    offset = _HEADER.size
    for i in range(count):
        if offset + record > len(blob):
            raise DataFormatError(f"truncated sample {i} of {count}", offset, str(path))
        image = np.frombuffer(blob, dtype="<f4", count=pixels, offset=offset).reshape(h, w).astype(np.float32)
        mask = np.frombuffer(blob, dtype=np.uint8, count=pixels, offset=offset + 4 * pixels).reshape(h, w).copy()
        client_id, sample_index, seed_used, n_tumors = _META.unpack_from(blob, offset + 5 * pixels)
        samples.append(SliceSample(image, mask, SliceMeta(client_id, sample_index, seed_used, n_tumors)))
        offset += record
    if offset != len(blob):
        raise DataFormatError(f"{len(blob) - offset} trailing bytes", offset, str(path))
    return samples


# federation ------------------------------------------------------------------------


def _line_offset(path: Path, key: str) -> int:
    """Byte offset of the ``key=`` line in a key=value file, 0 when absent."""
    offset = 0
    for line in path.read_bytes().splitlines(keepends=True):
        if line.startswith(f"{key}=".encode("utf-8")):
            return offset
        offset += len(line)
    return 0


@dataclass(frozen=True)
class ClientEntry:
    spec: ClientSpec
    file: str
    train_count: int
    val_count: int


@dataclass(frozen=True)
class DatasetManifest:
    global_seed: int
    scale: str
    size: Tuple[int, int]
    clients: Tuple[ClientEntry, ...]
    test_file: str
    test_count: int
    shadow_file: str
    shadow_count: int
    format_version: int = MANIFEST_VERSION
    root: Optional[Path] = field(default=None, compare=False)

    @property
    def shadow_member_count(self) -> int:
        return self.shadow_count // 2

    def path(self, name: str) -> Path:
        return (self.root or Path(".")) / name

    def to_text(self) -> str:
        lines = [
            "# fedseg dataset manifest",
            f"format_version={self.format_version}",
            f"global_seed={self.global_seed}",
            f"scale={self.scale}",
            f"height={self.size[0]}",
            f"width={self.size[1]}",
            f"clients={','.join(str(c.spec.client_id) for c in self.clients)}",
        ]
        for c in self.clients:
            s, d = c.spec, c.spec.tumor_radius_dist
            prefix = f"client.{s.client_id}"
            lines += [
                f"{prefix}.file={c.file}",
                f"{prefix}.count={s.n_train}",
                f"{prefix}.train_count={c.train_count}",
                f"{prefix}.val_count={c.val_count}",
                f"{prefix}.radius_mode={d.mode}",
                f"{prefix}.radius_min_frac={d.min_frac!r}",
                f"{prefix}.radius_max_frac={d.max_frac!r}",
                f"{prefix}.noise_sigma={s.noise_sigma!r}",
                f"{prefix}.contrast_delta={s.contrast_delta!r}",
            ]
        lines += [
            f"test.file={self.test_file}",
            f"test.count={self.test_count}",
            f"shadow.file={self.shadow_file}",
            f"shadow.count={self.shadow_count}",
            f"shadow.members={self.shadow_member_count}",
        ]
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.write_text(self.to_text(), encoding="utf-8", newline="\n")
        except OSError as exc:
            raise OSError(f"cannot write manifest {path}: {exc}") from exc
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        values = dotenv_values(path, interpolate=False)

        def get(key: str) -> str:
            value = values.get(key)
            if value is None:
                raise DataFormatError(f"manifest is missing {key!r}", 0, str(path))
            return value

        def number(key: str, cast=int, value: Optional[str] = None):
            value = get(key) if value is None else value
            try:
                return cast(value)
            except ValueError:
                raise DataFormatError(
                    f"manifest value {key}={value!r} is not a number", _line_offset(path, key), str(path)
                ) from None

        version = number("format_version")
        if version != MANIFEST_VERSION:
            raise DataFormatError(f"unsupported manifest version {version}", 0, str(path))
        clients = []
        for cid in (number("clients", int, x) for x in get("clients").split(",")):
            p = f"client.{cid}"
            spec = ClientSpec(
                cid,
                number(f"{p}.count"),
                RadiusDist(
                    number(f"{p}.radius_min_frac", float), number(f"{p}.radius_max_frac", float), get(f"{p}.radius_mode")
                ),
                number(f"{p}.noise_sigma", float),
                number(f"{p}.contrast_delta", float),
            )
            clients.append(ClientEntry(spec, get(f"{p}.file"), number(f"{p}.train_count"), number(f"{p}.val_count")))
        return cls(
            global_seed=number("global_seed"),
            scale=get("scale"),
            size=(number("height"), number("width")),
            clients=tuple(clients),
            test_file=get("test.file"),
            test_count=number("test.count"),
            shadow_file=get("shadow.file"),
            shadow_count=number("shadow.count"),
            format_version=version,
            root=path.parent,
        )


def build_federation(
    global_seed: int,
    out_dir: Union[str, Path],
    scale: str = "desk",
    size: Optional[Tuple[int, int]] = None,
    specs: Optional[Sequence[ClientSpec]] = None,
    test_count: Optional[int] = None,
    shadow_count: Optional[int] = None,
    pool=None,
) -> DatasetManifest:
    """Generate every client file, the global test set and the shadow pool, then the manifest.

    The test set and the shadow pool cycle through all client specs in equal shares.
    ``pool`` (a ``ClientWorkerPool``) generates the splits concurrently.
    """
    if scale not in DATA_SCALES:
        raise ConfigurationError(f"unknown scale {scale!r}", field="scale")
    preset = DATA_SCALES[scale]
    size = _check_size(size or preset.size)
    specs = list(specs or default_client_specs(scale))
    test_count = preset.test_count if test_count is None else test_count
    shadow_count = preset.shadow_count if shadow_count is None else shadow_count
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = {f"client_{s.client_id}": ([s], s.n_train) for s in specs}
    jobs["test"] = (specs, test_count)
    jobs["shadow"] = (specs, shadow_count)

    def build(split: str) -> str:
        split_specs, count = jobs[split]
        samples = generate_split(global_seed, split, split_specs, count, size)
        write_dataset(samples, out_dir / f"{split}.fobd")
        logger.info(f"Generated {split}: {count} slices of {size[0]}x{size[1]}")
        return split

    names = list(jobs)
    if pool is None:
        for name in names:
            build(name)
    else:
        pool.map_tasks("gen-data", {name: (lambda n=name: build(n)) for name in names})

    clients = tuple(
        ClientEntry(s, f"client_{s.client_id}.fobd", *split_counts(s.n_train)) for s in specs
    )
    manifest = DatasetManifest(
        global_seed=int(global_seed),
        scale=scale,
        size=size,
        clients=clients,
        test_file="test.fobd",
        test_count=test_count,
        shadow_file="shadow.fobd",
        shadow_count=shadow_count,
        root=out_dir,
    )
    manifest.write(out_dir / MANIFEST_NAME)
    return manifest


# in-memory views used by training --------------------------------------------------


@dataclass
class SampleArrays:
    """Stacked images [N,1,H,W] float32 and masks [N,1,H,W] uint8 with their provenance."""

    images: np.ndarray
    masks: np.ndarray
    meta: Tuple[SliceMeta, ...]

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices: Sequence[int]) -> "SampleArrays":
        idx = np.asarray(indices, dtype=np.int64)
        return SampleArrays(self.images[idx], self.masks[idx], tuple(self.meta[i] for i in idx))

    @classmethod
    def concat(cls, parts: Sequence["SampleArrays"]) -> "SampleArrays":
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.masks for p in parts]),
            tuple(m for p in parts for m in p.meta),
        )


def stack(samples: Sequence[SliceSample]) -> SampleArrays:
    if not samples:
        raise UsageError("cannot stack an empty sample list")
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    masks = np.stack([s.mask for s in samples])[:, None].astype(np.uint8)
    return SampleArrays(images, masks, tuple(s.meta for s in samples))


@dataclass
class ClientData:
    client_id: int
    train: SampleArrays
    val: SampleArrays


@dataclass
class Federation:
    manifest: DatasetManifest
    clients: List[ClientData]
    test: SampleArrays
    shadow_members: SampleArrays
    shadow_nonmembers: SampleArrays

    @property
    def client_ids(self) -> List[int]:
        return [c.client_id for c in self.clients]


def load_federation(manifest: Union[DatasetManifest, str, Path]) -> Federation:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    clients = []
    for entry in manifest.clients:
        samples = read_dataset(manifest.path(entry.file))
        if len(samples) != entry.train_count + entry.val_count:
            raise DataFormatError(
                f"manifest lists {entry.train_count + entry.val_count} slices, file holds {len(samples)}",
                0,
                str(manifest.path(entry.file)),
            )
        arrays = stack(samples)
        n_train = entry.train_count
        clients.append(
            ClientData(
                entry.spec.client_id,
                arrays.subset(range(n_train)),
                arrays.subset(range(n_train, len(arrays))),
            )
        )
    test = stack(read_dataset(manifest.path(manifest.test_file)))
    shadow = stack(read_dataset(manifest.path(manifest.shadow_file)))
    half = manifest.shadow_member_count
    return Federation(
        manifest=manifest,
        clients=clients,
        test=test,
        shadow_members=shadow.subset(range(half)),
        shadow_nonmembers=shadow.subset(range(half, len(shadow))),
    )

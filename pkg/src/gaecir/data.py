"""Dataset construction: MNIST IDX ingestion, rotated-pair generation for the
discrete transformation sets, contrast normalization, and a synthetic shape
generator so tests and demos need no downloads.

Pair files use the GAEPAIR1 binary format:
    magic "GAEPAIR1" | u64 N | u64 P | x rows f32 | y rows f32 | N i16 labels
(all little-endian, rows row-major).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DegenerateInputError, FormatError, TruncationError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
PAIR_MAGIC = b"GAEPAIR1"

MNISTR20_ANGLES = tuple(range(-180, 180, 20))        # 18 classes
MNISTR20_10_ANGLES = tuple(range(-170, 180, 20))     # 18 complementary classes
MNISTR1_ANGLES = tuple(range(-180, 180))             # 360 classes


@dataclass
class ImageSet:
    """Square grayscale images in [0, 1] with a split tag."""

    images: np.ndarray  # (N, H, W)
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ConfigError(f"images must be (N, H, W), got shape {self.images.shape}")
        if self.images.shape[0] == 0:
            raise ConfigError("image set is empty")
        if self.images.shape[1] != self.images.shape[2]:
            raise ConfigError(
                f"images must be square, got {self.images.shape[1]}x{self.images.shape[2]}"
            )


@dataclass(frozen=True)
class TransformationSet:
    """Named set of discrete rotation angles (degrees)."""

    name: str
    angles: tuple

    def __post_init__(self):
        if len(self.angles) == 0:
            raise ConfigError("angle set is empty")
        if list(self.angles) != sorted(self.angles):
            raise ConfigError("angles must be sorted")
        for a in self.angles:
            if not -180 <= a <= 179:
                raise ConfigError(f"angle {a} outside [-180, 179]")

    @classmethod
    def from_name(cls, name: str) -> "TransformationSet":
        key = name.lower().replace("-", "_").replace("/", "_")
        table = {
            "mnistr20": MNISTR20_ANGLES,
            "mnistr20_10": MNISTR20_10_ANGLES,
            "mnistr1": MNISTR1_ANGLES,
        }
        if key not in table:
            raise ConfigError(f"unknown transformation set {name!r}")
        return cls(key, table[key])


@dataclass
class PairDataset:
    """Flattened image pairs with ground-truth rotation labels.

    Labels are used for evaluation only, never during training.
    """

    x: np.ndarray            # (N, P) float32
    y: np.ndarray            # (N, P) float32
    angle_label: np.ndarray  # (N,) int
    normalized: bool = False

    def __post_init__(self):
        if self.x.shape != self.y.shape or self.x.ndim != 2:
            raise ConfigError(
                f"x and y must be matching (N, P) matrices, got {self.x.shape} / {self.y.shape}"
            )
        if self.angle_label.shape != (self.x.shape[0],):
            raise ConfigError("angle_label length must match the number of pairs")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncationError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def _open_maybe_gzip(path):
    fh = open(path, "rb")
    head = fh.read(2)
    fh.seek(0)
    if head == b"\x1f\x8b":
        fh.close()
        return gzip.open(path, "rb")
    return fh


def load_idx(path, split: str = "train") -> ImageSet:
    """Parse an IDX image file (optionally gzipped) into an ImageSet.

    Pixels are unsigned bytes scaled to [0, 1].
    """
    with _open_maybe_gzip(path) as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "IDX magic"))
        if magic == IDX_LABEL_MAGIC:
            raise FormatError(f"{path} is an IDX label file, expected an image file")
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad IDX magic 0x{magic:08x} in {path}")
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, "IDX dims"))
        if n <= 0 or rows <= 0 or cols <= 0 or n * rows * cols > 2**33:
            raise FormatError(f"implausible IDX dimensions ({n}, {rows}, {cols})")
        payload = _read_exact(fh, n * rows * cols, "IDX pixel payload")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)
    return ImageSet(images.astype(np.float32) / 255.0, split=split)


def rotate_image(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center, bilinear interpolation.

    Samples outside the source image read as zero.  Exact at multiples of
    90 degrees (the inverse map lands on grid points).
    """
    image = np.asarray(image)
    h, w = image.shape
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # centered coords: px right, py up; inverse-rotate each output pixel
    px = cc - cx
    py = cy - rr
    sx = cos_t * px + sin_t * py
    sy = -sin_t * px + cos_t * py
    col_s = sx + cx
    row_s = cy - sy

    r0 = np.floor(row_s).astype(np.int64)
    c0 = np.floor(col_s).astype(np.int64)
    fr = row_s - r0
    fc = col_s - c0

    def sample(ri, ci):
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = np.zeros_like(row_s, dtype=np.float64)
        vals[valid] = image[ri[valid], ci[valid]]
        return vals

    out = ((1 - fr) * (1 - fc) * sample(r0, c0)
           + (1 - fr) * fc * sample(r0, c0 + 1)
           + fr * (1 - fc) * sample(r0 + 1, c0)
           + fr * fc * sample(r0 + 1, c0 + 1))
    return out.astype(image.dtype, copy=False)


def circular_mask(size: int) -> np.ndarray:
    """Boolean mask of the inscribed disk on a size x size grid."""
    c = (size - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return (rr - c) ** 2 + (cc - c) ** 2 <= (size / 2.0) ** 2


def make_rotation_pairs(images: ImageSet, tset: TransformationSet,
                        pairs_per_image: int, rng,
                        mask_disk: bool = True) -> PairDataset:
    """Rotated pairs: x at a random base angle, y at base + class angle.

    The base angle is continuous-uniform in [0, 360) so mapping codes cannot
    key on absolute orientation.  Per-pair RNG streams are derived from
    (seed, pair index) so generation order never changes the dataset.
    """
    if pairs_per_image < 1:
        raise ConfigError("pairs_per_image must be >= 1")
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(2**63))
    else:
        seed = int(rng)
    n_img = images.images.shape[0]
    size = images.images.shape[1]
    mask = circular_mask(size) if mask_disk else np.ones((size, size), bool)
    angles = np.asarray(tset.angles)

    xs, ys, labels = [], [], []
    for idx in range(n_img * pairs_per_image):
        img = images.images[idx % n_img]
        pair_rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
        for _ in range(8):  # redraw if a rotation comes out degenerate
            base = pair_rng.uniform(0.0, 360.0)
            theta = int(angles[pair_rng.integers(len(angles))])
            xi = rotate_image(img, base) * mask
            yi = rotate_image(img, base + theta) * mask
            if xi.std() > 1e-6 and yi.std() > 1e-6:
                break
        else:
            continue  # image too empty to produce a usable pair
        xs.append(xi.ravel().astype(np.float32))
        ys.append(yi.ravel().astype(np.float32))
        labels.append(theta)
    if not xs:
        raise DegenerateInputError("no usable pairs could be generated")
    return PairDataset(np.stack(xs), np.stack(ys),
                       np.asarray(labels, dtype=np.int16))


def contrast_normalize(dataset: PairDataset) -> PairDataset:
    """Per-row zero mean and unit (population) standard deviation."""
    def norm_rows(mat):
        mu = mat.mean(axis=1, keepdims=True)
        sd = mat.std(axis=1, keepdims=True)
        if np.any(sd < 1e-8):
            bad = int(np.argmax(sd.ravel() < 1e-8))
            raise DegenerateInputError(f"row {bad} is (near-)constant, cannot normalize")
        return ((mat - mu) / sd).astype(np.float32)

    return PairDataset(norm_rows(dataset.x), norm_rows(dataset.y),
                       dataset.angle_label.copy(), normalized=True)


def _render_bar(size, cx, cy, angle, length, width, amp):
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dx = cc - cx
    dy = rr - cy
    along = dx * np.cos(angle) + dy * np.sin(angle)
    across = -dx * np.sin(angle) + dy * np.cos(angle)
    return amp * np.exp(-((along / length) ** 4) - (across / width) ** 2)


def _render_blob(size, cx, cy, sigma, amp):
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return amp * np.exp(-(((cc - cx) ** 2 + (rr - cy) ** 2) / (2 * sigma ** 2)))


def _is_rotation_symmetric(img: np.ndarray) -> bool:
    sd = img.std()
    if sd < 1e-6:
        return True
    norm = (img - img.mean()) / sd
    for quarter_turns in (1, 2, 3):
        rot = np.rot90(norm, quarter_turns)
        if np.sqrt(np.sum((norm - rot) ** 2)) <= 0.1:
            return True
    return False


def synthetic_shapes(n: int, size: int, rng) -> ImageSet:
    """Random oriented bars and two-blob patterns on a size x size grid.

    Every generated image is rotation-asymmetric (offenders are redrawn), so
    rotated pairs always carry angle information.
    """
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    images = np.zeros((n, size, size), dtype=np.float32)
    c = (size - 1) / 2.0
    for i in range(n):
        while True:
            img = np.zeros((size, size))
            # a bar, off-center and oriented at random
            img += _render_bar(
                size,
                cx=c + rng.uniform(-size / 8, size / 8),
                cy=c + rng.uniform(-size / 8, size / 8),
                angle=rng.uniform(0, np.pi),
                length=rng.uniform(size / 5, size / 3),
                width=rng.uniform(1.0, size / 10),
                amp=rng.uniform(0.6, 1.0),
            )
            # two blobs at different radii break any leftover symmetry
            for _ in range(2):
                radius = rng.uniform(size / 8, size / 3)
                phi = rng.uniform(0, 2 * np.pi)
                img += _render_blob(
                    size,
                    cx=c + radius * np.cos(phi),
                    cy=c + radius * np.sin(phi),
                    sigma=rng.uniform(1.0, size / 8),
                    amp=rng.uniform(0.4, 0.9),
                )
            img = np.clip(img, 0.0, 1.0)
            if np.mean(img > 0.05) >= 0.10 and not _is_rotation_symmetric(img):
                images[i] = img.astype(np.float32)
                break
    return ImageSet(images)


def resize_images(images: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize of an (N, H, W) stack to (N, out_size, out_size)."""
    out = np.empty((images.shape[0], out_size, out_size), dtype=np.float32)
    for i, img in enumerate(images):
        pil = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
        out[i] = np.asarray(pil.resize((out_size, out_size), Image.BILINEAR))
    return out


def center_crop(images: np.ndarray, crop: int) -> np.ndarray:
    """Center-crop an (N, H, W) stack to (N, crop, crop)."""
    h, w = images.shape[1:]
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} exceeds image size {h}x{w}")
    r0 = (h - crop) // 2
    c0 = (w - crop) // 2
    return images[:, r0:r0 + crop, c0:c0 + crop]


def prepare_mnist(images: ImageSet, size: int = 16) -> ImageSet:
    """Default MNIST preparation: center-crop to 24, resize to the working size."""
    cropped = center_crop(images.images, 24)
    if size != 24:
        cropped = resize_images(cropped, size)
    return ImageSet(cropped, split=images.split)


def save_pairs(dataset: PairDataset, path) -> None:
    """Write a PairDataset in the GAEPAIR1 format."""
    n, p = dataset.x.shape
    with open(path, "wb") as fh:
        fh.write(PAIR_MAGIC)
        fh.write(struct.pack("<QQ", n, p))
        fh.write(np.ascontiguousarray(dataset.x, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.y, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.angle_label, dtype="<i2").tobytes())


def load_pairs(path) -> PairDataset:
    """Read a GAEPAIR1 file; the dataset is assumed contrast-normalized."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "pair-file magic")
        if magic != PAIR_MAGIC:
            raise FormatError(f"bad pair-file magic {magic!r} in {path}")
        n, p = struct.unpack("<QQ", _read_exact(fh, 16, "pair-file header"))
        if n == 0 or p == 0 or n * p > 2**33:
            raise FormatError(f"implausible pair-file dimensions ({n}, {p})")
        x = np.frombuffer(_read_exact(fh, 4 * n * p, "x payload"), dtype="<f4")
        y = np.frombuffer(_read_exact(fh, 4 * n * p, "y payload"), dtype="<f4")
        labels = np.frombuffer(_read_exact(fh, 2 * n, "labels"), dtype="<i2")
    dataset = PairDataset(x.reshape(n, p).copy(), y.reshape(n, p).copy(),
                          labels.astype(np.int16).copy())
    row_means = np.abs(dataset.x.mean(axis=1))
    dataset.normalized = bool(np.all(row_means < 1e-4))
    return dataset

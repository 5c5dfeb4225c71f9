"""Image/mask I/O, resizing, dataset splits and a synthetic polyp generator."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_SIZE = (288, 384)


class NetpbmError(ValueError):
    """Base class for NetPBM decoding failures."""


class MalformedHeaderError(NetpbmError):
    pass


class TruncatedPayloadError(NetpbmError):
    pass


class UnsupportedFormatError(NetpbmError):
    pass


class DataError(ValueError):
    """Dataset content or layout is invalid."""


# -- NetPBM ---------------------------------------------------------------------

_CHANNELS = {b"P2": 1, b"P3": 3, b"P5": 1, b"P6": 3}


def _header_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` integer header fields after the magic; return them and the payload offset."""
    pos = 2
    values: list[int] = []
    n = len(buf)
    while len(values) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"expected an integer header field at byte {start}")
        values.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from a binary raster
    if pos >= n or not buf[pos : pos + 1].isspace():
        if len(values) == count and pos >= n:
            return values, pos
        raise MalformedHeaderError("header must end with a single whitespace byte")
    return values, pos + 1


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode P2/P3/P5/P6 bytes to a float64 array ``(C, H, W)`` scaled to [0, 1]."""
    magic = buf[:2]
    if magic not in _CHANNELS:
        raise UnsupportedFormatError(f"unsupported NetPBM magic {magic!r}; expected P2, P3, P5 or P6")
    channels = _CHANNELS[magic]
    (width, height, maxval), offset = _header_tokens(buf, 3)
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"invalid extents {width}x{height}")
    if not 0 < maxval <= 65535:
        raise MalformedHeaderError(f"maxval {maxval} outside 1..65535")
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        payload = buf[offset : offset + need]
        if len(payload) < need:
            raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {need}")
        raw = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    else:
        text = re.sub(rb"#[^\n\r]*", b" ", buf[offset:])
        fields = text.split()
        if len(fields) < count:
            raise TruncatedPayloadError(f"payload has {len(fields)} samples, expected {count}")
        try:
            raw = np.array([int(v) for v in fields[:count]], dtype=np.float64)
        except ValueError as exc:
            raise MalformedHeaderError(f"non-integer sample in ASCII payload: {exc}") from None
    if raw.max(initial=0) > maxval:
        raise MalformedHeaderError("sample exceeds maxval")
    return (raw / maxval).reshape(height, width, channels).transpose(2, 0, 1)


def encode_netpbm(image: np.ndarray, maxval: int = 255) -> bytes:
    """Encode ``(C, H, W)`` or ``(H, W)`` values in [0, 1] as binary P5 (C=1) or P6 (C=3)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got shape {arr.shape}")
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    c, h, w = arr.shape
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    magic = b"P5" if c == 1 else b"P6"
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + q.transpose(1, 2, 0).astype(dtype).tobytes()


def load_netpbm(path: str | os.PathLike) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def save_netpbm(image, path: str | os.PathLike, maxval: int = 255) -> None:
    data = image.data if hasattr(image, "data") and not isinstance(image, np.ndarray) else image
    Path(path).write_bytes(encode_netpbm(np.asarray(data), maxval))


# -- resizing ------------------------------------------------------------------


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, align_corners=False
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize the last two axes of ``image``."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    arr = np.asarray(image)
    h, w = arr.shape[-2:]
    if mode == "nearest":
        rows = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
        cols = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
        return arr[..., rows[:, None], cols[None, :]]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    arr = arr.astype(np.float64)
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    top = arr[..., r0, :] * (1 - fr)[:, None] + arr[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def binarize_mask(mask_img, threshold: float = 0.5) -> np.ndarray:
    arr = np.asarray(mask_img.data if hasattr(mask_img, "node") else mask_img)
    return (arr >= threshold).astype(np.float64)


# -- samples and splits -----------------------------------------------------


@dataclass
class SamplePair:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}
    id: str
    source: str = "synthetic"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise DataError(f"{self.id}: mask shape {self.mask.shape} does not match image {self.image.shape}")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise DataError(f"{self.id}: mask must be binary")


def stack_samples(samples: list[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


@dataclass
class SplitPlan:
    assignment: dict[str, str]  # id -> train|val|test|fold-k
    seed: int
    kind: str

    def members(self, role: str) -> list[str]:
        return [i for i, r in self.assignment.items() if r == role]

    @property
    def roles(self) -> list[str]:
        return sorted(set(self.assignment.values()))

    def folds(self) -> list[list[str]]:
        k = sum(1 for r in self.roles if r.startswith("fold-"))
        return [self.members(f"fold-{i}") for i in range(k)]

    def to_text(self) -> str:
        return "".join(f"{i}\t{r}\n" for i, r in self.assignment.items())

    @classmethod
    def from_text(cls, text: str, seed: int = 0) -> "SplitPlan":
        assignment = {}
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"split line {n}: expected 'id<TAB>role'")
            assignment[parts[0]] = parts[1]
        kind = "kfold" if any(r.startswith("fold-") for r in assignment.values()) else "table1"
        return cls(assignment, seed, kind)


def table1_counts(n: int) -> tuple[int, int, int]:
    """80/10/10 counts; the remainder after flooring val and test goes to train."""
    val = n // 10
    test = n // 10
    return n - val - test, val, test


def make_splits(ids, plan_kind: str = "table1", k: int = 5, seed: int = 0) -> SplitPlan:
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise DataError("sample ids must be unique")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    if plan_kind == "table1":
        n_train, n_val, _ = table1_counts(len(ids))
        roles = ["train"] * n_train + ["val"] * n_val
        roles += ["test"] * (len(ids) - len(roles))
    elif plan_kind == "kfold":
        if k < 2 or k > len(ids):
            raise DataError(f"k={k} folds incompatible with {len(ids)} samples")
        roles = [f"fold-{i % k}" for i in range(len(ids))]
    else:
        raise DataError(f"unknown plan kind {plan_kind!r}")
    assignment = dict(sorted(zip(order, roles), key=lambda kv: ids.index(kv[0])))
    return SplitPlan(assignment, seed, plan_kind)


# -- on-disk datasets ----------------------------------------------------------


def load_dataset(root: str | os.PathLike, size: tuple[int, int] | None = None, source: str | None = None) -> list[SamplePair]:
    """Read ``images/<id>.ppm`` + ``masks/<id>.pgm`` pairs, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    samples = []
    for img_path in sorted(img_dir.glob("*.ppm")):
        sid = img_path.stem
        mask_path = mask_dir / f"{sid}.pgm"
        if not mask_path.exists():
            raise DataError(f"missing mask for {sid}: {mask_path}")
        image = load_netpbm(img_path)
        if image.shape[0] == 1:
            image = np.repeat(image, 3, axis=0)
        mask = load_netpbm(mask_path)[:1]
        if size is not None and image.shape[1:] != tuple(size):
            image = resize(image, *size, mode="bilinear")
            mask = resize(mask, *size, mode="nearest")
        samples.append(SamplePair(image, binarize_mask(mask), sid, source or root.name))
    if not samples:
        raise DataError(f"no images found under {img_dir}")
    return samples


def save_dataset(samples: list[SamplePair], root: str | os.PathLike) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_netpbm(s.image, root / "images" / f"{s.id}.ppm")
        save_netpbm(s.mask, root / "masks" / f"{s.id}.pgm")


# -- synthetic polyps ----------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells))
    return resize(coarse, h, w, mode="bilinear")


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return img
    k = 2 * radius + 1
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    c = np.cumsum(np.cumsum(pad, axis=1), axis=2)
    c = np.pad(c, ((0, 0), (1, 0), (1, 0)))
    s = c[:, k:, k:] - c[:, :-k, k:] - c[:, k:, :-k] + c[:, :-k, :-k]
    return s / (k * k)


def _blob_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry = rng.uniform(0.08, 0.22) * h
    rx = ry * rng.uniform(0.7, 1.4) * w / h
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
    angle = np.arctan2(v, u)
    # low-order Fourier wobble keeps the outline smooth
    wobble = 1.0
    for order in (2, 3, 5):
        wobble = wobble + rng.uniform(-0.08, 0.08) * np.cos(order * angle + rng.uniform(0, 2 * np.pi))
    return (np.hypot(u, v) <= wobble).astype(np.float64)


def synth_polyp_dataset(
    n: int, h: int = 64, w: int = 96, seed: int = 0, difficulty: str = "easy", prefix: str = "syn"
) -> list[SamplePair]:
    """Deterministic synthetic colonoscopy-like images with 1-3 blob polyps.

    ``easy`` images have flat backgrounds and high foreground contrast;
    ``hard`` images use low contrast, textured backgrounds and blurred
    boundaries. Each mask covers between 2% and 40% of the image.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if h < 8 or w < 8 or h % 4 or w % 4:
        raise ValueError(f"extents {h}x{w} must be at least 8 and divisible by 4")
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n):
        while True:
            mask = np.zeros((h, w))
            for _ in range(rng.integers(1, 4)):
                mask = np.maximum(mask, _blob_mask(rng, h, w))
            frac = mask.mean()
            if 0.02 <= frac <= 0.4:
                break
        base = np.array([0.55, 0.25, 0.2]) + rng.uniform(-0.05, 0.05, 3)
        if difficulty == "easy":
            fg = np.clip(base + np.array([0.4, 0.45, 0.35]), 0, 1)
            bg_tex = 0.03 * _smooth_noise(rng, h, w, 4)[None]
            blur = 0
        else:
            fg = np.clip(base + np.array([0.12, 0.1, 0.06]), 0, 1)
            bg_tex = 0.18 * (_smooth_noise(rng, h, w, 8)[None] - 0.5) + 0.06 * (_smooth_noise(rng, h, w, 24)[None] - 0.5)
            blur = 2
        soft = _box_blur(mask[None], blur)
        image = base[:, None, None] * (1 - soft) + fg[:, None, None] * soft + bg_tex
        image += rng.normal(0.0, 0.01 if difficulty == "easy" else 0.03, size=image.shape)
        samples.append(SamplePair(np.clip(image, 0.0, 1.0), mask[None], f"{prefix}{idx:04d}", f"synthetic-{difficulty}"))
    return samples

"""Image and label codecs, dataset loaders, the synthetic dataset generator and mIoU.

Images live in memory as float32 arrays of shape (3, H, W) with values in
[0, 1]; label maps are uint8 arrays of shape (H, W) holding raw class ids,
with 255 marking pixels to ignore.

Codecs: binary PPM (P6) for images and PGM (P5) for labels are always
available. PNG (8-bit grey, RGB or RGBA, non-interlaced) is read and written
through the standard library's zlib.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ddpnet.errors import CodecError, DataError

IGNORE_LABEL = 255

# Cityscapes train-id colours; index = class id. Ignore renders black.
PALETTE = np.array(
    [
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
        (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
        (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
        (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
    ],
    dtype=np.uint8,
)

IMAGE_SUFFIXES = (".ppm", ".png")
LABEL_SUFFIXES = (".pgm", ".png")


# ---------------------------------------------------------------- PNM codec


def _pnm_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse a binary PNM header; returns (width, height, maxval, payload offset)."""
    if buf[:2] != magic:
        raise CodecError(f"expected magic {magic.decode()}, found {buf[:2]!r}", 0)
    pos = 2
    fields = []
    separated = False
    while len(fields) < 3:
        if pos >= len(buf):
            raise CodecError("truncated header", pos)
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
            separated = True
            continue
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            separated = True
            continue
        if not separated:
            raise CodecError("missing whitespace between header fields", pos)
        separated = False
        tok_start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise CodecError(f"expected a decimal number, found {buf[pos:pos + 1]!r}", pos)
        fields.append((int(buf[tok_start:pos]), tok_start))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise CodecError("header must end with a single whitespace byte", pos)
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width < 1:
        raise CodecError(f"width must be positive, got {width}", wpos)
    if height < 1:
        raise CodecError(f"height must be positive, got {height}", hpos)
    if not 0 < maxval < 65536:
        raise CodecError(f"maxval must lie in [1, 65535], got {maxval}", mpos)
    return width, height, maxval, pos + 1


def decode_pnm(buf: bytes, channels: int) -> np.ndarray:
    """Decode P6 (channels=3) or P5 (channels=1) bytes to an (H, W, channels) integer array."""
    magic = b"P6" if channels == 3 else b"P5"
    width, height, maxval, offset = _pnm_header(buf, magic)
    depth = 1 if maxval < 256 else 2
    need = width * height * channels * depth
    have = len(buf) - offset
    if have < need:
        raise CodecError(f"payload truncated: need {need} bytes, found {have}", len(buf))
    dtype = np.uint8 if depth == 1 else np.dtype(">u2")
    pix = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=offset)
    if int(pix.max(initial=0)) > maxval:
        bad = int(np.argmax(pix > maxval))
        raise CodecError(f"sample value exceeds maxval {maxval}", offset + bad * depth)
    pix = pix.reshape(height, width, channels)
    if maxval != 255:
        pix = np.rint(pix.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return pix.astype(np.uint8, copy=False)


def encode_pnm(pix: np.ndarray) -> bytes:
    """(H, W, 3) uint8 -> P6 bytes, (H, W) or (H, W, 1) uint8 -> P5 bytes."""
    pix = np.asarray(pix)
    if pix.dtype != np.uint8:
        raise CodecError(f"PNM encoder needs uint8 samples, got {pix.dtype}", 0)
    if pix.ndim == 3 and pix.shape[2] == 1:
        pix = pix[:, :, 0]
    if pix.ndim == 2:
        magic = b"P5"
    elif pix.ndim == 3 and pix.shape[2] == 3:
        magic = b"P6"
    else:
        raise CodecError(f"cannot encode array of shape {pix.shape} as PNM", 0)
    h, w = pix.shape[:2]
    if h < 1 or w < 1:
        raise CodecError(f"image extents must be positive, got {h}x{w}", 0)
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pix).tobytes()


# ---------------------------------------------------------------- PNG codec

_PNG_SIG = b"\x89PNG\r\n\x1a\n"
_PNG_CHANNELS = {0: 1, 2: 3, 6: 4}


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, height: int, stride: int, bpp: int, offset: int) -> np.ndarray:
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(height):
        if pos + 1 + stride > len(raw):
            raise CodecError("image data shorter than the declared extents", offset)
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += 1 + stride
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    cur[x] = (cur[x] + left) & 0xFF
                elif ftype == 3:
                    cur[x] = (cur[x] + ((left + prev[x]) >> 1)) & 0xFF
                else:
                    upleft = prev[x - bpp] if x >= bpp else 0
                    cur[x] = (cur[x] + _paeth(left, prev[x], upleft)) & 0xFF
        else:
            raise CodecError(f"unknown filter type {ftype} on row {y}", offset)
        out[y] = cur
        prev = cur
    return out


def decode_png(buf: bytes) -> np.ndarray:
    """Decode an 8-bit non-interlaced PNG to (H, W, channels) uint8."""
    if buf[:8] != _PNG_SIG:
        raise CodecError("not a PNG signature", 0)
    pos = 8
    header = None
    idat = []
    idat_offset = 0
    while True:
        if pos + 8 > len(buf):
            raise CodecError("truncated chunk header", pos)
        length, kind = struct.unpack(">I4s", buf[pos:pos + 8])
        body = buf[pos + 8:pos + 8 + length]
        if len(body) < length or pos + 12 + length > len(buf):
            raise CodecError(f"truncated {kind!r} chunk", pos)
        (crc,) = struct.unpack(">I", buf[pos + 8 + length:pos + 12 + length])
        if zlib.crc32(kind + body) != crc:
            raise CodecError(f"CRC mismatch in {kind!r} chunk", pos)
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif kind == b"IDAT":
            idat_offset = idat_offset or pos
            idat.append(body)
        elif kind == b"IEND":
            break
        pos += 12 + length
    if header is None:
        raise CodecError("missing IHDR chunk", 8)
    width, height, depth, ctype, _, _, interlace = header
    if depth != 8 or ctype not in _PNG_CHANNELS or interlace:
        raise CodecError(f"unsupported PNG (bit depth {depth}, colour type {ctype}, interlace {interlace})", 8)
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise CodecError(f"corrupt image data: {exc}", idat_offset) from None
    ch = _PNG_CHANNELS[ctype]
    rows = _unfilter(raw, height, width * ch, ch, idat_offset)
    return rows.reshape(height, width, ch)


def encode_png(pix: np.ndarray) -> bytes:
    pix = np.asarray(pix)
    if pix.dtype != np.uint8:
        raise CodecError(f"PNG encoder needs uint8 samples, got {pix.dtype}", 0)
    if pix.ndim == 2:
        pix = pix[:, :, None]
    h, w, ch = pix.shape
    ctype = {1: 0, 3: 2, 4: 6}.get(ch)
    if ctype is None or h < 1 or w < 1:
        raise CodecError(f"cannot encode array of shape {pix.shape} as PNG", 0)

    def chunk(kind: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", zlib.crc32(kind + body))

    rows = np.concatenate([np.zeros((h, 1), np.uint8), pix.reshape(h, w * ch)], axis=1)
    return (_PNG_SIG + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(rows.tobytes(), 6)) + chunk(b"IEND", b""))


# ------------------------------------------------------------- file level


def _read_pixels(path, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    try:
        if buf[:8] == _PNG_SIG:
            pix = decode_png(buf)
            if channels == 3:
                pix = np.repeat(pix, 3, axis=2) if pix.shape[2] == 1 else pix[:, :, :3]
            elif pix.shape[2] != 1:
                raise CodecError(f"label image must have one channel, found {pix.shape[2]}", 0)
            return pix
        return decode_pnm(buf, channels)
    except CodecError as exc:
        raise CodecError(f"{path}: {exc.args[0]}", exc.offset) from None


def _format_for(path, fmt: str | None) -> str:
    fmt = fmt or Path(path).suffix.lower().lstrip(".")
    if fmt in ("ppm", "pgm", "pnm"):
        return "pnm"
    if fmt == "png":
        return "png"
    raise DataError(f"unsupported image format {fmt!r} for {path}")


def read_image(path) -> np.ndarray:
    """8-bit RGB file -> float32 (3, H, W) in [0, 1]."""
    pix = _read_pixels(path, 3)
    return (pix.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_image(path, image: np.ndarray, fmt: str | None = None) -> None:
    """float (3, H, W) in [0, 1] -> 8-bit file; values are clipped then rounded."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"image must have shape (3, H, W), got {image.shape}")
    pix = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    write_pixels(path, pix, fmt)


def write_pixels(path, pix: np.ndarray, fmt: str | None = None) -> None:
    data = encode_png(pix) if _format_for(path, fmt) == "png" else encode_pnm(pix)
    Path(path).write_bytes(data)


def read_label(path) -> np.ndarray:
    return np.ascontiguousarray(_read_pixels(path, 1)[:, :, 0])


def write_label(path, label: np.ndarray, fmt: str | None = None) -> None:
    label = np.asarray(label)
    if label.ndim != 2:
        raise DataError(f"label map must be 2-D, got shape {label.shape}")
    if label.min(initial=0) < 0 or label.max(initial=0) > 255:
        raise DataError("label ids must fit in 8 bits")
    write_pixels(path, label.astype(np.uint8), fmt)


def colorize(label: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    """Class-id map -> (H, W, 3) uint8 using ``palette``; ids past the palette and ignore render black."""
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[: len(palette)] = palette
    lut[IGNORE_LABEL] = 0
    return lut[np.asarray(label, dtype=np.uint8)]


# ------------------------------------------------------------------ samples


@dataclass
class Sample:
    image: np.ndarray  # float32 (3, H, W) in [0, 1]
    label: np.ndarray  # uint8 (H, W)
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.name or 'sample'}: image must have shape (3, H, W), got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise DataError(f"{self.name or 'sample'}: label extents {self.label.shape} differ from "
                            f"image extents {self.image.shape[1:]}")


def dataset_mean(samples: list[Sample]) -> np.ndarray:
    """Per-channel pixel mean over ``samples``; float32 vector of length 3."""
    if not samples:
        return np.zeros(3, dtype=np.float32)
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for s in samples:
        total += s.image.sum(axis=(1, 2), dtype=np.float64)
        count += s.image.shape[1] * s.image.shape[2]
    return (total / count).astype(np.float32)


def check_labels(samples: list[Sample], num_classes: int) -> None:
    for s in samples:
        bad = (s.label >= num_classes) & (s.label != IGNORE_LABEL)
        if bad.any():
            raise DataError(f"{s.name}: label id {int(s.label[bad][0])} outside [0, {num_classes}) "
                            f"and not the ignore label")


# ------------------------------------------------------------------ loaders

MANIFEST_NAME = "manifest.tsv"


def _load_pair(image_path: Path, label_path: Path, name: str) -> Sample:
    for p in (image_path, label_path):
        if not p.is_file():
            raise DataError(f"{name}: missing file {p}")
    return Sample(read_image(image_path), read_label(label_path), name)


def load_manifest(path) -> list[Sample]:
    """Tab-separated ``image<TAB>label`` rows; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    base = path.parent
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 tab-separated columns, found {len(cols)}")
        img, lab = (base / c.strip() for c in cols)
        out.append(_load_pair(img, lab, f"{path.name}:{lineno}"))
    return out


def _pair_by_stem(images: list[Path], labels: list[Path], image_tag: str, label_tag: str,
                  img_dir: Path, lab_dir: Path) -> list[tuple[Path, Path]]:
    # key = subdirectory relative to the split root plus the stem without its tag
    def key(p: Path, root: Path, tag: str) -> tuple[str, str]:
        stem = p.stem
        stem = stem[: -len(tag)] if tag and stem.endswith(tag) else stem
        return str(p.parent.relative_to(root)), stem

    lab_index = {}
    for p in labels:
        lab_index[key(p, lab_dir, label_tag)] = p
    pairs = []
    for img in images:
        k = key(img, img_dir, image_tag)
        if k not in lab_index:
            raise DataError(f"no label file for image {img}")
        pairs.append((img, lab_index.pop(k)))
    if lab_index:
        raise DataError(f"label file without an image: {sorted(lab_index.values())[0]}")
    return pairs


def _files(root: Path, suffixes) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in suffixes)


def load_dataset(root, layout: str = "manifest", split: str = "train",
                 image_tag: str | None = None, label_tag: str | None = None) -> list[Sample]:
    """Load image/label pairs.

    ``manifest``: ``root`` is a manifest file or a directory holding ``manifest.tsv``.
    ``cityscapes``: ``root/leftImg8bit/<split>/<city>/*_leftImg8bit.*`` paired with
    ``root/gtFine/<split>/<city>/*_gtFine_labelTrainIds.*``.
    ``camvid``: ``root/<split>/*`` paired with ``root/<split>annot/*`` by file stem.
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    if layout == "manifest":
        return load_manifest(root)
    if layout == "cityscapes":
        image_tag = "_leftImg8bit" if image_tag is None else image_tag
        label_tag = "_gtFine_labelTrainIds" if label_tag is None else label_tag
        img_dir, lab_dir = root / "leftImg8bit" / split, root / "gtFine" / split
        labels = [p for p in _files(lab_dir, LABEL_SUFFIXES) if p.stem.endswith(label_tag)]
    elif layout == "camvid":
        image_tag = image_tag or ""
        label_tag = label_tag or ""
        img_dir, lab_dir = root / split, root / f"{split}annot"
        labels = _files(lab_dir, LABEL_SUFFIXES)
    else:
        raise DataError(f"unknown dataset layout {layout!r} (expected manifest, cityscapes or camvid)")
    for d in (img_dir, lab_dir):
        if not d.is_dir():
            raise DataError(f"expected directory {d}")
    images = [p for p in _files(img_dir, IMAGE_SUFFIXES) if p.stem.endswith(image_tag)]
    return [_load_pair(i, l, str(i.relative_to(root))) for i, l in _pair_by_stem(images, labels, image_tag, label_tag, img_dir, lab_dir)]


# ---------------------------------------------------------------- synthetic


def _render(rng: np.random.Generator, h: int, w: int, classes: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # low-frequency stripes plus noise so the background is not flat
    fy, fx = rng.uniform(0.05, 0.3, size=2)
    tex = 0.5 + 0.15 * np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
    base = rng.uniform(0.2, 0.5, size=3)
    image = np.clip(base[:, None, None] * tex[None] * 2 + rng.normal(0, 0.03, (3, h, w)), 0, 1)
    label = np.zeros((h, w), dtype=np.uint8)
    colors = _class_colors(classes)
    for _ in range(int(rng.integers(2, 6))):
        c = int(rng.integers(1, classes))
        ch, cw = rng.integers(h // 6, h // 2 + 1), rng.integers(w // 6, w // 2 + 1)
        y0, x0 = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
        if rng.random() < 0.5:
            mask = (yy >= y0) & (yy < y0 + ch) & (xx >= x0) & (xx < x0 + cw)
        else:
            cy, cx = y0 + ch / 2, x0 + cw / 2
            mask = ((yy - cy) / (ch / 2)) ** 2 + ((xx - cx) / (cw / 2)) ** 2 <= 1.0
        label[mask] = c
        shade = np.clip(colors[c][:, None, None] + rng.normal(0, 0.03, (3, h, w)), 0, 1)
        image = np.where(mask[None], shade, image)
    return image.astype(np.float32), label


def _class_colors(classes: int) -> np.ndarray:
    """Well-separated foreground colours; row 0 (background) is unused."""
    hues = np.linspace(0, 1, max(classes - 1, 1), endpoint=False)
    rgb = np.stack([0.5 + 0.45 * np.cos(2 * np.pi * (hues + k / 3)) for k in range(3)], axis=1)
    return np.concatenate([np.zeros((1, 3)), rgb])


def gen_synthetic(root, n: int, size: tuple[int, int] = (64, 64), classes: int = 3, seed: int = 0,
                  fmt: str = "ppm") -> Path:
    """Write ``n`` images of rectangles and ellipses on a textured background, plus a manifest.

    Class 0 is the background; every image holds at least two classes.
    Returns the manifest path.
    """
    h, w = size
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise DataError(f"synthetic extents must be positive multiples of 32, got {h}x{w}")
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    if n < 0:
        raise DataError(f"sample count must be non-negative, got {n}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    img_ext, lab_ext = (".png", ".png") if fmt == "png" else (".ppm", ".pgm")
    rows = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, label = _render(rng, h, w, classes)
        while len(np.unique(label)) < 2:
            image, label = _render(rng, h, w, classes)
        img_rel, lab_rel = f"images/{i:05d}{img_ext}", f"labels/{i:05d}{lab_ext}"
        write_image(root / img_rel, image)
        write_label(root / lab_rel, label)
        rows.append(f"{img_rel}\t{lab_rel}\n")
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text("".join(rows), encoding="utf-8")
    os.replace(tmp, root / MANIFEST_NAME)
    return root / MANIFEST_NAME


# ------------------------------------------------------------------ metrics


class ConfusionMatrix:
    """Dataset-level counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        if num_classes < 1:
            raise DataError(f"num_classes must be positive, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise DataError(f"truth and prediction sizes differ: {truth.size} vs {pred.size}")
        keep = truth != self.ignore_label
        truth, pred = truth[keep].astype(np.int64), pred[keep].astype(np.int64)
        c = self.num_classes
        for arr, what in ((truth, "label"), (pred, "prediction")):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise DataError(f"{what} id outside [0, {c})")
        self.counts += np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)
        return self

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where a class never occurs in truth or prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    def miou(self) -> float:
        """Mean IoU over classes with a defined IoU."""
        iou = self.iou()
        defined = iou[~np.isnan(iou)]
        if defined.size == 0:
            raise DataError("mIoU is undefined: no pixels accumulated")
        return float(defined.mean())

    def pixel_accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts) / total) if total else float("nan")

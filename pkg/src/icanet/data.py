"""RGB-thermal pair ingestion, augmentation and synthetic fixtures.

Images are handled as float64 arrays ``(H, W, C)`` in [0, 1] until they are
packed into tensors of shape ``(1, C, H, W)``.  PGM/PPM files are decoded by
the small reader below; PNG and other formats go through Pillow.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .tensor import Tensor

NOISE_KINDS = ("gaussian", "salt_pepper", "uniform")
MODALITIES = ("rgb", "thermal")
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp")


class LoadError(IOError):
    """A dataset file is missing or cannot be decoded; carries the path."""

    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

_PNM_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}


def read_pnm(path) -> np.ndarray:
    """Decode ASCII or binary PGM/PPM into ``(H, W, C)`` floats in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in _PNM_CHANNELS:
        raise LoadError(path, f"unsupported PNM magic {magic!r}")
    channels = _PNM_CHANNELS[magic]
    # header: three integers after the magic, '#' comments allowed
    tokens, pos = [], 2
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\d+)")
    for _ in range(3):
        m = token_re.match(data, pos)
        if not m:
            raise LoadError(path, "malformed PNM header")
        tokens.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = tokens
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise LoadError(path, f"bad PNM header values {tokens}")
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        values = np.array(data[pos:].split(), dtype=np.int64)
    else:
        pos += 1  # single whitespace byte ends the header
        dtype = ">u2" if maxval > 255 else "u1"
        need = count * np.dtype(dtype).itemsize
        if len(data) - pos < need:
            raise LoadError(path, "truncated PNM raster")
        values = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if values.size < count:
        raise LoadError(path, "truncated PNM raster")
    return values[:count].reshape(h, w, channels).astype(np.float64) / maxval


def write_pnm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary PGM (2-D or 1 channel) or PPM (3 channels)."""
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    magic = b"P5" if arr.ndim == 2 else b"P6"
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + arr.tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    """round(255 * x) with half-up rounding, after clamping to [0, 1]."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise LoadError(path, "file not found")
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode.startswith("I;16"):
                return np.asarray(im, dtype=np.float64)[:, :, None] / 65535.0
            if im.mode in ("I", "F"):
                arr = np.asarray(im, dtype=np.float64)
                return arr[:, :, None] / max(1.0, float(arr.max()))
            if im.mode in ("1", "L", "LA"):
                return np.asarray(im.convert("L"), dtype=np.float64)[:, :, None] / 255.0
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise LoadError(path, f"cannot decode image ({exc})") from exc


def write_png(path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear (align-corners false) resize of ``(H, W, C)``."""
    if image.shape[:2] == (h, w):
        return image
    a_h = T.bilinear_matrix(image.shape[0], h)
    a_w = T.bilinear_matrix(image.shape[1], w)
    return np.einsum("ih,hwc,jw->ijc", a_h, image, a_w)


# ---------------------------------------------------------------------------
# pairs and manifests
# ---------------------------------------------------------------------------


@dataclass
class SamplePair:
    """Aligned RGB, thermal and GT tensors of shape (1, C, H, W)."""

    rgb: Tensor
    thermal: Tensor
    gt: Tensor
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {self.rgb.shape[2:], self.thermal.shape[2:], self.gt.shape[2:]}
        if len(shapes) != 1:
            raise T.ShapeError(f"pair {self.id}: extents differ {shapes}")
        if self.rgb.shape[1] != 3 or self.thermal.shape[1] != 3 or self.gt.shape[1] != 1:
            raise T.ShapeError(f"pair {self.id}: expected 3/3/1 channels")

    def copy(self) -> "SamplePair":
        return SamplePair(
            Tensor(self.rgb.data.copy()),
            Tensor(self.thermal.data.copy()),
            Tensor(self.gt.data.copy()),
            self.id,
            dict(self.meta),
        )


@dataclass
class DatasetEntry:
    rgb: Path
    thermal: Path
    gt: Path
    id: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)


def _hwc_to_tensor(image: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(image.transpose(2, 0, 1))[None])


def load_manifest(path, split: str = "train") -> DatasetManifest:
    """Read a tab-separated manifest, or discover ``RGB/``, ``T/``, ``GT/``.

    A manifest line holds rgb, thermal and GT paths relative to the
    manifest's directory, optionally followed by an id (default: the RGB
    file stem).  Blank lines and ``#`` comments are ignored.  A directory
    argument uses its ``manifest.tsv`` when present.
    """
    path = Path(path)
    if path.is_dir():
        if (path / "manifest.tsv").is_file():
            return load_manifest(path / "manifest.tsv", split)
        return _discover(path, split)
    if not path.is_file():
        raise LoadError(path, "manifest not found")
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns")
        rgb, th, gt = (root / c for c in cols[:3])
        entries.append(DatasetEntry(rgb, th, gt, cols[3] if len(cols) == 4 else Path(cols[0]).stem))
    return _validated(DatasetManifest(root, entries, split))


def _discover(root: Path, split: str) -> DatasetManifest:
    dirs = [root / d for d in ("RGB", "T", "GT")]
    for d in dirs:
        if not d.is_dir():
            raise LoadError(d, "directory not found (need RGB/, T/, GT/ or manifest.tsv)")

    def by_stem(d):
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

    rgb, th, gt = (by_stem(d) for d in dirs)
    stems = sorted(set(rgb) & set(th) & set(gt))
    if not stems:
        raise LoadError(root, "no complete RGB/T/GT triples found")
    entries = [DatasetEntry(rgb[s], th[s], gt[s], s) for s in stems]
    return _validated(DatasetManifest(root, entries, split))


def _validated(m: DatasetManifest) -> DatasetManifest:
    if not m.entries:
        raise ValueError(f"manifest under {m.root} is empty")
    seen = set()
    for e in m.entries:
        if e.id in seen:
            raise ValueError(f"duplicate sample id {e.id!r}")
        seen.add(e.id)
        for p in (e.rgb, e.thermal, e.gt):
            if not p.is_file():
                raise LoadError(p, f"listed for sample {e.id!r} but missing")
    return m


def write_manifest(path, entries: Sequence[DatasetEntry]) -> None:
    root = Path(path).parent
    lines = []
    for e in entries:
        rel = [Path(p).relative_to(root).as_posix() for p in (e.rgb, e.thermal, e.gt)]
        lines.append("\t".join(rel + [e.id]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _to_rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image, 3, axis=2) if image.shape[2] == 1 else image[:, :, :3]


def load_pair(entry: DatasetEntry, target_size: Optional[tuple] = None) -> SamplePair:
    """Decode, resize to ``target_size`` (H, W), and binarize GT at 0.5."""
    rgb = _to_rgb(read_image(entry.rgb))
    th = _to_rgb(read_image(entry.thermal))
    gt = read_image(entry.gt).mean(axis=2, keepdims=True)
    if not (rgb.shape[:2] == th.shape[:2] == gt.shape[:2]):
        raise LoadError(
            entry.rgb,
            f"sample {entry.id!r}: extents differ (rgb {rgb.shape[:2]}, thermal {th.shape[:2]}, gt {gt.shape[:2]})",
        )
    if target_size is not None:
        h, w = target_size
        rgb, th, gt = resize(rgb, h, w), resize(th, h, w), resize(gt, h, w)
    gt = (gt >= 0.5).astype(np.float64)
    return SamplePair(
        _hwc_to_tensor(np.clip(rgb, 0, 1)),
        _hwc_to_tensor(np.clip(th, 0, 1)),
        _hwc_to_tensor(gt),
        entry.id,
    )


def collate(pairs: Sequence[SamplePair]) -> tuple:
    """Stack pairs into batched (rgb, thermal, gt) tensors."""
    cat = lambda key: Tensor(np.concatenate([getattr(p, key).data for p in pairs]))  # noqa: E731
    return cat("rgb"), cat("thermal"), cat("gt")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    p_zero: float = 0.05
    p_noise: float = 0.05
    gaussian_sigma: float = 0.1
    salt_pepper_fraction: float = 0.05
    uniform_a: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("p_zero", "p_noise", "salt_pepper_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.p_zero + self.p_noise > 1.0:
            raise ValueError("p_zero + p_noise must not exceed 1")
        if self.gaussian_sigma < 0 or self.uniform_a < 0:
            raise ValueError("noise magnitudes must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown augment config keys: {sorted(unknown)}")
        return cls(**d)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of visiting order or worker count."""
    return np.random.default_rng([seed, epoch, index])


def add_noise(image: np.ndarray, kind: str, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian, salt-and-pepper or uniform noise; the result stays in [0, 1]."""
    if kind == "gaussian":
        out = image + rng.normal(0.0, 1.0, image.shape) * cfg.gaussian_sigma
    elif kind == "salt_pepper":
        out = image.copy()
        hit = rng.random(image.shape) < cfg.salt_pepper_fraction
        salt = rng.random(image.shape) < 0.5
        out[hit] = salt[hit].astype(image.dtype)
    elif kind == "uniform":
        out = image + rng.uniform(-cfg.uniform_a, cfg.uniform_a, image.shape)
    else:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment(
    pair: SamplePair,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    zero_modality: Optional[str] = None,
) -> SamplePair:
    """Modality zeroing and noise injection as two independent events.

    Each call consumes the same number of draws whatever happens, and the
    events are recorded in ``meta`` (``zeroed``, ``noise``).  The GT tensor
    is never touched.  ``zero_modality`` fixes which modality a zeroing event
    hits.
    """
    zero_draw, zero_pick, noise_draw, noise_pick, kind_pick = rng.random(5)
    out = pair.copy()
    arrays = {"rgb": out.rgb.data, "thermal": out.thermal.data}
    if noise_draw < cfg.p_noise:
        target = MODALITIES[int(noise_pick * 2)]
        kind = NOISE_KINDS[int(kind_pick * 3)]
        arrays[target] = add_noise(arrays[target], kind, cfg, rng)
        out.meta["noise"] = (target, kind)
    if zero_draw < cfg.p_zero:
        target = zero_modality or MODALITIES[int(zero_pick * 2)]
        if target not in MODALITIES:
            raise ValueError(f"unknown modality {target!r}")
        arrays[target] = np.zeros_like(arrays[target])
        out.meta["zeroed"] = target
    out.rgb, out.thermal = Tensor(arrays["rgb"]), Tensor(arrays["thermal"])
    out.gt = pair.gt
    return out


# ---------------------------------------------------------------------------
# synthetic pairs
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """A single object on a textured background.

    ``center`` is (row, col) in pixels; ``extent`` is the disc radius or the
    rectangle half-sizes (rows, cols).  ``hot`` makes the object brighter than
    the background in thermal, otherwise darker.
    """

    size: tuple = (64, 64)
    shape: str = "disc"
    center: tuple = (32.0, 32.0)
    extent: tuple = (12.0, 12.0)
    color: tuple = (0.9, 0.2, 0.1)
    hot: bool = True
    clutter: float = 0.0
    low_light: bool = False
    id: str = "synth"

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.center = tuple(float(v) for v in self.center)
        self.extent = tuple(float(v) for v in self.extent)
        self.color = tuple(float(v) for v in self.color)
        if self.shape not in ("disc", "rect"):
            raise ValueError(f"shape must be 'disc' or 'rect', got {self.shape!r}")
        if not 0.0 <= self.clutter <= 1.0:
            raise ValueError("clutter must lie in [0, 1]")
        h, w = self.size
        (cy, cx), (ey, ex) = self.center, self.extent
        if self.shape == "disc":
            ey = ex = self.extent[0]
        if min(ey, ex) <= 0 or cy - ey < 0 or cx - ex < 0 or cy + ey > h or cx + ex > w:
            raise ValueError(f"{self.shape} at {self.center} with extent {self.extent} leaves the {h}x{w} frame")

    def mask(self) -> np.ndarray:
        h, w = self.size
        yy, xx = np.mgrid[0:h, 0:w] + 0.5  # pixel centers
        cy, cx = self.center
        if self.shape == "disc":
            r = self.extent[0]
            return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)
        ey, ex = self.extent
        return ((np.abs(yy - cy) <= ey) & (np.abs(xx - cx) <= ex)).astype(np.float64)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def _texture(rng: np.random.Generator, h: int, w: int, channels: int) -> np.ndarray:
    """Smooth random texture in [0, 1]: coarse noise upsampled bilinearly."""
    coarse = rng.random((max(2, h // 8), max(2, w // 8), channels))
    return resize(coarse, h, w)


def synth_pair(spec: SynthSpec, rng: np.random.Generator) -> SamplePair:
    h, w = spec.size
    mask = spec.mask()[:, :, None]
    bg_rgb = np.array([0.55, 0.55, 0.55])
    tex = _texture(rng, h, w, 3)
    rgb = (1 - spec.clutter) * bg_rgb + spec.clutter * tex
    rgb = rgb * (1 - mask) + mask * np.asarray(spec.color)
    th_tex = _texture(rng, h, w, 1)
    th_bg = (1 - spec.clutter) * 0.3 + spec.clutter * th_tex
    th = th_bg * (1 - mask) + mask * (0.9 if spec.hot else 0.05)
    if spec.low_light:
        rgb = rgb * min(1.0, 0.08 / max(rgb.mean(), 1e-12))
    return SamplePair(
        _hwc_to_tensor(np.clip(rgb, 0, 1)),
        _hwc_to_tensor(np.repeat(np.clip(th, 0, 1), 3, axis=2)),
        _hwc_to_tensor(mask),
        spec.id,
    )


def random_spec(rng: np.random.Generator, size: tuple = (64, 64), sample_id: str = "synth") -> SynthSpec:
    """A varied, in-bounds spec: shape, placement, color, clutter, lighting."""
    h, w = size
    shape = "disc" if rng.random() < 0.5 else "rect"
    ey = rng.uniform(0.15, 0.3) * h
    ex = ey if shape == "disc" else rng.uniform(0.15, 0.3) * w
    cy = rng.uniform(ey, h - ey)
    cx = rng.uniform(ex, w - ex)
    return SynthSpec(
        size=(h, w),
        shape=shape,
        center=(cy, cx),
        extent=(ey, ex),
        color=tuple(rng.uniform(0, 1, 3)),
        hot=bool(rng.random() < 0.8),
        clutter=float(rng.uniform(0, 0.5)),
        low_light=bool(rng.random() < 0.2),
        id=sample_id,
    )


def synth_dataset(out_dir, n: int, size: tuple = (64, 64), seed: int = 0, specs: Optional[list] = None) -> Path:
    """Write ``n`` synthetic triples as PNGs under RGB/, T/, GT/ plus a
    ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    for d in ("RGB", "T", "GT"):
        (out / d).mkdir(parents=True, exist_ok=True)
    entries = []
    width = max(4, len(str(max(n, len(specs or [])) - 1)))
    spec_list = specs if specs is not None else [None] * n
    for i, spec in enumerate(spec_list):
        rng = np.random.default_rng([seed, i])
        sid = f"{i:0{width}d}"
        spec = random_spec(rng, size, sid) if spec is None else spec
        pair = synth_pair(spec, rng)
        paths = [out / "RGB" / f"{sid}.png", out / "T" / f"{sid}.png", out / "GT" / f"{sid}.png"]
        write_png(paths[0], pair.rgb.data[0].transpose(1, 2, 0))
        write_png(paths[1], pair.thermal.data[0, :1].transpose(1, 2, 0))
        write_png(paths[2], pair.gt.data[0].transpose(1, 2, 0))
        entries.append(DatasetEntry(*paths, sid))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def load_synth_config(path) -> dict:
    """Synth spec file: JSON with ``n``, ``size``, ``seed`` and optional
    ``pairs`` (list of :class:`SynthSpec` fields)."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    allowed = {"n", "size", "seed", "pairs"}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown synth file keys: {sorted(unknown)}")
    size = tuple(d.get("size", (64, 64)))
    pairs = d.get("pairs")
    specs = None
    if pairs is not None:
        specs = [SynthSpec.from_dict({"size": size, "id": f"{i:04d}", **p}) for i, p in enumerate(pairs)]
    n = int(d.get("n", len(specs) if specs else 4))
    if n < 1 and not specs:
        raise ValueError("synth file needs n >= 1 or a pairs list")
    return {"n": n, "size": size, "seed": int(d.get("seed", 0)), "specs": specs}


def is_unit_range(x: np.ndarray) -> bool:
    return bool(np.isfinite(x).all() and x.min() >= 0.0 and x.max() <= 1.0)


__all__ = [
    "AugmentConfig",
    "DatasetEntry",
    "DatasetManifest",
    "LoadError",
    "NOISE_KINDS",
    "SamplePair",
    "SynthSpec",
    "add_noise",
    "augment",
    "collate",
    "is_unit_range",
    "load_manifest",
    "load_pair",
    "load_synth_config",
    "random_spec",
    "read_image",
    "read_pnm",
    "resize",
    "sample_rng",
    "synth_dataset",
    "synth_pair",
    "to_uint8",
    "write_manifest",
    "write_png",
    "write_pnm",
]

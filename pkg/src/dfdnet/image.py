"""Image I/O, ground-truth label decomposition, synthetic rain and patch sampling.

Images are float arrays in CHW layout on the [0, 1] scale. Nothing here needs
gradients, so plain numpy arrays are used throughout.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from dfdnet.errors import ContractError

LOWPASS_SIGMA = 2.0
LOWPASS_SIZE = 11
MAX_JITTER_DEGREES = 5.0


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit RGB PNG as a float32 3xHxW array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise OSError(f"{path}: expected a PNG file, got {im.format}")
            if im.mode != "RGB":
                raise OSError(f"{path}: expected 3-channel RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        if str(path) in str(exc):
            raise
        raise OSError(f"{path}: {exc}") from exc
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def atomic_write(path: str | os.PathLike, writer) -> None:
    """Call ``writer(tmp_path)`` and move the result into place only on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write a 3xHxW (RGB) or HxW (grayscale) array as an 8-bit PNG, clamping to [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 3:
        if img.shape[0] != 3:
            raise ContractError(f"save_image: expected 3 channels, got shape {img.shape}")
        pil = Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB")
    elif img.ndim == 2:
        pil = Image.fromarray(to_uint8(img), mode="L")
    else:
        raise ContractError(f"save_image: expected CHW or HW array, got shape {img.shape}")
    atomic_write(path, lambda tmp: pil.save(tmp, format="PNG"))


# -- label decomposition ---------------------------------------------------------

def gaussian_taps(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    taps = np.exp(-(x * x) / (2 * sigma * sigma))
    return taps / taps.sum()


def lowpass(img: np.ndarray) -> np.ndarray:
    """Gaussian blur (sigma 2, 11x11, reflect borders), applied per channel."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if h < LOWPASS_SIZE or w < LOWPASS_SIZE:
        raise ContractError(f"lowpass: image {h}x{w} is smaller than the {LOWPASS_SIZE}x{LOWPASS_SIZE} kernel")
    taps = gaussian_taps(LOWPASS_SIZE, LOWPASS_SIGMA)
    r = LOWPASS_SIZE // 2
    x = img.astype(np.float64)
    width = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, width + [(r, r), (0, 0)], mode="reflect")
    rows = sum(taps[a] * xp[..., a:a + h, :] for a in range(LOWPASS_SIZE))
    rp = np.pad(rows, width + [(0, 0), (r, r)], mode="reflect")
    out = sum(taps[b] * rp[..., :, b:b + w] for b in range(LOWPASS_SIZE))
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


def decompose_label(clean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a clean image into (structure, detail) with structure + detail == clean."""
    structure = lowpass(clean)
    detail = clean - structure
    return structure, detail


def detail_to_display(detail: np.ndarray) -> np.ndarray:
    """Fixed mapping of a signed detail map onto [0, 1] for viewing: 0.5 + d/2."""
    return 0.5 + np.asarray(detail) / 2.0


def detail_from_display(shown: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(shown) - 0.5)


# -- synthetic rain --------------------------------------------------------------

@dataclass(frozen=True)
class RainParams:
    """Rain streak generator settings.

    ``angle_degrees`` is measured from vertical (positive leans right going
    down); ``density`` is streaks per 1000 pixels.
    """

    angle_degrees: float = 10.0
    density: float = 2.0
    length_px: float = 24.0
    width_px: float = 1.5
    intensity: float = 0.6
    seed: int = 0
    jitter_degrees: float = 3.0

    def __post_init__(self):
        if not self.density > 0:
            raise ContractError(f"RainParams: density must be > 0, got {self.density}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ContractError(f"RainParams: intensity must be in [0, 1], got {self.intensity}")
        if not 0.0 <= self.jitter_degrees <= MAX_JITTER_DEGREES:
            raise ContractError(f"RainParams: jitter must be within {MAX_JITTER_DEGREES} degrees")
        if self.length_px <= 0 or self.width_px <= 0:
            raise ContractError("RainParams: streak length and width must be positive")


def streak_count(height: int, width: int, density: float) -> int:
    return int(math.floor(height * width / 1000.0 * density))


def rain_mask(height: int, width: int, params: RainParams) -> np.ndarray:
    """Anti-aliased streak coverage in [0, 1], one value per pixel."""
    rng = np.random.default_rng(params.seed)
    mask = np.zeros((height, width), dtype=np.float64)
    half_len = params.length_px / 2.0
    half_w = params.width_px / 2.0
    reach = half_len + half_w + 1.0
    for _ in range(streak_count(height, width, params.density)):
        cy = rng.uniform(-half_len, height + half_len)
        cx = rng.uniform(-half_len, width + half_len)
        theta = math.radians(params.angle_degrees + rng.uniform(-params.jitter_degrees, params.jitter_degrees))
        dx, dy = math.sin(theta), math.cos(theta)
        y0, y1 = max(int(cy - reach), 0), min(int(cy + reach) + 1, height)
        x0, x1 = max(int(cx - reach), 0), min(int(cx + reach) + 1, width)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        ry, rx = yy - cy, xx - cx
        along = np.clip(rx * dx + ry * dy, -half_len, half_len)
        dist = np.hypot(rx - along * dx, ry - along * dy)
        alpha = np.clip(half_w + 0.5 - dist, 0.0, 1.0)
        np.maximum(mask[y0:y1, x0:x1], alpha, out=mask[y0:y1, x0:x1])
    return mask


def synthesize_rain(clean: np.ndarray, params: RainParams) -> np.ndarray:
    """Add bright, consistently oriented streaks; deterministic given ``params.seed``."""
    clean = np.asarray(clean)
    h, w = clean.shape[-2:]
    streaks = params.intensity * rain_mask(h, w, params)
    return np.clip(clean + streaks.astype(clean.dtype), 0.0, 1.0)


# -- toy data ---------------------------------------------------------------------

def toy_clean_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth colour gradient background with a few flat-shaded shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, base = rng.uniform(-0.3, 0.3, size=3)
        img[c] = 0.4 + base * 0.5 + a * xx + b * yy
    for _ in range(rng.integers(2, 5)):
        colour = rng.uniform(0.05, 0.75, size=3)
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        r = rng.uniform(0.08, 0.22) * size
        if rng.random() < 0.5:
            inside = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2 < r * r
        else:
            inside = (np.abs(yy * (size - 1) - cy) < r) & (np.abs(xx * (size - 1) - cx) < r * 0.8)
        img[:, inside] = colour[:, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_toy_dataset(directory: str | os.PathLike, count: int, seed: int, rain: RainParams,
                      size: int = 64, prefix: str = "toy") -> "DatasetManifest":
    """Write ``count`` clean/rainy PNG pairs plus ``manifest.txt`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        clean = toy_clean_image(rng, size)
        params = RainParams(**{**rain.__dict__, "seed": int(rng.integers(2**31))})
        rainy = synthesize_rain(clean, params)
        cpath, rpath = directory / f"{prefix}{i:03d}_clean.png", directory / f"{prefix}{i:03d}_rain.png"
        save_image(clean, cpath)
        save_image(rainy, rpath)
        entries.append((rpath, cpath))
    manifest = DatasetManifest(entries=entries, patch_size=size, seed=seed)
    manifest.save(directory / "manifest.txt")
    return manifest


# -- datasets -----------------------------------------------------------------------

@dataclass
class TrainingSample:
    """Rainy input, clean target and the target's structure/detail split (all 3xHxW)."""

    rainy: np.ndarray
    clean: np.ndarray
    structure: np.ndarray
    detail: np.ndarray


@dataclass
class DatasetManifest:
    entries: list[tuple[Path, Path]]
    patch_size: int = 64
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def load(cls, path: str | os.PathLike, patch_size: int = 64, seed: int = 0) -> "DatasetManifest":
        """Parse ``rainy<TAB>clean`` lines; relative paths resolve against the manifest's folder."""
        path = Path(path)
        root = path.parent
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ContractError(f"{path}:{lineno}: expected 'rainy_path<TAB>clean_path'")
            rainy, clean = (Path(p.strip()) for p in parts)
            entries.append((rainy if rainy.is_absolute() else root / rainy,
                            clean if clean.is_absolute() else root / clean))
        return cls(entries=entries, patch_size=patch_size, seed=seed)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        lines = ["# rainy_path\tclean_path"]
        for rainy, clean in self.entries:
            lines.append(f"{_relative(rainy, path.parent)}\t{_relative(clean, path.parent)}")
        atomic_write(path, lambda tmp: Path(tmp).write_text("\n".join(lines) + "\n", encoding="utf-8"))

    def validate(self) -> None:
        for rainy, clean in self.entries:
            for p in (rainy, clean):
                if not Path(p).is_file():
                    raise FileNotFoundError(f"manifest entry missing: {p}")

    def pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Load (and memoise) the i-th (rainy, clean) image pair."""
        if i not in self._cache:
            rainy_path, clean_path = self.entries[i]
            rainy, clean = load_image(rainy_path), load_image(clean_path)
            if rainy.shape != clean.shape:
                raise ContractError(f"{rainy_path}: shape {rainy.shape} differs from clean {clean.shape}")
            self._cache[i] = (rainy, clean)
        return self._cache[i]

    def __len__(self) -> int:
        return len(self.entries)


def _relative(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(Path(p).resolve())


def make_sample(rainy: np.ndarray, clean: np.ndarray) -> TrainingSample:
    structure, detail = decompose_label(clean)
    return TrainingSample(rainy=rainy, clean=clean, structure=structure, detail=detail)


def sample_patches(manifest: DatasetManifest, count: int, patch_size: int, seed: int) -> list[TrainingSample]:
    """Random aligned crops from random manifest pairs, with decomposed labels."""
    if not manifest.entries:
        raise ContractError("manifest has no entries")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        i = int(rng.integers(len(manifest)))
        rainy, clean = manifest.pair(i)
        h, w = clean.shape[1:]
        if patch_size > min(h, w):
            raise ContractError(f"patch size {patch_size} exceeds image {h}x{w}: {manifest.entries[i][1]}")
        y = int(rng.integers(h - patch_size + 1))
        x = int(rng.integers(w - patch_size + 1))
        crop = np.s_[:, y:y + patch_size, x:x + patch_size]
        out.append(make_sample(rainy[crop], clean[crop]))
    return out

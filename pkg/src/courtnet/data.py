"""Synthetic infrared scenes, the ordered probe set, PGM files and manifests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter, label

MAX_TARGET_SIDE = 9
MAX_AREA_FRACTION = 0.0015
SLOTS_PER_PATCH = 9


class PlacementError(RuntimeError):
    """Targets could not be placed under the scene constraints."""


class PGMError(ValueError):
    """Malformed or truncated PGM file."""


class DatasetError(ValueError):
    """Manifest or image files are missing or inconsistent."""


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one random clutter scene.

    Targets are Gaussian spots added onto a smooth cluttered background; the
    mask marks pixels where a target's contribution exceeds half its peak.
    """

    image_h: int = 56
    image_w: int = 56
    n_targets_min: int = 1
    n_targets_max: int = 2
    sigma_min: float = 0.45
    sigma_max: float = 0.8
    amp_min: float = 0.35
    amp_max: float = 0.6
    background_low: float = 0.05
    background_high: float = 0.5
    noise_sigma: float = 0.015
    blob_count: int = 6
    blob_scale: float = 5.0
    gradient_amp: float = 0.2
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_targets_min <= self.n_targets_max:
            raise ValueError("need 0 <= n_targets_min <= n_targets_max")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if stamp_side(self.sigma_max) > MAX_TARGET_SIDE:
            raise ValueError(f"sigma_max {self.sigma_max} gives a stamp wider than {MAX_TARGET_SIDE} px")

    @property
    def max_target_pixels(self) -> int:
        """Largest total mask area strictly below 0.15% of the image."""
        return math.ceil(MAX_AREA_FRACTION * self.image_h * self.image_w) - 1


@dataclass(frozen=True)
class ProbeSpec:
    """One target per frame, walked patch by patch over a 3x3 slot grid."""

    grid: int = 14
    image_size: int = 56
    stamp_sigma: float = 0.5
    background: float = 0.2
    amplitude: float = 0.6
    noise_sigma: float = 0.0
    seed: int = 0

    @property
    def patch(self) -> int:
        return self.image_size // self.grid

    @property
    def frame_count(self) -> int:
        return self.grid * self.grid * SLOTS_PER_PATCH


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    metadata: dict = field(default_factory=dict)


def stamp_side(sigma: float) -> int:
    return 2 * math.ceil(2 * sigma) + 1


def _stamp(shape: tuple[int, int], cy: float, cx: float, sigma: float, amp: float):
    """Gaussian spot truncated to a square box; returns (contribution, mask) images."""
    H, W = shape
    side = stamp_side(sigma)
    half = side // 2
    iy, ix = int(math.floor(cy)), int(math.floor(cx))
    y0, y1 = max(iy - half, 0), min(iy + half + 1, H)
    x0, x1 = max(ix - half, 0), min(ix + half + 1, W)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    # pixel (i, j) covers [i, i+1) x [j, j+1); its center is at +0.5
    g = amp * np.exp(-((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) / (2 * sigma * sigma))
    contrib = np.zeros(shape)
    contrib[y0:y1, x0:x1] = g
    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1, x0:x1] = g > 0.5 * g.max()
    return contrib, mask


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.image_h, spec.image_w
    bg = gaussian_filter(rng.standard_normal((H, W)), spec.blob_scale, mode="reflect")
    bg /= np.abs(bg).max() + 1e-12
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(spec.blob_count):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        s = spec.blob_scale * rng.uniform(0.5, 1.5)
        bg += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (math.cos(angle) * (xx / W - 0.5) + math.sin(angle) * (yy / H - 0.5))
    lo, hi = bg.min(), bg.max()
    bg = (bg - lo) / (hi - lo + 1e-12)
    bg = spec.background_low + (spec.background_high - spec.background_low) * bg
    return bg + spec.gradient_amp * ramp


def generate_random_scene(spec: SceneSpec, index: int | None = None) -> Sample:
    """Random clutter scene; ``index`` derives a per-sample stream from ``spec.seed``."""
    seed_key = [spec.seed] if index is None else [spec.seed, index]
    rng = np.random.default_rng(seed_key)
    H, W = spec.image_h, spec.image_w
    bg = _background(spec, rng)
    n = int(rng.integers(spec.n_targets_min, spec.n_targets_max + 1))
    for _ in range(spec.max_retries):
        contrib = np.zeros((H, W))
        mask = np.zeros((H, W), dtype=bool)
        occupied = np.zeros((H, W), dtype=bool)
        centers = []
        ok = True
        for _ in range(n):
            sigma = rng.uniform(spec.sigma_min, spec.sigma_max)
            amp = rng.uniform(spec.amp_min, spec.amp_max)
            margin = stamp_side(sigma) / 2 + 1
            cy, cx = rng.uniform(margin, H - margin), rng.uniform(margin, W - margin)
            c, m = _stamp((H, W), cy, cx, sigma, amp)
            box = c > 0
            if np.any(occupied & binary_dilation(box)):
                ok = False
                break
            occupied |= box
            contrib += c
            mask |= m
            centers.append((float(cy), float(cx)))
        if ok and mask.sum() <= spec.max_target_pixels:
            break
    else:
        raise PlacementError(f"could not place {n} targets in {spec.max_retries} attempts")
    noise = spec.noise_sigma * rng.standard_normal((H, W))
    image = np.clip(bg + contrib + noise, 0.0, 1.0)
    meta = {"seed": spec.seed, "index": index, "centers": centers}
    return Sample(image=image, mask=mask.astype(np.float64), metadata=meta)


def generate_random_scenes(spec: SceneSpec, count: int) -> list[Sample]:
    return [generate_random_scene(spec, i) for i in range(count)]


def probe_slot_offsets(patch: int) -> list[int]:
    """Pixel offsets of the three slot rows (or columns) inside one patch."""
    spacing = max(1, patch // 3)
    start = (patch - (2 * spacing + 1)) // 2
    return [start + j * spacing for j in range(3)]


def probe_frame_position(t: int, spec: ProbeSpec) -> tuple[int, int, int, int]:
    """(patch index, slot index, pixel row, pixel col) of frame ``t``."""
    patch_index, slot = divmod(t, SLOTS_PER_PATCH)
    prow, pcol = divmod(patch_index, spec.grid)
    srow, scol = divmod(slot, 3)
    offs = probe_slot_offsets(spec.patch)
    return patch_index, slot, prow * spec.patch + offs[srow], pcol * spec.patch + offs[scol]


def generate_probe_set(spec: ProbeSpec = ProbeSpec()) -> list[Sample]:
    """Frames ordered patch-major then slot-major: frame t = patch * 9 + slot."""
    if spec.image_size % spec.grid:
        raise ValueError(f"grid {spec.grid} does not divide image size {spec.image_size}")
    if spec.patch < 3 or stamp_side(spec.stamp_sigma) > spec.patch:
        raise ValueError(f"stamp of sigma {spec.stamp_sigma} does not fit a {spec.patch}px patch")
    rng = np.random.default_rng(spec.seed)
    shape = (spec.image_size, spec.image_size)
    frames = []
    for t in range(spec.frame_count):
        patch_index, slot, r, c = probe_frame_position(t, spec)
        contrib, mask = _stamp(shape, r + 0.5, c + 0.5, spec.stamp_sigma, spec.amplitude)
        image = np.full(shape, spec.background) + contrib
        if spec.noise_sigma:
            image = image + spec.noise_sigma * rng.standard_normal(shape)
        meta = {"frame": t, "patch_index": patch_index, "slot": slot, "centers": [(r + 0.5, c + 0.5)]}
        frames.append(Sample(np.clip(image, 0.0, 1.0), mask.astype(np.float64), meta))
    return frames


def component_boxes(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """(height, width, area) of each 8-connected component of a binary mask."""
    labels, n = label(mask > 0, structure=np.ones((3, 3)))
    out = []
    for i in range(1, n + 1):
        ys, xs = np.nonzero(labels == i)
        out.append((int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1), int(ys.size)))
    return out


def satisfies_small_target_rule(mask: np.ndarray) -> bool:
    """Every component within 9x9 px and total area below 0.15% of the image."""
    boxes = component_boxes(mask)
    if any(h > MAX_TARGET_SIDE or w > MAX_TARGET_SIDE for h, w, _ in boxes):
        return False
    return np.count_nonzero(mask) < MAX_AREA_FRACTION * mask.size


# ---------------------------------------------------------------------------
# PGM (P5) files
# ---------------------------------------------------------------------------
def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write values in [0, 1] as an 8-bit binary graymap (maxval 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if np.any(image < 0) or np.any(image > 1) or not np.all(np.isfinite(image)):
        raise ValueError("image values must lie in [0, 1]")
    h, w = image.shape
    payload = np.rint(image * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + payload)


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(raw):
            raise PGMError("truncated header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise PGMError("truncated header")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(raw[start:pos])
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise PGMError("missing whitespace after header")
    return tokens, pos + 1


def read_pgm_raw(path: str | Path) -> tuple[np.ndarray, int]:
    """Integer pixel array and maxval of a P5 graymap."""
    raw = Path(path).read_bytes()
    tokens, offset = _header_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary graymap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"{path}: non-numeric header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise PGMError(f"{path}: unsupported geometry {w}x{h} maxval {maxval}")
    payload = raw[offset:offset + w * h]
    if len(payload) < w * h:
        raise PGMError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w), maxval


def read_pgm(path: str | Path) -> np.ndarray:
    pixels, maxval = read_pgm_raw(path)
    return pixels.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------
def write_manifest(path: str | Path, pairs: Iterable[tuple[str | Path, str | Path]]) -> None:
    """One ``image<TAB>mask`` record per line; paths relative to the manifest if possible."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for img, msk in pairs:
        rel = []
        for p in (Path(img), Path(msk)):
            try:
                rel.append(str(p.resolve().relative_to(base)))
            except ValueError:
                rel.append(str(p))
        lines.append("\t".join(rel) + "\n")
    path.write_text("".join(lines))


def read_manifest(path: str | Path) -> list[tuple[Path, Path]]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected image<TAB>mask")
        pairs.append(tuple(p if p.is_absolute() else path.parent / p for p in map(Path, parts)))
    return pairs


def load_dataset(manifest: str | Path) -> list[Sample]:
    samples = []
    for img_path, mask_path in read_manifest(manifest):
        for p in (img_path, mask_path):
            if not p.is_file():
                raise DatasetError(f"missing file: {p}")
        try:
            image = read_pgm(img_path)
            mask_raw, maxval = read_pgm_raw(mask_path)
        except PGMError as exc:
            raise DatasetError(str(exc)) from None
        if image.shape != mask_raw.shape:
            raise DatasetError(f"{img_path} and {mask_path} differ in shape")
        # threshold at 128 on the 8-bit scale
        mask = (mask_raw.astype(np.float64) * 255.0 / maxval >= 128).astype(np.float64)
        samples.append(Sample(image, mask, {"image_path": str(img_path), "mask_path": str(mask_path)}))
    return samples


def write_dataset(out_dir: str | Path, samples: Sequence[Sample], manifest_name: str = "manifest.tsv") -> Path:
    """Write ``images/NNNNN.pgm``, ``masks/NNNNN.pgm`` and the manifest; returns its path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(max(len(samples) - 1, 0))))
    pairs = []
    for i, s in enumerate(samples):
        img = out / "images" / f"{i:0{width}d}.pgm"
        msk = out / "masks" / f"{i:0{width}d}.pgm"
        write_pgm(img, s.image)
        write_pgm(msk, s.mask)
        pairs.append((img, msk))
    manifest = out / manifest_name
    write_manifest(manifest, pairs)
    return manifest


def stack_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Images and masks as [B,1,H,W] arrays."""
    x = np.stack([s.image for s in samples])[:, None]
    y = np.stack([s.mask for s in samples])[:, None]
    return x, y

"""Pseudo-paired dataset construction from unpaired makeup images.

Real deployments wrap an external demakeup network and face parser;
both are adapter interfaces here.  The toy adapters invert the
procedural face generator in this module, which draws "faces" as a
skin-coloured disc with eye dots, a lip arc and randomized colour-patch
makeup on a dark background.

The skin colour band is the toy family's contract: R in [0.70, 0.92],
R-G in [0.12, 0.20], G-B in [0.08, 0.15].  Backgrounds, features and
makeup palette colours all sit outside the band, so the parser can
recover the face disc exactly (band match + hole fill).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .grids import (
    ImageGrid,
    Mask,
    load_image,
    quantize_unit,
    save_image,
    save_mask,
)

EYE_COLOR = np.array([0.05, 0.05, 0.08])
LIP_COLOR = np.array([0.55, 0.10, 0.15])

MAKEUP_PALETTE = np.array(
    [
        [0.80, 0.05, 0.10],  # crimson
        [0.95, 0.45, 0.05],  # orange
        [0.95, 0.85, 0.10],  # yellow
        [0.10, 0.70, 0.20],  # green
        [0.05, 0.75, 0.80],  # cyan
        [0.10, 0.25, 0.85],  # blue
        [0.55, 0.10, 0.75],  # purple
        [0.90, 0.10, 0.55],  # magenta
    ]
)


class NoFaceDetected(Exception):
    """The face parser found no facial region in the image."""


class DemakeupUnavailable(Exception):
    """The demakeup adapter could not produce a bare-faced image."""


class FaceParser(Protocol):
    def parse(self, image: ImageGrid) -> Mask: ...


class DemakeupModel(Protocol):
    def demakeup(self, image: ImageGrid) -> ImageGrid: ...


# ---------------------------------------------------------------------------
# Synthetic face generation


@dataclass(frozen=True)
class SynthFace:
    makeup: ImageGrid
    naked: ImageGrid
    mask: Mask


def _skin_band(pixels: np.ndarray) -> np.ndarray:
    r, g, b = pixels[..., 0], pixels[..., 1], pixels[..., 2]
    return (
        (r >= 0.70)
        & (r <= 0.92)
        & (r - g >= 0.12)
        & (r - g <= 0.20)
        & (g - b >= 0.08)
        & (g - b <= 0.15)
    )


def _disc(yy, xx, cy, cx, radius) -> np.ndarray:
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _draw_patch(rng: np.random.Generator, yy, xx, cy, cx, radius) -> np.ndarray:
    """One makeup patch kept well inside the face disc (extent <= 0.78 r)."""
    angle = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(0.1, 0.55) * radius
    py, px = cy + dist * np.sin(angle), cx + dist * np.cos(angle)
    max_extent = 0.78 * radius - dist
    shape = rng.choice(["disc", "ring", "rect"])
    if shape == "disc":
        pr = rng.uniform(0.08, 0.22) * radius
        pr = min(pr, max_extent)
        return _disc(yy, xx, py, px, max(pr, 1.5))
    if shape == "ring":
        pr = min(rng.uniform(0.14, 0.24) * radius, max_extent)
        pr = max(pr, 2.5)
        inner = max(pr - max(0.3 * pr, 1.5), 0.0)
        return _disc(yy, xx, py, px, pr) & ~_disc(yy, xx, py, px, inner)
    half_h = min(rng.uniform(0.06, 0.18) * radius, max_extent / np.sqrt(2))
    half_w = min(rng.uniform(0.06, 0.18) * radius, max_extent / np.sqrt(2))
    return (np.abs(yy - py) <= max(half_h, 1.0)) & (
        np.abs(xx - px) <= max(half_w, 1.0)
    )


def _render_face(rng: np.random.Generator, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # Dark gradient background, far from the skin band.
    base = np.array([0.15, 0.17, 0.22]) + rng.uniform(-0.03, 0.03, size=3)
    canvas = np.empty((size, size, 3))
    canvas[:] = base
    canvas += (0.10 * yy / size)[..., None] * np.array([0.3, 0.4, 0.6])

    jitter = size / 16
    cy = size / 2 + rng.uniform(-jitter, jitter)
    cx = size / 2 + rng.uniform(-jitter, jitter)
    radius = rng.uniform(size / 4 - jitter, size / 4 + jitter)
    face = _disc(yy, xx, cy, cx, radius)

    r = rng.uniform(0.72, 0.90)
    skin = np.array([r, r - rng.uniform(0.13, 0.19), 0.0])
    skin[2] = skin[1] - rng.uniform(0.09, 0.14)

    naked = canvas.copy()
    naked[face] = skin

    makeup = naked.copy()
    for _ in range(rng.integers(1, 4)):
        patch = _draw_patch(rng, yy, xx, cy, cx, radius) & face
        color = MAKEUP_PALETTE[rng.integers(len(MAKEUP_PALETTE))]
        makeup[patch] = color

    # Eyes and lips sit on top of any makeup, identically in both variants.
    for sx in (-1, 1):
        eye = _disc(yy, xx, cy - 0.35 * radius, cx + sx * 0.45 * radius,
                    max(0.12 * radius, 1.2))
        naked[eye] = EYE_COLOR
        makeup[eye] = EYE_COLOR
    lip = (
        ((yy - (cy + 0.55 * radius)) / max(0.12 * radius, 1.2)) ** 2
        + ((xx - cx) / max(0.38 * radius, 2.0)) ** 2
    ) <= 1.0
    naked[lip] = LIP_COLOR
    makeup[lip] = LIP_COLOR

    return (
        ImageGrid(quantize_unit(makeup)),
        ImageGrid(quantize_unit(naked)),
        Mask(face.astype(np.float64), kind="binary"),
    )


def synth_faces(n: int, seed: int, size: int = 64) -> list[SynthFace]:
    """Procedural (makeup, ground-truth naked, face mask) triplets.

    Deterministic in ``seed``; pixel values are snapped to the 8-bit
    grid so disk round trips are exact.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    faces = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        makeup, naked, mask = _render_face(rng, size)
        faces.append(SynthFace(makeup=makeup, naked=naked, mask=mask))
    return faces


def write_face_images(faces: list[SynthFace], out_dir: str | Path) -> list[Path]:
    """Materialize the makeup variants as a directory of PNG inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, face in enumerate(faces):
        path = out / f"face_{i:04d}.png"
        save_image(face.makeup, path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Adapters


class ToyFaceParser:
    """Recovers the face disc of synthetic faces: skin band + hole fill.

    Eye dots, lips and makeup patches are interior holes in the skin
    region and are filled back in, so the result matches the generator's
    ground-truth disc exactly.
    """

    def parse(self, image: ImageGrid) -> Mask:
        skin = _skin_band(image.data)
        if not skin.any():
            raise NoFaceDetected("no skin-band pixels found")
        region = ndimage.binary_fill_holes(skin)
        return Mask(region.astype(np.float64), kind="binary")


class ToyDemakeup:
    """Deterministic stand-in for an unsupervised demakeup network.

    Inside the face, non-skin pixels that are not eye or lip features
    are repainted with the face's skin colour.  Outside the face the
    values are coarsely quantized (idempotent), simulating the
    unintended background drift of a real domain-transfer model -- the
    reason the masked blend exists.
    """

    BACKGROUND_LEVELS = 32

    def demakeup(self, image: ImageGrid) -> ImageGrid:
        data = image.data.copy()
        skin = _skin_band(data)
        if skin.any():
            face = ndimage.binary_fill_holes(skin)
            is_eye = np.all(np.isclose(data, EYE_COLOR, atol=1 / 255), axis=-1)
            is_lip = np.all(np.isclose(data, LIP_COLOR, atol=1 / 255), axis=-1)
            patches = face & ~skin & ~is_eye & ~is_lip
            skin_color = np.median(data[skin], axis=0)
            data[patches] = skin_color
        else:
            face = np.zeros(data.shape[:2], dtype=bool)
        background = ~face
        levels = self.BACKGROUND_LEVELS
        data[background] = np.round(data[background] * levels) / levels
        return ImageGrid(data)

    def demakeup_batch(self, images: list[ImageGrid]) -> list[ImageGrid]:
        return [self.demakeup(img) for img in images]


# ---------------------------------------------------------------------------
# Mask blurring and blending


def blur_mask(mask: Mask, kernel_size: int, sigma: float) -> Mask:
    """Gaussian-soften a mask with reflective borders.

    The kernel is the truncated, normalized sampled Gaussian of odd
    width ``kernel_size``; values outside the kernel's reach stay
    exactly zero.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = kernel_size // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    kernel /= kernel.sum()
    blurred = ndimage.convolve1d(mask.data, kernel, axis=0, mode="reflect")
    blurred = ndimage.convolve1d(blurred, kernel, axis=1, mode="reflect")
    return Mask(np.clip(blurred, 0.0, 1.0), kind="blurred")


def scaled_blur_params(size: int, base_kernel: int = 15, base_sigma: float = 5.0,
                       base_size: int = 512) -> tuple[int, float]:
    """Blur defaults tuned at 512x512, scaled proportionally to ``size``."""
    kernel = max(int(round(base_kernel * size / base_size)), 3)
    if kernel % 2 == 0:
        kernel += 1
    return kernel, base_sigma * size / base_size


def blend_naked(naked_star: ImageGrid, makeup: ImageGrid, mask: Mask) -> ImageGrid:
    """Per-pixel convex combination: mask weighs the demakeup result.

    Where the mask is exactly zero the output equals the makeup image
    bitwise, so background drift from the demakeup adapter cannot leak
    into the pair.
    """
    if naked_star.data.shape != makeup.data.shape:
        raise ValueError(
            f"image shape mismatch {naked_star.data.shape} vs {makeup.data.shape}"
        )
    if mask.data.shape != makeup.data.shape[:2]:
        raise ValueError(
            f"mask shape {mask.data.shape} does not match image "
            f"{makeup.data.shape[:2]}"
        )
    m = mask.data[..., None]
    return ImageGrid(naked_star.data * m + makeup.data * (1.0 - m))


# ---------------------------------------------------------------------------
# Pair records and the build pipeline


@dataclass(frozen=True)
class PseudoPair:
    makeup: ImageGrid
    naked: ImageGrid
    mask: Mask
    source_id: str

    def __post_init__(self):
        if not (
            self.makeup.data.shape == self.naked.data.shape
            and self.mask.data.shape == self.makeup.data.shape[:2]
        ):
            raise ValueError("pair members disagree on resolution")
        outside = self.mask.data == 0.0
        if not np.array_equal(
            self.naked.data[outside], self.makeup.data[outside]
        ):
            raise ValueError("naked differs from makeup outside mask support")


@dataclass
class PairBuildConfig:
    blur_kernel: int | None = None
    blur_sigma: float | None = None
    image_size: int | None = None
    parser: FaceParser = field(default_factory=ToyFaceParser)
    demakeup: DemakeupModel = field(default_factory=ToyDemakeup)


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def build_pair(
    makeup: ImageGrid, config: PairBuildConfig, source_id: str
) -> PseudoPair:
    """parse -> demakeup -> blur -> blend for one image."""
    binary = config.parser.parse(makeup)
    naked_star = config.demakeup.demakeup(makeup)
    size = makeup.height
    kernel, sigma = config.blur_kernel, config.blur_sigma
    if kernel is None or sigma is None:
        auto_kernel, auto_sigma = scaled_blur_params(size)
        kernel = kernel if kernel is not None else auto_kernel
        sigma = sigma if sigma is not None else auto_sigma
    blurred = blur_mask(binary, kernel, sigma)
    naked = blend_naked(naked_star, makeup, blurred)
    return PseudoPair(makeup=makeup, naked=naked, mask=blurred,
                      source_id=source_id)


def build_pairs(
    unpaired_dir: str | Path, out_dir: str | Path, config: PairBuildConfig
) -> Path:
    """Build and persist pseudo pairs for every image in a directory.

    Writes ``{id}/makeup.png, naked.png, mask.png`` per pair plus a
    line-delimited ``manifest.jsonl`` index.  Images the parser rejects
    are skipped with a reason record rather than failing the crawl.
    Returns the manifest path.
    """
    src = Path(unpaired_dir)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory {src} does not exist")
    files = sorted(
        p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not files:
        raise FileNotFoundError(f"no input images in {src}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w") as manifest:
        for path in files:
            source_id = path.stem
            image = load_image(path)
            if config.image_size and image.height != config.image_size:
                image = _resize(image, config.image_size)
            try:
                pair = build_pair(image, config, source_id)
            except NoFaceDetected as exc:
                record = {
                    "source_id": source_id,
                    "status": "skipped",
                    "reason": f"no face detected: {exc}",
                }
                manifest.write(json.dumps(record) + "\n")
                continue
            pair_dir = out / source_id
            pair_dir.mkdir(exist_ok=True)
            save_image(pair.makeup, pair_dir / "makeup.png")
            save_image(pair.naked, pair_dir / "naked.png")
            save_mask(pair.mask, pair_dir / "mask.png")
            record = {
                "source_id": source_id,
                "status": "ok",
                "paths": {
                    "makeup": f"{source_id}/makeup.png",
                    "naked": f"{source_id}/naked.png",
                    "mask": f"{source_id}/mask.png",
                },
                "mask_stats": {
                    "mean": float(pair.mask.data.mean()),
                    "coverage": pair.mask.coverage,
                },
            }
            manifest.write(json.dumps(record) + "\n")
    return manifest_path


def _resize(image: ImageGrid, size: int) -> ImageGrid:
    from PIL import Image as PILImage

    payload = np.round(image.data * 255.0).astype(np.uint8)
    resized = PILImage.fromarray(payload).resize((size, size), PILImage.BILINEAR)
    return ImageGrid(np.asarray(resized, dtype=np.float64) / 255.0)


def read_manifest(manifest_path: str | Path) -> list[dict]:
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def load_pairs(manifest_path: str | Path) -> list[PseudoPair]:
    """Load every successfully built pair referenced by a manifest."""
    from .grids import load_mask

    base = Path(manifest_path).parent
    pairs = []
    for record in read_manifest(manifest_path):
        if record["status"] != "ok":
            continue
        paths = record["paths"]
        pairs.append(
            PseudoPair(
                makeup=load_image(base / paths["makeup"]),
                naked=load_image(base / paths["naked"]),
                mask=load_mask(base / paths["mask"], kind="blurred"),
                source_id=record["source_id"],
            )
        )
    if not pairs:
        raise ValueError(f"manifest {manifest_path} contains no usable pairs")
    return pairs

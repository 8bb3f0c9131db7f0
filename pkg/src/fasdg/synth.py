"""CutMix label discretization and the synthetic multi-domain face generator.

The mixer pastes an axis-aligned rectangle of a fake image onto a real image
from the same domain. The target mix level m is drawn uniformly from the grid
{0, 1/K, ..., 1}; the box is sized so the fake-pixel fraction is 1 - m, then
the label is snapped to the grid point nearest the realized pixel-exact real
fraction (ties break toward the smaller grid value, so the label always lies
exactly on the grid despite pixel quantization).

The generator stands in for real capture setups: every domain renders the
same kind of smooth face-like blob but under its own nuisances (background
hue, channel gains, illumination gradient direction, sensor noise level),
while the spoof cue - a high-frequency periodic pattern plus a slight content
blur, as left by recapture pipelines - is identical across domains. Real/fake
separation is therefore domain-invariant by construction and the domain
signal is label-invariant, which is exactly the structure a domain-
generalizing trainer is supposed to exploit.

Generation is pure given seeds: every sample draws from its own generator
derived from the stream passed in, so datasets are bitwise reproducible.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from fasdg.errors import CompositionError, ConfigError, DataError

REAL, FAKE = 1, 0


@dataclass
class LabeledFace:
    """One image with a binary liveness label (1 real, 0 fake) and a domain index."""

    image: np.ndarray  # (H, W, C) floats in [0, 1]
    label: int
    domain: int


@dataclass
class CompositeSample:
    """CutMix output: image, grid label in [0, 1], domain, and the pasted box."""

    image: np.ndarray
    label: float
    domain: int
    box: tuple[int, int, int, int] | None  # (x0, y0, w, h), None for pure samples


@dataclass(frozen=True)
class CueSpec:
    """Spoof cue parameters, shared by every domain."""

    amplitude: float = 0.12
    frequency: float = 0.30  # cycles per pixel
    blur: float = 0.8  # gaussian radius applied to fake content


@dataclass(frozen=True)
class SynthDomainSpec:
    """Per-domain nuisance parameters plus the shared spoof cue."""

    name: str
    background_rgb: tuple[float, float, float]
    channel_gains: tuple[float, float, float]
    illum_theta: float
    illum_amp: float
    noise_sigma: float
    cue: CueSpec


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_domain_spec(name: str, seed: int, cue: CueSpec) -> SynthDomainSpec:
    """Deterministic nuisance parameters from (seed, domain name) alone.

    Independent of any other domain, so adding or removing domains never
    perturbs the data of the remaining ones.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, _name_key(name), 0xD0]))
    hue = rng.uniform(0.0, 1.0)
    base = 0.25 + 0.2 * np.array(
        [np.cos(2 * np.pi * hue), np.cos(2 * np.pi * (hue + 1 / 3)), np.cos(2 * np.pi * (hue + 2 / 3))]
    )
    return SynthDomainSpec(
        name=name,
        background_rgb=tuple(np.clip(base, 0.05, 0.6)),
        channel_gains=tuple(rng.uniform(0.85, 1.15, size=3)),
        illum_theta=rng.uniform(0.0, 2 * np.pi),
        illum_amp=rng.uniform(0.10, 0.25),
        noise_sigma=rng.uniform(0.012, 0.028),
        cue=cue,
    )


def _face_content(rng: np.random.Generator, size: int, spec: SynthDomainSpec) -> np.ndarray:
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    img[:] = spec.background_rgb

    cy = h * (0.5 + rng.uniform(-0.06, 0.06))
    cx = w * (0.5 + rng.uniform(-0.06, 0.06))
    ry = h * rng.uniform(0.30, 0.38)
    rx = w * rng.uniform(0.22, 0.30)
    head = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) ** 2)
    skin = np.array([0.78, 0.62, 0.50]) * rng.uniform(0.9, 1.1)
    img += head[:, :, None] * (skin - img)

    for side in (-1.0, 1.0):
        ey, ex = cy - 0.25 * ry, cx + side * 0.45 * rx
        eye = np.exp(-(((yy - ey) / (0.08 * h)) ** 2 + ((xx - ex) / (0.06 * w)) ** 2))
        img -= 0.5 * eye[:, :, None] * img
    my, mx = cy + 0.45 * ry, cx
    mouth = np.exp(-(((yy - my) / (0.05 * h)) ** 2 + ((xx - mx) / (0.16 * w)) ** 2))
    img -= 0.35 * mouth[:, :, None] * img

    img = gaussian_filter(img, sigma=(0.7, 0.7, 0.0))

    ramp = 1.0 + spec.illum_amp * (
        (xx / w - 0.5) * np.cos(spec.illum_theta) + (yy / h - 0.5) * np.sin(spec.illum_theta)
    )
    img *= ramp[:, :, None]
    img *= np.asarray(spec.channel_gains)
    return np.clip(img, 0.04, 0.96)


def _spoof_cue(rng: np.random.Generator, content: np.ndarray, cue: CueSpec) -> np.ndarray:
    h, w, _ = content.shape
    out = gaussian_filter(content, sigma=(cue.blur, cue.blur, 0.0))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phi = rng.uniform(0.0, 2 * np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    pattern = cue.amplitude * np.sin(
        2 * np.pi * cue.frequency * (xx * np.cos(phi) + yy * np.sin(phi)) + phase
    )
    return out + pattern[:, :, None]


def generate_domain(
    spec: SynthDomainSpec,
    n_real: int,
    n_fake: int,
    rng: np.random.Generator,
    domain_index: int = 0,
    image_size: int = 32,
) -> list[LabeledFace]:
    """Render ``n_real`` live and ``n_fake`` spoofed faces under one domain."""
    if n_real < 0 or n_fake < 0:
        raise ConfigError("sample counts must be non-negative")
    child_seeds = rng.integers(0, 2**63 - 1, size=n_real + n_fake)
    samples = []
    for i in range(n_real + n_fake):
        srng = np.random.default_rng(int(child_seeds[i]))
        content = _face_content(srng, image_size, spec)
        label = REAL if i < n_real else FAKE
        if label == FAKE:
            content = _spoof_cue(srng, content, spec.cue)
        content += srng.normal(0.0, spec.noise_sigma, size=content.shape)
        img = np.clip(content, 0.0, 1.0).astype(np.float32)
        samples.append(LabeledFace(image=img, label=label, domain=domain_index))
    return samples


# ---------------------------------------------------------------------------
# CutMix discretization


def snap_to_grid(fraction: float, k: int) -> float:
    """Nearest grid point of {0, 1/K, ..., 1}; exact ties round down."""
    v = fraction * k
    lo = int(np.floor(v))
    rem = v - lo
    if rem > 0.5:
        lo += 1
    return min(max(lo, 0), k) / k


def cutmix_discretize(
    real: LabeledFace, fake: LabeledFace, k: int, rng: np.random.Generator
) -> CompositeSample:
    """Paste a fake rectangle onto a real image and emit the grid label.

    Draws the mix level uniformly over the K+1 grid points. Endpoints pass
    the untouched source image through; interior levels paste a box whose
    area targets a fake fraction of 1 - m, at a uniformly random position,
    with the label snapped to the realized real-pixel fraction.
    """
    if k < 2:
        raise ConfigError(f"grid constant K must be >= 2, got {k}")
    if real.image.shape != fake.image.shape:
        raise CompositionError(
            f"image shapes differ: {real.image.shape} vs {fake.image.shape}"
        )
    if real.domain != fake.domain:
        raise CompositionError(
            f"cross-domain mix rejected: domains {real.domain} vs {fake.domain}"
        )
    if real.label != REAL or fake.label != FAKE:
        raise CompositionError(
            f"need (real, fake) sources, got labels ({real.label}, {fake.label})"
        )

    m = int(rng.integers(0, k + 1)) / k
    if m == 1.0:
        return CompositeSample(real.image.copy(), 1.0, real.domain, None)
    if m == 0.0:
        return CompositeSample(fake.image.copy(), 0.0, real.domain, None)

    h, w = real.image.shape[:2]
    ratio = np.sqrt(1.0 - m)
    bw = min(max(int(round(w * ratio)), 1), w)
    bh = min(max(int(round(h * ratio)), 1), h)
    x0 = int(rng.integers(0, w - bw + 1))
    y0 = int(rng.integers(0, h - bh + 1))
    img = real.image.copy()
    img[y0 : y0 + bh, x0 : x0 + bw] = fake.image[y0 : y0 + bh, x0 : x0 + bw]
    real_fraction = 1.0 - (bw * bh) / (w * h)
    return CompositeSample(img, snap_to_grid(real_fraction, k), real.domain, (x0, y0, bw, bh))


# ---------------------------------------------------------------------------
# PNG ingestion / emission


def write_directory(samples: list[LabeledFace], root, domain_names: list[str]) -> None:
    """Emit samples as ``<root>/<domain>/<real|fake>/NNNNN.png`` (8-bit RGB)."""
    root = Path(root)
    counters: dict[tuple[int, int], int] = {}
    for s in samples:
        cls = "real" if s.label == REAL else "fake"
        d = root / domain_names[s.domain] / cls
        d.mkdir(parents=True, exist_ok=True)
        n = counters.get((s.domain, s.label), 0)
        counters[(s.domain, s.label)] = n + 1
        arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(d / f"{n:05d}.png")


def ingest_directory(path) -> tuple[list[LabeledFace], dict[tuple[str, str], int]]:
    """Load ``<root>/<domain>/<real|fake>/*.png`` into labeled faces.

    Domain indices follow sorted domain-name order. Unreadable files are
    skipped with an itemized warning; an empty (domain, class) is a hard
    error. Returns (samples, counts keyed by (domain_name, class)).
    """
    import warnings

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"ingest root {root} is not a directory")
    entries = sorted(root.iterdir())
    domain_dirs = [e for e in entries if e.is_dir()]
    strays = [e for e in entries if not e.is_dir()]
    if strays:
        raise DataError(f"ingest root contains non-directory entries: {strays[0].name}")
    if not domain_dirs:
        raise DataError(f"no domain directories under {root}")

    samples: list[LabeledFace] = []
    counts: dict[tuple[str, str], int] = {}
    for idx, ddir in enumerate(domain_dirs):
        for cls, label in (("real", REAL), ("fake", FAKE)):
            cdir = ddir / cls
            loaded = 0
            files = sorted(cdir.glob("*.png")) if cdir.is_dir() else []
            for f in files:
                try:
                    with Image.open(f) as im:
                        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
                except Exception as exc:  # noqa: BLE001 - itemized warning per file
                    warnings.warn(f"skipping unreadable image {f}: {exc}", stacklevel=2)
                    continue
                samples.append(LabeledFace(image=arr, label=label, domain=idx))
                loaded += 1
            if loaded == 0:
                raise DataError(
                    f"no readable samples for domain '{ddir.name}' class '{cls}'"
                )
            counts[(ddir.name, cls)] = loaded
    return samples, counts

"""Volumes, the preprocessing operator, on-disk formats, and paired phantoms.

Preprocessing is a fixed composition: isotropic resampling, in-plane center
crop / zero pad, then per-scan intensity normalization.

Volume files come in pairs: ``<stem>.vhdr`` is a UTF-8 ``key = value`` header,
``<stem>.vraw`` is the payload of little-endian float32 values in C order (z, y, x).
Header keys::

    format = driftsyn-volume
    version = 1
    shape = nz ny nx
    spacing = sz sy sx          (mm, strictly positive)
    dtype = float32-le
    modality = condition | target
    domain = raw | normalized
    norm = <json>               (optional; normalization record)
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

VOLUME_FORMAT = "driftsyn-volume"
VOLUME_VERSION = 1
MODALITIES = ("condition", "target")


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class UnknownVersionError(VolumeFormatError):
    pass


class ByteCountError(VolumeFormatError):
    pass


@dataclass
class NormRecord:
    modality: str
    lo: float
    hi: float
    constant: bool = False

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * (self.hi - self.lo) + self.lo


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    modality: str = "condition"
    domain: str = "raw"
    norm: NormRecord | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be 3-D (z, y, x), got shape {self.values.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class PairedSample:
    m: Volume
    c: Volume
    subject: str = ""


@dataclass
class PrepConfig:
    target_spacing: float = 1.0
    inplane_size: int = 64
    lower_percentile: float = 0.5
    upper_percentile: float = 99.5
    target_window: tuple = (-1000.0, 2000.0)


# ---------------------------------------------------------------------- preprocessing


def resample_isotropic(v: Volume, target_spacing: float = 1.0) -> Volume:
    """Trilinear resampling onto an isotropic grid anchored at voxel (0, 0, 0).

    Output shape is round(shape * spacing / target); samples past the last input
    voxel take the edge value.
    """
    if not target_spacing > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    t = float(target_spacing)
    if all(s == t for s in v.spacing):
        return replace(v, values=v.values.copy())
    out_shape = tuple(max(1, int(round(n * s / t))) for n, s in zip(v.shape, v.spacing))
    axes = [np.arange(n) * (t / s) for n, s in zip(out_shape, v.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    vals = ndimage.map_coordinates(
        v.values.astype(np.float64), coords, order=1, mode="nearest", prefilter=False
    )
    return replace(v, values=vals, spacing=(t, t, t))


def crop_or_pad(v: Volume, target_inplane) -> Volume:
    """Center crop or zero pad the (y, x) plane to ``target_inplane``.

    With an odd difference the extra row/column is taken from (crop) or added on
    (pad) the high-index side.
    """
    ty, tx = (target_inplane, target_inplane) if np.isscalar(target_inplane) else target_inplane
    vals = v.values
    for axis, target in ((1, int(ty)), (2, int(tx))):
        if target <= 0:
            raise ValueError(f"target in-plane size must be positive, got {target}")
        n = vals.shape[axis]
        if n > target:
            lo = (n - target) // 2
            vals = np.take(vals, np.arange(lo, lo + target), axis=axis)
        elif n < target:
            lo = (target - n) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (lo, target - n - lo)
            vals = np.pad(vals, pad)
    return replace(v, values=np.array(vals, copy=True))


def normalize(v: Volume, modality: str | None = None, cfg: PrepConfig | None = None) -> Volume:
    """Per-scan intensity normalization to [0, 1].

    condition: clip to nearest-rank lower/upper percentiles, then min-max. Because the
    bounds are actual data values, re-normalizing the output is the identity.
    target: clip to a fixed physical window and map linearly.
    Volumes already in the normalized domain are returned unchanged.
    """
    cfg = cfg or PrepConfig()
    modality = modality or v.modality
    if v.domain == "normalized":
        return replace(v, values=v.values.copy())
    x = v.values.astype(np.float64)
    if modality == "condition":
        lo = float(np.percentile(x, cfg.lower_percentile, method="lower"))
        hi = float(np.percentile(x, cfg.upper_percentile, method="higher"))
    elif modality == "target":
        lo, hi = (float(b) for b in cfg.target_window)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    if hi <= lo:
        warnings.warn(f"constant {modality} volume (range 0); mapped to 0.5")
        rec = NormRecord(modality, lo, lo + 1.0, constant=True)
        out = np.full_like(x, 0.5)
    else:
        rec = NormRecord(modality, lo, hi)
        out = (np.clip(x, lo, hi) - lo) / (hi - lo)
    return replace(v, values=out, modality=modality, domain="normalized", norm=rec)


def preprocess(v: Volume, cfg: PrepConfig | None = None) -> Volume:
    cfg = cfg or PrepConfig()
    v = resample_isotropic(v, cfg.target_spacing)
    v = crop_or_pad(v, cfg.inplane_size)
    return normalize(v, v.modality, cfg)


def preprocess_pair(pair: PairedSample, cfg: PrepConfig | None = None) -> PairedSample:
    m, c = preprocess(pair.m, cfg), preprocess(pair.c, cfg)
    if m.shape != c.shape or m.spacing != c.spacing:
        raise ValueError(f"subject {pair.subject}: preprocessed shapes differ {m.shape} vs {c.shape}")
    return PairedSample(m, c, pair.subject)


def foreground_slices(c: Volume, min_fraction: float = 0.05, threshold: float = 0.1) -> list[int]:
    """Axial slices whose body fraction (normalized target above ``threshold``) exceeds ``min_fraction``."""
    frac = (c.values > threshold).mean(axis=(1, 2))
    return [int(i) for i in np.nonzero(frac > min_fraction)[0]]


# ---------------------------------------------------------------------- file formats


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".vhdr", ".vraw") else p
    return stem.with_suffix(".vhdr"), stem.with_suffix(".vraw")


def write_volume(path, v: Volume) -> None:
    hdr, raw = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format = {VOLUME_FORMAT}",
        f"version = {VOLUME_VERSION}",
        "shape = " + " ".join(str(n) for n in v.shape),
        "spacing = " + " ".join(repr(float(s)) for s in v.spacing),
        "dtype = float32-le",
        f"modality = {v.modality}",
        f"domain = {v.domain}",
    ]
    if v.norm is not None:
        lines.append("norm = " + json.dumps(asdict(v.norm), sort_keys=True))
    hdr.write_text("\n".join(lines) + "\n")
    raw.write_bytes(np.ascontiguousarray(v.values, dtype="<f4").tobytes())


def read_header(path) -> dict:
    hdr, _ = _paths(path)
    fields = {}
    for line in hdr.read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"{hdr}: malformed header line {line!r}")
        fields[key.strip()] = val.strip()
    if fields.get("format") != VOLUME_FORMAT:
        raise BadMagicError(f"{hdr}: not a {VOLUME_FORMAT} header")
    if fields.get("version") != str(VOLUME_VERSION):
        raise UnknownVersionError(f"{hdr}: unknown version {fields.get('version')!r}")
    return fields


def read_volume(path) -> Volume:
    hdr, raw = _paths(path)
    fields = read_header(hdr)
    try:
        shape = tuple(int(n) for n in fields["shape"].split())
        spacing = tuple(float(s) for s in fields["spacing"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{hdr}: bad shape/spacing ({exc})") from None
    if len(shape) != 3 or any(n < 0 for n in shape):
        raise VolumeFormatError(f"{hdr}: bad shape {shape}")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise VolumeFormatError(f"{hdr}: spacing must be positive, got {spacing}")
    if fields.get("dtype", "float32-le") != "float32-le":
        raise VolumeFormatError(f"{hdr}: unsupported dtype {fields['dtype']!r}")
    payload = raw.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise ByteCountError(f"{raw}: expected {expected} bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    norm = NormRecord(**json.loads(fields["norm"])) if "norm" in fields else None
    return Volume(
        values,
        spacing,
        modality=fields.get("modality", "condition"),
        domain=fields.get("domain", "raw"),
        norm=norm,
    )


def write_pgm(path, image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """8-bit binary PGM: values clamped to [lo, hi], mapped linearly to 0..255 and rounded."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got {img.shape}")
    scaled = np.round((np.clip(img, lo, hi) - lo) / (hi - lo) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise VolumeFormatError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------- phantoms


@dataclass
class PhantomSpec:
    size: int = 64
    n_slices: int = 1
    spacing: tuple = (1.0, 1.0, 1.0)
    bone_count: tuple = (2, 4)
    # per-class intensity ranges (background, soft tissue, marrow, cortex)
    target_ranges: dict = field(
        default_factory=lambda: {
            "background": (-1000.0, -990.0),
            "soft": (20.0, 60.0),
            "marrow": (250.0, 400.0),
            "cortex": (1100.0, 1400.0),
        }
    )
    condition_ranges: dict = field(
        default_factory=lambda: {
            "background": (0.0, 5.0),
            "soft": (550.0, 650.0),
            "marrow": (380.0, 460.0),
            "cortex": (40.0, 80.0),
        }
    )
    bias_strength: float = 0.2
    target_noise: float = 8.0
    condition_noise: float = 6.0
    seed: int = 0


LABELS = {"background": 0, "soft": 1, "marrow": 2, "cortex": 3}


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    w = (-s * dx + c * dy) / ry
    return u * u + w * w


def phantom_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """(n_slices, size, size) label image: body ellipse with cortical-rim bone ellipses."""
    n = spec.size
    labels = np.zeros((spec.n_slices, n, n), dtype=np.int8)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    body_c = (n / 2 + rng.uniform(-0.05, 0.05) * n, n / 2 + rng.uniform(-0.05, 0.05) * n)
    body_r = (rng.uniform(0.28, 0.36) * n, rng.uniform(0.36, 0.44) * n)
    body_a = rng.uniform(-0.2, 0.2)
    nb = int(rng.integers(spec.bone_count[0], spec.bone_count[1] + 1))
    bones = []
    for _ in range(nb):
        # keep bones inside the body: sample in the body's normalized frame
        rad = rng.uniform(0.0, 0.55)
        th = rng.uniform(0, 2 * np.pi)
        cy = body_c[0] + rad * body_r[0] * np.sin(th)
        cx = body_c[1] + rad * body_r[1] * np.cos(th)
        ry = rng.uniform(0.05, 0.1) * n
        rx = rng.uniform(0.05, 0.1) * n
        bones.append((cy, cx, ry, rx, rng.uniform(0, np.pi), rng.uniform(0.45, 0.7)))
    for z in range(spec.n_slices):
        grow = 1.0 + 0.05 * np.sin(np.pi * (z + 0.5) / spec.n_slices)
        body = _ellipse(yy, xx, *body_c, body_r[0] * grow, body_r[1] * grow, body_a) <= 1.0
        lab = labels[z]
        lab[body] = LABELS["soft"]
        for cy, cx, ry, rx, ang, inner in bones:
            d = _ellipse(yy, xx, cy, cx, ry * grow, rx * grow, ang)
            lab[(d <= 1.0) & body] = LABELS["cortex"]
            lab[(d <= inner**2) & body] = LABELS["marrow"]
    return labels


def _bias_field(shape, strength, rng):
    nz, ny, nx = shape
    yy, xx = np.mgrid[0:ny, 0:nx] / max(ny, nx)
    a, b = rng.uniform(-1, 1, size=2)
    ph = rng.uniform(0, 2 * np.pi)
    f = a * (yy - 0.5) + b * (xx - 0.5) + 0.5 * np.sin(2 * np.pi * (xx + yy) / 2 + ph)
    f = 1.0 + strength * f / max(1e-12, np.abs(f).max())
    return np.broadcast_to(f, shape)


def generate_phantom_pair(spec: PhantomSpec, subject: str | None = None) -> PairedSample:
    """Aligned condition/target pair rendered from one shared label image.

    Target intensities are bone-brightest (CT-like); the condition uses a different
    monotone-per-class mapping where cortex is dark, plus a smooth multiplicative bias.
    """
    rng = np.random.default_rng(spec.seed)
    labels = phantom_labels(spec, rng)
    target = np.zeros(labels.shape)
    cond = np.zeros(labels.shape)
    for name, lab in LABELS.items():
        mask = labels == lab
        target[mask] = rng.uniform(*spec.target_ranges[name])
        cond[mask] = rng.uniform(*spec.condition_ranges[name])
    # condition contrast is a nonlinear function of the same labels
    cond = 700.0 * (cond / 700.0) ** 1.3
    target = target + rng.normal(0.0, spec.target_noise, labels.shape)
    cond = cond * _bias_field(labels.shape, spec.bias_strength, rng)
    cond = cond + rng.normal(0.0, spec.condition_noise, labels.shape)
    sid = subject if subject is not None else f"phantom{spec.seed:05d}"
    return PairedSample(
        m=Volume(cond, spec.spacing, modality="condition"),
        c=Volume(target, spec.spacing, modality="target"),
        subject=sid,
    )


# ---------------------------------------------------------------------- slice datasets


@dataclass
class SliceDataset:
    """Stacked 2-D slices: m and c are (N, 1, H, W) arrays in the normalized domain."""

    m: np.ndarray
    c: np.ndarray
    subjects: list
    slices: list

    def __len__(self) -> int:
        return self.m.shape[0]

    def subset(self, subject_ids) -> "SliceDataset":
        keep = set(subject_ids)
        idx = [i for i, s in enumerate(self.subjects) if s in keep]
        return SliceDataset(
            self.m[idx], self.c[idx], [self.subjects[i] for i in idx], [self.slices[i] for i in idx]
        )

    @property
    def subject_ids(self) -> list:
        return list(dict.fromkeys(self.subjects))


def slices_from_pairs(pairs, min_fraction: float = 0.05) -> SliceDataset:
    ms, cs, subs, sl = [], [], [], []
    for pair in pairs:
        for z in foreground_slices(pair.c, min_fraction):
            ms.append(pair.m.values[z].astype(np.float64))
            cs.append(pair.c.values[z].astype(np.float64))
            subs.append(pair.subject)
            sl.append(z)
    if not ms:
        return SliceDataset(np.zeros((0, 1, 0, 0)), np.zeros((0, 1, 0, 0)), [], [])
    return SliceDataset(np.stack(ms)[:, None], np.stack(cs)[:, None], subs, sl)


def phantom_dataset(count: int, spec: PhantomSpec | None = None, prep: PrepConfig | None = None):
    """Generate ``count`` preprocessed phantom pairs (seeds spec.seed .. spec.seed+count-1)."""
    spec = spec or PhantomSpec()
    prep = prep or PrepConfig(inplane_size=spec.size)
    pairs = []
    for i in range(count):
        s = replace(spec, seed=spec.seed + i)
        pairs.append(preprocess_pair(generate_phantom_pair(s, subject=f"subj{i:03d}"), prep))
    return pairs

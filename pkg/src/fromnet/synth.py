"""Synthetic identities, procedural occluders and labelled JSON-lines manifests.

Every record is regenerated from ``(global_seed, record index)`` alone, so a
manifest stores a recipe rather than pixels and any subset of records can be
rendered in any order.
"""

from __future__ import annotations

import dataclasses
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .patterns import EMPTY_BOX, PixelBox, enumerate_patterns, match_box_to_pattern

FAMILIES = ("solid", "stripes", "checker", "blob", "ring", "gradient", "noise", "cross", "disk")
REGIONS = ("random", "full", "upper", "lower", "left", "right", "eyes", "nose", "mouth")
MANIFEST_VERSION = 1
_IDENTITY_SALT = 0x5EED1D
_TEXTURE_SALT = 0x0CC1D3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OccluderSpec:
    family: str
    base_w: int
    base_h: int
    texture_seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown occluder family {self.family!r}")
        if self.base_w < 4 or self.base_h < 4:
            raise ValueError(f"occluder base size must be >= 4 px, got {self.base_w}x{self.base_h}")


# ---------------------------------------------------------------------------
# identities


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return (yy + 0.5) / h, (xx + 0.5) / w


def _gauss(yy, xx, cy, cx, sy, sx):
    return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


def identity_base(identity_seed: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Clean, unjittered face-like image for one identity, values in [-1, 1]."""
    if identity_seed < 0:
        raise ValueError("identity_seed must be >= 0")
    return _identity_base(identity_seed, height, width, channels).copy()


@functools.lru_cache(maxsize=4096)
def _identity_base(identity_seed: int, height: int, width: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng([_IDENTITY_SALT, identity_seed])
    yy, xx = _grid(height, width)

    def color(lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=channels)

    img = np.empty((height, width, channels))
    bg_a, bg_b = color(), color()
    t = np.clip(yy * rng.uniform(-1, 1) + xx * rng.uniform(-1, 1), -1, 1)[..., None]
    img[:] = 0.5 * (bg_a + bg_b) + 0.5 * (bg_b - bg_a) * t

    # face ellipse
    fcx, fcy = 0.5 + rng.uniform(-0.04, 0.04), 0.52 + rng.uniform(-0.04, 0.04)
    fax, fay = rng.uniform(0.36, 0.46), rng.uniform(0.40, 0.48)
    face = ((xx - fcx) / fax) ** 2 + ((yy - fcy) / fay) ** 2 <= 1.0
    skin = color(-0.4, 0.8)
    img[face] = skin

    # hair band above a wavy hairline
    hairline = fcy - fay * rng.uniform(0.45, 0.75) + 0.03 * np.sin(xx * rng.uniform(6, 18) + rng.uniform(0, 6.3))
    hair = face & (yy < hairline)
    img[hair] = color(-1.0, 0.2)

    # eyes, brows, nose, mouth
    eye_dx, eye_y = rng.uniform(0.13, 0.22), fcy - rng.uniform(0.08, 0.16)
    eye_r = rng.uniform(0.045, 0.08)
    eye_col = color()
    for side in (-1, 1):
        g = _gauss(yy, xx, eye_y, fcx + side * eye_dx, eye_r * 0.7, eye_r * 1.3)
        img += g[..., None] * (eye_col - skin)
        brow = _gauss(yy, xx, eye_y - rng.uniform(0.07, 0.11), fcx + side * eye_dx, 0.015, eye_r * 1.6)
        img -= brow[..., None] * rng.uniform(0.5, 1.5)
    nose_len = rng.uniform(0.08, 0.16)
    nose = _gauss(yy, xx, fcy + 0.02, fcx, nose_len, rng.uniform(0.02, 0.05))
    img += nose[..., None] * color(-0.8, 0.8)
    mouth_y, mouth_w = fcy + rng.uniform(0.18, 0.28), rng.uniform(0.08, 0.18)
    mouth = _gauss(yy, xx, mouth_y, fcx, rng.uniform(0.015, 0.04), mouth_w)
    img += mouth[..., None] * (color() - skin)

    # identity-specific marks spread over the face
    for _ in range(6):
        cy, cx = rng.uniform(0.1, 0.95), rng.uniform(0.1, 0.9)
        s = rng.uniform(0.03, 0.09)
        img += _gauss(yy, xx, cy, cx, s, s * rng.uniform(0.6, 1.6))[..., None] * color(-0.9, 0.9)

    # a few oriented edges
    for _ in range(2):
        ang, off = rng.uniform(0, np.pi), rng.uniform(-0.3, 0.3)
        d = (xx - 0.5) * np.cos(ang) + (yy - 0.5) * np.sin(ang) - off
        img += (np.tanh(d / 0.02) * 0.15)[..., None] * color(-1, 1)

    img = np.clip(img, -1.0, 1.0)
    img.flags.writeable = False
    return img


def synth_identity_image(
    identity_seed: int,
    sample_rng: np.random.Generator | None,
    height: int = 56,
    width: int = 48,
    channels: int = 3,
) -> np.ndarray:
    """Identity base image plus per-sample jitter drawn from ``sample_rng``.

    Jitter is an integer shift of at most 3 px, a brightness offset in
    [-0.1, 0.1] and Gaussian noise with sigma 0.02. ``sample_rng=None`` gives
    the unjittered base image.
    """
    if identity_seed < 0:
        raise ValueError("identity_seed must be >= 0")
    img = _identity_base(identity_seed, height, width, channels)
    if sample_rng is None:
        return img.astype(np.float32)
    dy, dx = sample_rng.integers(-3, 4, size=2)
    padded = np.pad(img, ((3, 3), (3, 3), (0, 0)), mode="edge")
    img = padded[3 + dy : 3 + dy + height, 3 + dx : 3 + dx + width]
    img = img + sample_rng.uniform(-0.1, 0.1)
    img = img + sample_rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# occluders


def render_occluder(spec: OccluderSpec, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Render at base size; returns (rgb (h, w, C), alpha (h, w)) with alpha in {0, 1}."""
    rng = np.random.default_rng([_TEXTURE_SALT, spec.texture_seed])
    h, w = spec.base_h, spec.base_w
    yy, xx = _grid(h, w)
    c1 = rng.uniform(-1, 1, size=channels)
    c2 = rng.uniform(-1, 1, size=channels)
    alpha = np.ones((h, w))
    fam = spec.family
    if fam == "solid":
        rgb = np.broadcast_to(c1, (h, w, channels)).copy()
    elif fam == "stripes":
        ang = rng.uniform(0, np.pi)
        period = rng.uniform(0.15, 0.4)
        phase = ((xx * np.cos(ang) + yy * np.sin(ang)) / period) % 1.0 < 0.5
        rgb = np.where(phase[..., None], c1, c2)
    elif fam == "checker":
        cells = rng.integers(2, 6)
        on = (np.floor(xx * cells) + np.floor(yy * cells)) % 2 == 0
        rgb = np.where(on[..., None], c1, c2)
    elif fam == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        t = np.clip(0.5 + (xx - 0.5) * np.cos(ang) + (yy - 0.5) * np.sin(ang), 0, 1)[..., None]
        rgb = c1 * (1 - t) + c2 * t
    elif fam == "noise":
        rgb = rng.uniform(-1, 1, size=(h, w, channels))
    else:
        t = np.clip(yy, 0, 1)[..., None]
        rgb = c1 * (1 - t) + c2 * t
        r2 = ((xx - 0.5) / 0.5) ** 2 + ((yy - 0.5) / 0.5) ** 2
        if fam == "disk":
            alpha = (r2 <= 1.0).astype(float)
        elif fam == "ring":
            inner = rng.uniform(0.25, 0.55)
            alpha = ((r2 <= 1.0) & (r2 >= inner**2)).astype(float)
        elif fam == "cross":
            bar = rng.uniform(0.25, 0.45) / 2
            alpha = ((np.abs(xx - 0.5) <= bar) | (np.abs(yy - 0.5) <= bar)).astype(float)
        elif fam == "blob":
            field_ = np.zeros((h, w))
            for _ in range(4):
                field_ += _gauss(yy, xx, rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), 0.2, 0.2)
            alpha = (field_ >= 0.6 * field_.max()).astype(float)
            alpha[h // 2, w // 2] = 1.0
    return rgb.astype(np.float32), alpha.astype(np.float32)


def _resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum((np.arange(h) + 0.5) * arr.shape[0] / h, arr.shape[0] - 1).astype(int)
    cols = np.minimum((np.arange(w) + 0.5) * arr.shape[1] / w, arr.shape[1] - 1).astype(int)
    return arr[rows][:, cols]


def scaled_size(occ: OccluderSpec, s: float) -> tuple[int, int]:
    return max(1, int(round(s * occ.base_w))), max(1, int(round(s * occ.base_h)))


def paste(img: np.ndarray, rgb: np.ndarray, alpha: np.ndarray, x0: int, y0: int) -> tuple[np.ndarray, PixelBox]:
    """Paste an occluder with top-left corner (x0, y0), clipped to the image."""
    H, W = img.shape[:2]
    h, w = alpha.shape
    box = PixelBox(max(x0, 0), max(y0, 0), min(x0 + w, W), min(y0 + h, H))
    out = img.copy()
    if box.area == 0:
        return out, EMPTY_BOX
    sub = (slice(box.y0 - y0, box.y1 - y0), slice(box.x0 - x0, box.x1 - x0))
    a = alpha[sub][..., None]
    region = out[box.y0 : box.y1, box.x0 : box.x1]
    out[box.y0 : box.y1, box.x0 : box.x1] = a * rgb[sub] + (1 - a) * region
    return out, box


def apply_occlusion(
    img: np.ndarray,
    occ: OccluderSpec,
    s: float,
    rng: np.random.Generator,
    center: tuple[int, int] | None = None,
) -> tuple[np.ndarray, PixelBox]:
    """Rescale the occluder by ``s``, centre it on a random pixel and paste it.

    Returns the composited image and the occluded box clipped to the image.
    """
    if s <= 0:
        raise ValueError(f"scale must be positive, got {s}")
    H, W = img.shape[:2]
    w, h = scaled_size(occ, s)
    if w > 4 * W or h > 4 * H:
        raise ValueError(f"scaled occluder {w}x{h} exceeds 4x the {W}x{H} image")
    if center is None:
        cx, cy = int(rng.integers(W)), int(rng.integers(H))
    else:
        cx, cy = center
    rgb, alpha = render_occluder(occ, img.shape[2])
    rgb, alpha = _resize_nearest(rgb, h, w), _resize_nearest(alpha, h, w)
    return paste(img, rgb, alpha, cx - w // 2, cy - h // 2)


def occluded_fraction(box: Iterable[int], width: int, height: int) -> float:
    return PixelBox(*box).area / float(width * height)


def region_box(region: str, width: int, height: int) -> PixelBox:
    """Fixed boxes on the synthetic face layout."""
    fx = {
        "full": (0, 0, 1, 1),
        "upper": (0, 0, 1, 0.5),
        "lower": (0, 0.5, 1, 1),
        "left": (0, 0, 0.5, 1),
        "right": (0.5, 0, 1, 1),
        "eyes": (0.1, 0.2, 0.9, 0.5),
        "nose": (0.3, 0.35, 0.7, 0.72),
        "mouth": (0.2, 0.62, 0.8, 0.88),
    }
    if region not in fx:
        raise ValueError(f"no fixed box for region {region!r}")
    a, b, c, d = fx[region]
    return PixelBox(round(a * width), round(b * height), round(c * width), round(d * height))


# ---------------------------------------------------------------------------
# datasets


def _default_scales() -> tuple[float, ...]:
    return tuple(1.0 + 0.5 * i for i in range(9))


@dataclass(frozen=True)
class SynthConfig:
    identities: int = 40
    samples_per_identity: int = 50
    identity_offset: int = 0
    height: int = 56
    width: int = 48
    channels: int = 3
    K: int = 5
    scale_policy: str = "uniform"  # "uniform" over scale_choices, or "fixed"
    scale: float = 1.0
    scale_choices: tuple[float, ...] = field(default_factory=_default_scales)
    families: tuple[str, ...] = FAMILIES
    occluder_base_frac: float = 0.3
    clean_fraction: float = 1.0 / 3.0
    region: str = "random"
    jitter: bool = True
    global_seed: int = 0

    def __post_init__(self):
        checks = [
            ("identities", self.identities >= 1),
            ("samples_per_identity", self.samples_per_identity >= 1),
            ("identity_offset", self.identity_offset >= 0),
            ("height", self.height >= 8),
            ("width", self.width >= 8),
            ("channels", self.channels in (1, 3)),
            ("K", 1 <= self.K <= 16),
            ("scale_policy", self.scale_policy in ("uniform", "fixed")),
            ("scale", self.scale > 0),
            ("scale_choices", len(self.scale_choices) > 0 and all(s > 0 for s in self.scale_choices)),
            ("families", len(self.families) > 0 and all(f in FAMILIES for f in self.families)),
            ("occluder_base_frac", 0 < self.occluder_base_frac <= 1),
            ("clean_fraction", 0.0 <= self.clean_fraction <= 1.0),
            ("region", self.region in REGIONS),
            ("global_seed", self.global_seed >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {name}: {getattr(self, name)!r}")
        base_w, base_h = self.occluder_base
        if base_w < 4 or base_h < 4:
            raise ConfigError(f"invalid value for occluder_base_frac: occluder base {base_w}x{base_h} below 4 px")
        largest = max(self.scale_choices) if self.scale_policy == "uniform" else self.scale
        if largest * base_w > 4 * self.width or largest * base_h > 4 * self.height:
            raise ConfigError("invalid value for scale: occluder would exceed 4x the image")

    @property
    def occluder_base(self) -> tuple[int, int]:
        return round(self.occluder_base_frac * self.width), round(self.occluder_base_frac * self.height)

    @property
    def size(self) -> int:
        return self.identities * self.samples_per_identity

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("scale_choices", "families"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def replace(self, **changes) -> "SynthConfig":
        return dataclasses.replace(self, **changes)


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` text; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def coerce_fields(cls, raw: dict[str, str]) -> dict:
    """Convert string values to the types of the dataclass ``cls`` fields."""
    defaults = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        f = defaults[key]
        current = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            out[key] = _coerce(value, current)
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key}: {value!r}") from exc
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if like and isinstance(like[0], (int, float)) and not isinstance(like[0], bool):
            return tuple(type(like[0])(v) for v in items)
        if not like and items:
            try:
                return tuple(float(v) for v in items)
            except ValueError:
                return tuple(items)
        return tuple(items)
    if like is None:
        return None if value.lower() in ("", "none") else value
    return value


def load_synth_config(path: str | Path) -> SynthConfig:
    return SynthConfig(**coerce_fields(SynthConfig, parse_kv(Path(path).read_text())))


def record_rng(global_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([global_seed, index]))


def generate_record(config: SynthConfig, index: int, codebook=None) -> tuple[dict, np.ndarray]:
    """Deterministically build record ``index`` and its image."""
    if not 0 <= index < config.size:
        raise IndexError(index)
    codebook = codebook or enumerate_patterns(config.K)
    rng = record_rng(config.global_seed, index)
    identity = index // config.samples_per_identity
    identity_seed = config.identity_offset + identity
    img = synth_identity_image(
        identity_seed, rng if config.jitter else None, config.height, config.width, config.channels
    )
    # draws below happen unconditionally so each record consumes a fixed stream layout
    is_clean = bool(rng.random() < config.clean_fraction)
    family = config.families[int(rng.integers(len(config.families)))]
    texture_seed = int(rng.integers(2**31 - 1))
    if config.scale_policy == "fixed":
        s = float(config.scale)
    else:
        s = float(config.scale_choices[int(rng.integers(len(config.scale_choices)))])
    base_w, base_h = config.occluder_base
    occ = OccluderSpec(family, base_w, base_h, texture_seed)
    if is_clean:
        box = EMPTY_BOX
        s = 0.0
    elif config.region == "random":
        img, box = apply_occlusion(img, occ, s, rng)
    else:
        target = region_box(config.region, config.width, config.height)
        rgb, alpha = render_occluder(occ, config.channels)
        rgb = _resize_nearest(rgb, target.height, target.width)
        alpha = _resize_nearest(alpha, target.height, target.width)
        img, box = paste(img, rgb, alpha, target.x0, target.y0)
    record = {
        "index": index,
        "identity": identity,
        "identity_seed": identity_seed,
        "clean": is_clean,
        "family": None if is_clean else family,
        "texture_seed": None if is_clean else texture_seed,
        "scale_s": s,
        "box": list(box),
        "pattern_label": match_box_to_pattern(box, codebook, config.width, config.height),
        "occluded_fraction": occluded_fraction(box, config.width, config.height),
    }
    return record, img.astype(np.float32)


@dataclass
class Manifest:
    config: SynthConfig
    records: list[dict]

    def header(self) -> dict:
        return {
            "type": "header",
            "format_version": MANIFEST_VERSION,
            "global_seed": self.config.global_seed,
            "K": self.config.K,
            "height": self.config.height,
            "width": self.config.width,
            "config": self.config.to_dict(),
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ConfigError(f"empty manifest {path}")
        header = json.loads(lines[0])
        if header.get("type") != "header" or header.get("format_version") != MANIFEST_VERSION:
            raise ConfigError(f"{path}: missing or unsupported manifest header")
        return cls(SynthConfig.from_dict(header["config"]), [json.loads(l) for l in lines[1:] if l.strip()])

    def __len__(self) -> int:
        return len(self.records)

    def images(self, indices: Iterable[int] | None = None) -> np.ndarray:
        """Render images as an (N, C, H, W) float32 array."""
        codebook = enumerate_patterns(self.config.K)
        idx = range(len(self.records)) if indices is None else indices
        out = [generate_record(self.config, self.records[i]["index"], codebook)[1] for i in idx]
        return np.stack(out).transpose(0, 3, 1, 2).copy()

    def labels(self) -> dict[str, np.ndarray]:
        W, H = self.config.width, self.config.height
        boxes = np.array([r["box"] for r in self.records], dtype=np.float64)
        return {
            "identity": np.array([r["identity"] for r in self.records], dtype=np.int64),
            "pattern": np.array([r["pattern_label"] for r in self.records], dtype=np.int64),
            "box": boxes / np.array([W, H, W, H], dtype=np.float64),
            "clean": np.array([r["clean"] for r in self.records], dtype=bool),
        }


def build_dataset(config: SynthConfig, indices: Iterable[int] | None = None) -> Manifest:
    codebook = enumerate_patterns(config.K)
    idx = range(config.size) if indices is None else indices
    return Manifest(config, [generate_record(config, i, codebook)[0] for i in idx])


def render_dataset(config: SynthConfig) -> tuple[Manifest, np.ndarray]:
    """Manifest plus its (N, C, H, W) images, generating each record once."""
    codebook = enumerate_patterns(config.K)
    pairs = [generate_record(config, i, codebook) for i in range(config.size)]
    images = np.stack([img for _, img in pairs]).transpose(0, 3, 1, 2).copy()
    return Manifest(config, [rec for rec, _ in pairs]), images


def export_images(manifest: Manifest, out_dir: str | Path) -> list[Path]:
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, rec in enumerate(manifest.records):
        img = manifest.images([i])[0].transpose(1, 2, 0)
        arr = np.round((img + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = arr[..., 0]
        path = out_dir / f"{rec['index']:06d}_id{rec['identity']:04d}_p{rec['pattern_label']:03d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths

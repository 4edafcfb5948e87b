"""Deterministic synthetic panoptic scenes.

A scene is a stack of horizontal stuff bands with a handful of flat-color
things (disks and axis-aligned rectangles) placed without overlap.  In
twin mode the first two things share shape, size, and color exactly, so
nothing but position distinguishes them; their centers are kept at least
a quarter image apart overall and vertically, which guarantees the band
layout around each twin differs.  Scenes are a pure function of the
config seed via the documented counter-based generator in rng.py.

Categories: things are 0..2, stuff 3..5.

On disk a scene is a directory of binary netpbm files plus a `key=value`
manifest:

    scenes/<seed>/image.ppm      P6, maxval 255
    scenes/<seed>/semantic.pgm   P5, category ids as gray values
    scenes/<seed>/inst_<k>.pgm   P5, 0 or 255
    scenes/<seed>/scene.meta
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataFormatError
from .rng import SplitMix64

THING_CLASSES = 3
STUFF_CLASSES = 3
FIRST_STUFF_ID = THING_CLASSES

THING_COLORS = np.array([
    [0.85, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.25, 0.85],
])
STUFF_COLORS = np.array([
    [0.75, 0.75, 0.70],
    [0.60, 0.50, 0.35],
    [0.20, 0.45, 0.50],
])

_PLACEMENT_RETRIES = 40
_TWIN_RETRIES = 400


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    min_things: int = 2
    max_things: int = 4
    shapes: Tuple[str, ...] = ("disk", "rectangle")
    color_jitter: float = 0.08
    stuff_bands: int = 3
    twin_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"scene dims must be at least 16, got {self.height}x{self.width}")
        if not 0 <= self.min_things <= self.max_things:
            raise ValueError(
                f"need 0 <= min_things <= max_things, got {self.min_things}..{self.max_things}"
            )
        if self.stuff_bands < 1:
            raise ValueError("at least one stuff band required")
        unknown = set(self.shapes) - {"disk", "rectangle"}
        if not self.shapes or unknown:
            raise ValueError(f"shapes must be drawn from disk/rectangle, got {self.shapes}")
        if not 0.0 <= self.color_jitter <= 0.5:
            raise ValueError(f"color jitter must be in [0, 0.5], got {self.color_jitter}")
        if self.twin_mode and self.max_things < 2:
            raise ValueError("twin mode needs room for at least two things")


@dataclass
class SyntheticScene:
    image: np.ndarray                      # (H, W, 3) floats in [0, 1]
    semantic: np.ndarray                   # (H, W) int category ids
    instances: List[Tuple[np.ndarray, int]]  # (bool mask, thing category)
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def _shape_mask(kind: str, dims: Tuple[int, ...], cx: int, cy: int,
                height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    if kind == "disk":
        (r,) = dims
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    hw, hh = dims
    return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)


def _jittered(base: np.ndarray, amount: float, rng: SplitMix64) -> np.ndarray:
    return np.clip(base + rng.uniform_array((3,), -amount, amount), 0.0, 1.0)


def _draw_template(cfg: SceneConfig, rng: SplitMix64,
                   size_range: Tuple[float, float] = (0.09, 0.17)):
    kind = cfg.shapes[rng.randint(len(cfg.shapes))]
    lo = max(3, round(size_range[0] * min(cfg.height, cfg.width)))
    hi = max(lo + 1, round(size_range[1] * min(cfg.height, cfg.width)))
    if kind == "disk":
        dims = (lo + rng.randint(hi - lo + 1),)
    else:
        dims = (lo + rng.randint(hi - lo + 1), lo + rng.randint(hi - lo + 1))
    category = rng.randint(THING_CLASSES)
    color = _jittered(THING_COLORS[category], cfg.color_jitter, rng)
    return kind, dims, category, color


def _place(cfg: SceneConfig, rng: SplitMix64, kind, dims, occupied: np.ndarray,
           retries: int, min_dist_from: Optional[Tuple[int, int]] = None):
    """Find a free integer center; None if every attempt collides."""
    margin = max(dims) + 1
    span_x = cfg.width - 2 * margin
    span_y = cfg.height - 2 * margin
    if span_x <= 0 or span_y <= 0:
        return None
    for _ in range(retries):
        cx = margin + rng.randint(span_x)
        cy = margin + rng.randint(span_y)
        if min_dist_from is not None:
            dx = cx - min_dist_from[0]
            dy = cy - min_dist_from[1]
            if dx * dx + dy * dy < (cfg.width / 4.0) ** 2:
                continue
            # Stuff bands run horizontally, so only a vertical offset puts
            # the two twins into different surroundings; keep them a quarter
            # image apart vertically as well.
            if abs(dy) < cfg.height / 4.0:
                continue
        mask = _shape_mask(kind, dims, cx, cy, cfg.height, cfg.width)
        if not (mask & occupied).any():
            return cx, cy, mask
    return None


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    rng = SplitMix64(cfg.seed)
    h, w = cfg.height, cfg.width

    # Stuff bands: roughly equal heights with jittered interior boundaries.
    base = h / cfg.stuff_bands
    cuts = [0]
    for b in range(1, cfg.stuff_bands):
        wobble = rng.uniform(-base / 4.0, base / 4.0)
        cuts.append(int(round(b * base + wobble)))
    cuts.append(h)
    cuts = sorted(min(max(c, 0), h) for c in cuts)

    image = np.zeros((h, w, 3))
    semantic = np.zeros((h, w), dtype=np.int64)
    for b in range(cfg.stuff_bands):
        cat = FIRST_STUFF_ID + rng.randint(STUFF_CLASSES)
        color = _jittered(STUFF_COLORS[cat - FIRST_STUFF_ID], cfg.color_jitter, rng)
        semantic[cuts[b]:cuts[b + 1]] = cat
        image[cuts[b]:cuts[b + 1]] = color

    requested = cfg.min_things + rng.randint(cfg.max_things - cfg.min_things + 1)
    if cfg.twin_mode:
        requested = max(requested, 2)

    occupied = np.zeros((h, w), dtype=bool)
    instances: List[Tuple[np.ndarray, int]] = []

    def commit(mask: np.ndarray, category: int, color: np.ndarray) -> None:
        occupied[mask] = True
        semantic[mask] = category
        image[mask] = color
        instances.append((mask, category))

    placed_first_twin: Optional[Tuple[int, int]] = None
    for k in range(requested):
        if cfg.twin_mode and k == 0:
            # Twins are drawn from the upper half of the size range so their
            # masks stay comfortably resolvable at the model's stride.
            twin_template = _draw_template(cfg, rng, size_range=(0.12, 0.17))
            kind, dims, category, color = twin_template
            spot = _place(cfg, rng, kind, dims, occupied, _PLACEMENT_RETRIES)
            if spot is None:
                continue
            placed_first_twin = (spot[0], spot[1])
            commit(spot[2], category, color)
        elif cfg.twin_mode and k == 1:
            kind, dims, category, color = twin_template
            spot = _place(cfg, rng, kind, dims, occupied, _TWIN_RETRIES,
                          min_dist_from=placed_first_twin)
            if spot is None:
                continue
            commit(spot[2], category, color)
        else:
            kind, dims, category, color = _draw_template(cfg, rng)
            spot = _place(cfg, rng, kind, dims, occupied, _PLACEMENT_RETRIES)
            if spot is None:
                continue
            commit(spot[2], category, color)

    meta = {
        "seed": str(cfg.seed),
        "height": str(h),
        "width": str(w),
        "stuff_bands": str(cfg.stuff_bands),
        "twin_mode": "1" if cfg.twin_mode else "0",
        "requested_things": str(requested),
        "placed_things": str(len(instances)),
        "categories": ",".join(str(c) for _, c in instances),
    }
    return SyntheticScene(image=image, semantic=semantic, instances=instances, meta=meta)


# -- netpbm I/O ------------------------------------------------------------

_WHITESPACE = b" \t\r\n"


def _next_token(data: bytes, pos: int, path) -> Tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1] in _WHITESPACE:
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise DataFormatError(f"{path}: header truncated at byte {pos}")
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE:
        pos += 1
    return data[start:pos], pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] != magic:
        raise DataFormatError(
            f"{path}: expected {magic.decode()} magic at byte 0, found {data[:2]!r}"
        )
    pos = 2
    header = []
    for _ in range(3):
        token, pos = _next_token(data, pos, path)
        if not token.isdigit():
            raise DataFormatError(
                f"{path}: non-numeric header field {token!r} at byte {pos - len(token)}"
            )
        header.append(int(token))
    width, height, maxval = header
    if maxval != 255:
        raise DataFormatError(
            f"{path}: only maxval 255 supported, found {maxval} at byte {pos - len(str(maxval))}"
        )
    payload_start = pos + 1  # exactly one whitespace byte after maxval
    expected = width * height * channels
    available = len(data) - payload_start
    if available < expected:
        raise DataFormatError(
            f"{path}: payload truncated at byte {payload_start + max(available, 0)}: "
            f"expected {expected} bytes, found {available}"
        )
    flat = np.frombuffer(data, dtype=np.uint8, count=expected, offset=payload_start)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return flat.reshape(shape).copy()


def _write_netpbm(path, magic: bytes, values: np.ndarray) -> None:
    path = Path(path)
    height, width = values.shape[:2]
    header = f"{magic.decode()}\n{width} {height}\n255\n".encode("ascii")
    path.write_bytes(header + values.astype(np.uint8).tobytes())


def save_pgm(path, values: np.ndarray) -> None:
    if values.ndim != 2:
        raise DataFormatError(f"PGM wants a 2D gray array, got shape {values.shape}")
    _write_netpbm(path, b"P5", values)


def load_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", channels=1)


def save_ppm(path, values: np.ndarray) -> None:
    if values.ndim != 3 or values.shape[2] != 3:
        raise DataFormatError(f"PPM wants an (H, W, 3) array, got shape {values.shape}")
    _write_netpbm(path, b"P6", values)


def load_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", channels=3)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


# -- scene persistence -------------------------------------------------------

_META_ORDER = ("seed", "height", "width", "stuff_bands", "twin_mode",
               "requested_things", "placed_things", "categories")


def scene_dir(root, seed: int) -> Path:
    return Path(root) / "scenes" / str(seed)


def save_scene(scene: SyntheticScene, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_ppm(directory / "image.ppm", to_uint8(scene.image))
    save_pgm(directory / "semantic.pgm", scene.semantic.astype(np.uint8))
    for k, (mask, _) in enumerate(scene.instances):
        save_pgm(directory / f"inst_{k}.pgm", mask.astype(np.uint8) * 255)
    lines = [f"{key}={scene.meta.get(key, '')}" for key in _META_ORDER]
    (directory / "scene.meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_keyvalue(text: str, source: str = "<string>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_scene(directory) -> SyntheticScene:
    directory = Path(directory)
    meta_path = directory / "scene.meta"
    if not meta_path.is_file():
        raise DataFormatError(f"{meta_path}: manifest missing")
    meta = parse_keyvalue(meta_path.read_text(encoding="utf-8"), str(meta_path))
    image = load_ppm(directory / "image.ppm").astype(float) / 255.0
    semantic = load_pgm(directory / "semantic.pgm").astype(np.int64)
    categories = [int(c) for c in meta.get("categories", "").split(",") if c != ""]
    instances = []
    for k, category in enumerate(categories):
        mask = load_pgm(directory / f"inst_{k}.pgm") > 127
        instances.append((mask, category))
    return SyntheticScene(image=image, semantic=semantic, instances=instances, meta=meta)

"""Synthetic multi-region tile datasets, footprint rasterization, folds and I/O.

Each region is a grid of square tiles. Buildings are axis-aligned rectangles;
damage is assigned per building with a probability that decays with distance
to a few region-level cluster centres, so damaged buildings cluster in space.
Damaged roofs are rendered as high-variance debris so the task is learnable.

On-disk layout (``version`` 1)::

    manifest.json          version, region list, tile index
    tiles/<id>.img         float32 little-endian, H*W*C values, row-major, channel-last
    tiles/<id>.dmg.pgm     damage mask, binary P5 with maxval 1
    tiles/<id>.fpt.pgm     footprint mask, binary P5 with maxval 1
    tiles/<id>.bld.json    optional building list {"buildings": [{"id", "polygon", "damaged"}]}
"""
from __future__ import annotations

import json
import math
import os
import warnings
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pnm import PnmError, read_pgm, write_pgm

FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class Building:
    id: int
    polygon: list[tuple[int, int]]
    damaged: bool = False


@dataclass
class TileRecord:
    tile_id: str
    region: str
    image: np.ndarray
    damage_mask: np.ndarray
    footprint_mask: np.ndarray
    labeled: bool = True
    buildings: list[Building] = field(default_factory=list)
    origin: tuple[int, int] = (0, 0)

    @property
    def has_damage(self) -> bool:
        return bool(self.damage_mask.any())

    def building_ids(self) -> np.ndarray:
        """Per-pixel building id map (0 = background)."""
        h, w = self.footprint_mask.shape
        polys = [b.polygon for b in self.buildings]
        return rasterize_footprints(polys, h, w, ids=[b.id for b in self.buildings]).ids

    def __eq__(self, other) -> bool:
        if not isinstance(other, TileRecord):
            return NotImplemented
        return (
            self.tile_id == other.tile_id
            and self.region == other.region
            and self.labeled == other.labeled
            and tuple(self.origin) == tuple(other.origin)
            and self.buildings == other.buildings
            and _same_array(self.image, other.image)
            and _same_array(self.damage_mask, other.damage_mask)
            and _same_array(self.footprint_mask, other.footprint_mask)
        )


def _same_array(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class TextureParams:
    ground: tuple[float, float, float] = (0.55, 0.50, 0.42)
    roof: tuple[float, float, float] = (0.70, 0.38, 0.30)
    debris: tuple[float, float, float] = (0.46, 0.52, 0.64)
    ground_std: float = 0.03
    roof_std: float = 0.02
    debris_std: float = 0.10


@dataclass(frozen=True)
class RegionSpec:
    name: str
    building_density: float  # expected buildings per tile
    damage_rate: float
    cluster_count: int
    texture: TextureParams = TextureParams()
    tile_count: int = 40

    def validate(self) -> None:
        if not self.name:
            raise ValueError("region name must be non-empty")
        if not 0.0 <= self.damage_rate <= 1.0:
            raise ValueError(f"{self.name}: damage_rate {self.damage_rate} outside [0, 1]")
        if self.tile_count < 1:
            raise ValueError(f"{self.name}: tile_count must be >= 1, got {self.tile_count}")
        if self.cluster_count < 0:
            raise ValueError(f"{self.name}: cluster_count must be >= 0")
        if self.building_density < 0:
            raise ValueError(f"{self.name}: building_density must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RegionSpec":
        d = dict(d)
        tex = d.pop("texture", None)
        texture = TextureParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in tex.items()}) if tex else TextureParams()
        return cls(texture=texture, **d)


@dataclass(frozen=True)
class GeneratorConfig:
    tile_size: int = 128
    channels: int = 3
    min_building: int | None = None  # default tile_size // 10
    max_building: int | None = None  # default tile_size // 4
    gap: int = 1
    max_attempts: int = 200
    cluster_sigma: float = 0.2  # fraction of the region extent

    def size_range(self) -> tuple[int, int]:
        lo = self.min_building or max(3, self.tile_size // 10)
        hi = self.max_building or max(lo, self.tile_size // 4)
        return lo, hi


# -- rasterization --------------------------------------------------------------


@dataclass
class Raster:
    mask: np.ndarray  # (H, W) uint8
    ids: np.ndarray  # (H, W) int32, 0 = background


def rasterize_footprints(
    polygons: Sequence[Sequence[tuple[int, int]]],
    H: int,
    W: int,
    ids: Sequence[int] | None = None,
) -> Raster:
    """Rasterize integer-vertex polygons with the even-odd rule at pixel centres.

    Vertices are in pixel-corner coordinates ``(x, y)``; pixel ``(r, c)`` is set
    when its centre ``(c + 0.5, r + 0.5)`` is inside. Where polygons overlap the
    id map keeps the later polygon.
    """
    mask = np.zeros((H, W), dtype=np.uint8)
    id_map = np.zeros((H, W), dtype=np.int32)
    if ids is None:
        ids = range(1, len(polygons) + 1)
    xs = np.arange(W) + 0.5
    for k, (poly, pid) in enumerate(zip(polygons, ids)):
        if len(poly) < 3:
            raise ValueError(f"polygon {k} is degenerate: {len(poly)} vertices (need >= 3)")
        pts = [(int(x), int(y)) for x, y in poly]
        for x, y in pts:
            if not (0 <= x <= W and 0 <= y <= H):
                raise ValueError(f"polygon {k} has vertex ({x}, {y}) outside {W}x{H}")
        inside = _even_odd_fill(pts, H, xs)
        mask |= inside.astype(np.uint8)
        id_map[inside] = pid
    return Raster(mask, id_map)


def _even_odd_fill(pts: list[tuple[int, int]], H: int, xs: np.ndarray) -> np.ndarray:
    out = np.zeros((H, xs.size), dtype=bool)
    ys = [y for _, y in pts]
    r0, r1 = max(0, min(ys)), min(H, max(ys) + 1)
    edges = list(zip(pts, pts[1:] + pts[:1]))
    for r in range(r0, r1):
        yc = r + 0.5
        crossings = []
        for (x0, y0), (x1, y1) in edges:
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                # one rounding only, so half-integer crossings are exact
                crossings.append(x0 + ((yc - y0) * (x1 - x0)) / (y1 - y0))
        if not crossings:
            continue
        crossings.sort()
        right = len(crossings) - np.searchsorted(crossings, xs, side="right")
        out[r] = (right % 2) == 1
    return out


# -- generation ------------------------------------------------------------------


def _region_rng(spec: RegionSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(spec.name.encode())]))


def _layout(tile_count: int) -> int:
    return int(math.ceil(math.sqrt(tile_count)))


def _place_buildings(rng, n: int, size: int, lo: int, hi: int, gap: int, attempts: int, where: str):
    rects: list[tuple[int, int, int, int]] = []
    for k in range(n):
        for _ in range(attempts):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            if w > size - 2 or h > size - 2:
                continue
            x0 = int(rng.integers(1, size - w))
            y0 = int(rng.integers(1, size - h))
            cand = (x0, y0, x0 + w, y0 + h)
            if all(
                cand[2] + gap <= r[0] or r[2] + gap <= cand[0] or cand[3] + gap <= r[1] or r[3] + gap <= cand[1]
                for r in rects
            ):
                rects.append(cand)
                break
        else:
            raise GenerationError(f"{where}: could not place building {k + 1} of {n} after {attempts} attempts")
    return rects


def _damage_probabilities(centers: np.ndarray, extent: float, spec: RegionSpec, sigma_frac: float, rng) -> np.ndarray:
    n = len(centers)
    if n == 0 or spec.damage_rate == 0.0:
        return np.zeros(n)
    if spec.cluster_count == 0 or spec.damage_rate == 1.0:
        return np.full(n, spec.damage_rate)
    hubs = rng.uniform(0.0, extent, size=(spec.cluster_count, 2))
    d2 = ((centers[:, None, :] - hubs[None, :, :]) ** 2).sum(-1).min(axis=1)
    weight = np.exp(-d2 / (2.0 * (sigma_frac * extent) ** 2))
    weight = np.maximum(weight, 1e-12)
    # scale so the mean clipped probability hits damage_rate
    lo, hi = 0.0, 1.0 / weight.min()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * weight).mean() < spec.damage_rate:
            lo = mid
        else:
            hi = mid
    return np.minimum(1.0, hi * weight)


def generate_region(spec: RegionSpec, seed: int, config: GeneratorConfig | None = None) -> list[TileRecord]:
    """Deterministically synthesize all tiles of one region."""
    spec.validate()
    cfg = config or GeneratorConfig()
    rng = _region_rng(spec, seed)
    size, chans = cfg.tile_size, cfg.channels
    lo, hi = cfg.size_range()
    cols = _layout(spec.tile_count)

    base = int(math.floor(spec.building_density))
    frac = spec.building_density - base
    layouts = []
    for t in range(spec.tile_count):
        n = base + int(rng.random() < frac)
        rects = _place_buildings(rng, n, size, lo, hi, cfg.gap, cfg.max_attempts, f"{spec.name} tile {t}")
        layouts.append(rects)

    centers = []
    for t, rects in enumerate(layouts):
        oy, ox = (t // cols) * size, (t % cols) * size
        centers += [(ox + (r[0] + r[2]) / 2.0, oy + (r[1] + r[3]) / 2.0) for r in rects]
    centers_arr = np.array(centers, dtype=np.float64).reshape(-1, 2)
    probs = _damage_probabilities(centers_arr, cols * size, spec, cfg.cluster_sigma, rng)
    damaged = rng.random(len(probs)) < probs

    tex = spec.texture
    tiles = []
    k = 0
    for t, rects in enumerate(layouts):
        image = np.empty((size, size, chans))
        image[:] = np.asarray(tex.ground[:chans])
        image += rng.normal(0.0, tex.ground_std, size=image.shape)
        footprint = np.zeros((size, size), dtype=np.uint8)
        damage = np.zeros((size, size), dtype=np.uint8)
        buildings = []
        for j, (x0, y0, x1, y1) in enumerate(rects):
            is_damaged = bool(damaged[k])
            k += 1
            roof = np.asarray(tex.roof[:chans]) + rng.normal(0.0, 0.05, size=chans)
            patch_shape = (y1 - y0, x1 - x0, chans)
            if is_damaged:
                debris = 0.1 * roof + 0.9 * np.asarray(tex.debris[:chans])
                image[y0:y1, x0:x1] = debris + rng.normal(0.0, tex.debris_std, size=patch_shape)
                damage[y0:y1, x0:x1] = 1
            else:
                image[y0:y1, x0:x1] = roof + rng.normal(0.0, tex.roof_std, size=patch_shape)
            footprint[y0:y1, x0:x1] = 1
            poly = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            buildings.append(Building(j + 1, poly, is_damaged))
        tiles.append(
            TileRecord(
                tile_id=f"{spec.name}_{t:04d}",
                region=spec.name,
                image=np.clip(image, 0.0, 1.0).astype(np.float32),
                damage_mask=damage,
                footprint_mask=footprint,
                labeled=True,
                buildings=buildings,
                origin=((t // cols) * size, (t % cols) * size),
            )
        )
    return tiles


@dataclass
class Dataset:
    tiles: list[TileRecord]
    regions: list[str]
    specs: list[RegionSpec] = field(default_factory=list)

    def __post_init__(self):
        self.tiles = sorted(self.tiles, key=lambda t: t.tile_id)
        seen = set()
        for t in self.tiles:
            if t.tile_id in seen:
                raise DatasetError(f"duplicate tile_id {t.tile_id}")
            seen.add(t.tile_id)
            if t.region not in self.regions:
                raise DatasetError(f"tile {t.tile_id} names unknown region {t.region}")

    def region_tiles(self, region: str, labeled_only: bool = True) -> list[TileRecord]:
        return [t for t in self.tiles if t.region == region and (t.labeled or not labeled_only)]

    def labeled(self) -> list[TileRecord]:
        return [t for t in self.tiles if t.labeled]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.regions == other.regions and self.tiles == other.tiles


def generate_dataset(
    specs: Sequence[RegionSpec],
    seed: int,
    config: GeneratorConfig | None = None,
    threads: int = 1,
) -> Dataset:
    def one(spec):
        return generate_region(spec, seed, config)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, specs))
    else:
        parts = [one(s) for s in specs]
    tiles = [t for part in parts for t in part]
    return Dataset(tiles, [s.name for s in specs], list(specs))


# Nine regions whose relative density and damage spread follow the study area
# table (buildings per km^2, labeled-building share); absolute values are desk scale.
_NINE = [
    ("Gaziantep", 6.0, 0.15, 2, TextureParams((0.64, 0.61, 0.50), (0.72, 0.42, 0.33), (0.46, 0.52, 0.64))),
    ("Hatay", 3.5, 0.30, 3, TextureParams((0.56, 0.58, 0.44), (0.66, 0.36, 0.30), (0.44, 0.50, 0.62))),
    ("Kahramanmaras", 6.0, 0.45, 3, TextureParams((0.62, 0.56, 0.40), (0.74, 0.40, 0.32), (0.48, 0.52, 0.66))),
    ("Kirikhan", 5.0, 0.30, 2, TextureParams((0.58, 0.54, 0.40), (0.68, 0.44, 0.36), (0.45, 0.53, 0.63))),
    ("Nurdagi", 3.0, 0.45, 2, TextureParams((0.54, 0.56, 0.42), (0.70, 0.34, 0.28), (0.47, 0.51, 0.65))),
    ("Sakcagozu", 3.0, 0.35, 1, TextureParams((0.66, 0.62, 0.46), (0.66, 0.40, 0.34), (0.49, 0.54, 0.66))),
    ("Satirhuyuk", 2.5, 0.35, 1, TextureParams((0.60, 0.60, 0.46), (0.72, 0.38, 0.30), (0.45, 0.52, 0.62))),
    ("Sekeroba", 2.5, 0.25, 2, TextureParams((0.56, 0.52, 0.38), (0.64, 0.42, 0.36), (0.44, 0.49, 0.60))),
    ("Turkoglu", 3.0, 0.30, 2, TextureParams((0.63, 0.59, 0.45), (0.70, 0.36, 0.31), (0.46, 0.52, 0.63))),
]

# short names used for the default source combinations
ABBREVIATIONS = {"Kah": "Kahramanmaras", "Nur": "Nurdagi", "Hat": "Hatay"}


def default_regions(count: int = 9, tile_count: int = 40) -> list[RegionSpec]:
    """The first ``count`` default regions; the first four are Kah, Nur, Hat, Gaz."""
    if not 1 <= count <= len(_NINE):
        raise ValueError(f"region count must be in 1..{len(_NINE)}, got {count}")
    order = [2, 4, 1, 0, 3, 5, 6, 7, 8]
    specs = []
    for i in order[:count]:
        name, density, rate, clusters, tex = _NINE[i]
        specs.append(RegionSpec(name, density, rate, clusters, tex, tile_count))
    return specs


# -- folds ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    fold_count: int
    assignments: dict[str, int]
    strata: dict[str, tuple[str, bool]]

    def fold(self, k: int) -> list[str]:
        return sorted(t for t, f in self.assignments.items() if f == k)

    def train_ids(self, k: int) -> list[str]:
        return sorted(t for t, f in self.assignments.items() if f != k)


def plan_folds(tiles: Sequence[TileRecord], fold_count: int, seed: int) -> FoldPlan:
    """Stratify on (region, has_damage) and deal each stratum round-robin.

    The dealing position carries over between strata, so fold totals and
    per-region totals also stay within one of each other.
    """
    if fold_count < 2:
        raise ValueError(f"fold_count must be >= 2, got {fold_count}")
    if not tiles:
        raise ValueError("cannot plan folds over an empty tile list")
    strata = {t.tile_id: (t.region, t.has_damage) for t in tiles}
    groups: dict[tuple[str, bool], list[str]] = defaultdict(list)
    for tid, key in sorted(strata.items()):
        groups[key].append(tid)
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    cursor = 0
    for key in sorted(groups):
        ids = groups[key]
        if len(ids) < fold_count:
            warnings.warn(
                f"stratum {key} has {len(ids)} tiles for {fold_count} folds; some folds get none",
                stacklevel=2,
            )
        for tid in (ids[i] for i in rng.permutation(len(ids))):
            assignments[tid] = cursor % fold_count
            cursor += 1
    return FoldPlan(fold_count, assignments, strata)


def subsample(tiles: Sequence[TileRecord], ratio: float, seed: int) -> list[TileRecord]:
    """Keep ``ceil(ratio * n)`` tiles of every (region, has_damage) stratum."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    groups: dict[tuple[str, bool], list[TileRecord]] = defaultdict(list)
    for t in sorted(tiles, key=lambda t: t.tile_id):
        groups[(t.region, t.has_damage)].append(t)
    if ratio == 1.0:
        return sorted(tiles, key=lambda t: t.tile_id)
    rng = np.random.default_rng(seed)
    keep = []
    for key in sorted(groups):
        members = groups[key]
        n = math.ceil(ratio * len(members))
        keep += [members[i] for i in sorted(rng.permutation(len(members))[:n])]
    return sorted(keep, key=lambda t: t.tile_id)


# -- I/O -----------------------------------------------------------------------------


def save_dataset(dataset: Dataset, root: str | os.PathLike) -> None:
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    index = []
    for t in dataset.tiles:
        h, w, c = t.image.shape
        stem = root / "tiles" / t.tile_id
        Path(f"{stem}.img").write_bytes(np.ascontiguousarray(t.image, dtype="<f4").tobytes())
        write_pgm(f"{stem}.dmg.pgm", t.damage_mask, 1)
        write_pgm(f"{stem}.fpt.pgm", t.footprint_mask, 1)
        if t.buildings:
            payload = {
                "buildings": [
                    {"id": b.id, "polygon": [list(p) for p in b.polygon], "damaged": b.damaged}
                    for b in t.buildings
                ]
            }
            Path(f"{stem}.bld.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
        index.append(
            {
                "tile_id": t.tile_id,
                "region": t.region,
                "labeled": bool(t.labeled),
                "shape": [h, w, c],
                "origin": list(t.origin),
            }
        )
    manifest = {
        "version": FORMAT_VERSION,
        "regions": list(dataset.regions),
        "region_specs": [s.to_json() for s in dataset.specs],
        "tiles": index,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _load_tile(root: Path, entry: dict) -> TileRecord:
    tid = entry["tile_id"]
    stem = root / "tiles" / tid
    img_path = Path(f"{stem}.img")
    if not img_path.exists():
        raise DatasetError(f"{img_path}: missing image for tile {tid}")
    h, w, c = entry["shape"]
    raw = img_path.read_bytes()
    if len(raw) != 4 * h * w * c:
        raise DatasetError(f"{img_path}: {len(raw)} bytes does not match shape {h}x{w}x{c} of tile {tid}")
    image = np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float32)
    masks = []
    for suffix in ("dmg", "fpt"):
        path = Path(f"{stem}.{suffix}.pgm")
        if not path.exists():
            raise DatasetError(f"{path}: missing mask for tile {tid}")
        try:
            arr, maxval = read_pgm(path)
        except PnmError as exc:
            raise DatasetError(str(exc)) from None
        if arr.shape != (h, w):
            raise DatasetError(f"{path}: mask shape {arr.shape} does not match image {h}x{w} of tile {tid}")
        if maxval != 1 or arr.max(initial=0) > 1:
            raise DatasetError(f"{path}: mask of tile {tid} is not binary")
        masks.append(arr.astype(np.uint8))
    buildings = []
    bld = Path(f"{stem}.bld.json")
    if bld.exists():
        for b in json.loads(bld.read_text())["buildings"]:
            buildings.append(Building(int(b["id"]), [tuple(p) for p in b["polygon"]], bool(b.get("damaged", False))))
    return TileRecord(
        tid,
        entry["region"],
        image,
        masks[0],
        masks[1],
        bool(entry.get("labeled", True)),
        buildings,
        tuple(entry.get("origin", (0, 0))),
    )


def load_dataset(root: str | os.PathLike, threads: int = 1) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: missing manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON ({exc})") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: unknown dataset version {manifest.get('version')!r}")
    entries = manifest.get("tiles", [])
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            tiles = list(pool.map(lambda e: _load_tile(root, e), entries))
    else:
        tiles = [_load_tile(root, e) for e in entries]
    specs = [RegionSpec.from_json(s) for s in manifest.get("region_specs", [])]
    return Dataset(tiles, list(manifest["regions"]), specs)


def region_table(dataset: Dataset) -> list[dict]:
    """Per-region tile and building counts, shaped like a dataset statistics table."""
    rows = []
    for region in dataset.regions:
        tiles = [t for t in dataset.tiles if t.region == region]
        labeled = [t for t in tiles if t.labeled]
        rows.append(
            {
                "region": region,
                "tiles": len(tiles),
                "buildings": sum(len(t.buildings) for t in tiles),
                "labeled_tiles": len(labeled),
                "damaged_buildings": sum(b.damaged for t in labeled for b in t.buildings),
            }
        )
    return rows


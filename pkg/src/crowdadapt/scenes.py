"""Deterministic synthetic multi-scene crowd benchmark.

A scene fixes the global appearance (background texture, brightness,
contrast, person size and perspective, crowd-size range, person darkness);
images within a scene differ only in where people stand and how many there
are. People are drawn as dark anti-aliased ellipses whose top-centre is the
annotated head point.

On-disk layout (one directory per scene)::

    <root>/<scene_id>/img_<k>.pgm          binary PGM (P5), 8-bit
    <root>/<scene_id>/annotations.json     {"scene_id", "params", "images": [{"file", "heads"}]}

Density maps are always derived from the head points, never stored.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod

DOWNSAMPLE = 8
BACKGROUND_LEVEL = 0.65
BACKGROUND_TEXTURE = 0.08
BODY_HALF_WIDTH = 0.6  # ellipse semi-axes as multiples of the person radius
BODY_HALF_HEIGHT = 1.2


@dataclass(frozen=True)
class SceneParams:
    scene_id: str
    bg_seed: int
    brightness: float = 0.0
    contrast: float = 1.0
    base_radius: float = 3.0
    perspective_slope: float = 1.0
    count_range: tuple[int, int] = (10, 20)
    blob_intensity: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "count_range", tuple(int(c) for c in self.count_range))
        checks = [
            (-0.2 <= self.brightness <= 0.2, "brightness must lie in [-0.2, 0.2]"),
            (0.8 <= self.contrast <= 1.2, "contrast must lie in [0.8, 1.2]"),
            (2.0 <= self.base_radius <= 5.0, "base_radius must lie in [2, 5]"),
            (0.0 <= self.perspective_slope <= 4.0, "perspective_slope must lie in [0, 4]"),
            (3 <= self.count_range[0] <= self.count_range[1] <= 40, "count_range must satisfy 3 <= lo <= hi <= 40"),
            (0.3 <= self.blob_intensity <= 0.9, "blob_intensity must lie in [0.3, 0.9]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"scene {self.scene_id}: {msg}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["count_range"] = list(self.count_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        return cls(**d)


@dataclass(frozen=True)
class DensityConfig:
    sigma_dm: float = 1.0
    truncation: float = 4.0  # window half-width in units of sigma
    renormalize: bool = True

    def __post_init__(self):
        if self.sigma_dm <= 0:
            raise ValueError("sigma_dm must be positive")


@dataclass
class SceneDataset:
    params: SceneParams
    images: list[np.ndarray]  # each [1, H, W] in [0, 1]
    heads: list[np.ndarray]  # each [n, 2] of (x, y) pixel coordinates
    density_maps: list[np.ndarray] = field(default_factory=list)  # each [1, H/8, W/8]

    @property
    def scene_id(self) -> str:
        return self.params.scene_id

    def __len__(self) -> int:
        return len(self.images)

    def counts(self) -> list[int]:
        return [len(h) for h in self.heads]


def sample_scene_params(scene_id: str, seed: int) -> SceneParams:
    g = rngmod.stream(seed, f"scene-params/{scene_id}")
    lo = int(g.integers(3, 31))
    hi = min(40, lo + int(g.integers(0, 11)))
    return SceneParams(
        scene_id=scene_id,
        bg_seed=int(g.integers(0, 2**31 - 1)),
        brightness=float(g.uniform(-0.2, 0.2)),
        contrast=float(g.uniform(0.8, 1.2)),
        base_radius=float(g.uniform(2.0, 5.0)),
        perspective_slope=float(g.uniform(0.0, 4.0)),
        count_range=(lo, hi),
        blob_intensity=float(g.uniform(0.3, 0.9)),
    )


def _background(bg_seed: int, shape: tuple[int, int]) -> np.ndarray:
    H, W = shape
    g = rngmod.stream(bg_seed, "background")
    coarse = g.uniform(-1.0, 1.0, size=(H // 8 + 2, W // 8 + 2))
    # bilinear upsampling of a coarse noise grid gives a smooth texture
    ys = (np.arange(H) + 0.5) / 8.0
    xs = (np.arange(W) + 0.5) / 8.0
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    tex = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    return BACKGROUND_LEVEL + BACKGROUND_TEXTURE * tex


def person_radius(params: SceneParams, row: float, height: int) -> float:
    return params.base_radius + params.perspective_slope * row / height


def render_image(params: SceneParams, heads: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Render one frame [1, H, W], quantised to 8-bit levels."""
    H, W = shape
    img = _background(params.bg_seed, shape)
    py = np.arange(H)[:, None] + 0.5
    px = np.arange(W)[None, :] + 0.5
    for x, y in heads:
        r = person_radius(params, y, H)
        a, b = BODY_HALF_WIDTH * r, BODY_HALF_HEIGHT * r
        cx, cy = x, y + b
        y_lo, y_hi = max(0, int(cy - b) - 1), min(H, int(cy + b) + 2)
        x_lo, x_hi = max(0, int(cx - a) - 1), min(W, int(cx + a) + 2)
        if y_lo >= y_hi or x_lo >= x_hi:
            continue
        q = np.sqrt(((px[:, x_lo:x_hi] - cx) / a) ** 2 + ((py[y_lo:y_hi] - cy) / b) ** 2)
        # ~1px soft edge: coverage ramps from 1 inside to 0 outside
        coverage = np.clip((1.0 - q) * min(a, b) + 0.5, 0.0, 1.0)
        img[y_lo:y_hi, x_lo:x_hi] *= 1.0 - params.blob_intensity * coverage
    img = (img - 0.5) * params.contrast + 0.5 + params.brightness
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0)[None]


def density_from_heads(heads: Sequence, map_shape: tuple[int, int], downsample: int = DOWNSAMPLE,
                       cfg: DensityConfig = DensityConfig()) -> np.ndarray:
    """Ground-truth density map [1, h, w]: one truncated Gaussian per head.

    Head ``(x, y)`` in image pixels lands at ``(x / downsample, y / downsample)``
    in map coordinates; map pixel ``(i, j)`` has its centre at ``(j + 0.5, i + 0.5)``.
    With ``renormalize`` every kernel sums to exactly one.
    """
    h, w = map_shape
    out = np.zeros((h, w), dtype=np.float64)
    sigma = cfg.sigma_dm
    radius = cfg.truncation * sigma
    for x, y in heads:
        if not (0 <= x < w * downsample and 0 <= y < h * downsample):
            raise ValueError(f"head ({x}, {y}) outside image of size {h * downsample}x{w * downsample}")
        u, v = x / downsample, y / downsample
        j_lo, j_hi = max(0, int(np.floor(u - radius))), min(w, int(np.ceil(u + radius)) + 1)
        i_lo, i_hi = max(0, int(np.floor(v - radius))), min(h, int(np.ceil(v + radius)) + 1)
        dx = np.arange(j_lo, j_hi) + 0.5 - u
        dy = np.arange(i_lo, i_hi) + 0.5 - v
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        k = np.exp(-d2 / (2 * sigma * sigma))
        k[d2 > radius * radius] = 0.0
        total = k.sum()
        if cfg.renormalize:
            k /= total
        else:
            k /= 2 * np.pi * sigma * sigma
        out[i_lo:i_hi, j_lo:j_hi] += k
    return out[None]


def _check_shape(image_shape: tuple[int, int]) -> None:
    H, W = image_shape
    if H < DOWNSAMPLE or W < DOWNSAMPLE or H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ValueError(f"image size {H}x{W} must be positive multiples of {DOWNSAMPLE}")


def gen_scene(params: SceneParams, n_images: int, image_shape: tuple[int, int], seed: int,
              density_cfg: DensityConfig = DensityConfig()) -> SceneDataset:
    if n_images < 2:
        raise ValueError("a scene needs at least 2 images (one unlabeled, one labeled)")
    _check_shape(image_shape)
    H, W = image_shape
    g = rngmod.stream(seed, f"scene/{params.scene_id}/images")
    lo, hi = params.count_range
    images, heads = [], []
    for _ in range(n_images):
        n = int(g.integers(lo, hi + 1))
        pts = np.stack([g.uniform(0.0, W, size=n), g.uniform(0.0, H, size=n)], axis=1)
        # uniform() is half-open, but guard against rounding onto the far edge
        pts = np.minimum(pts, np.nextafter(np.array([W, H], dtype=np.float64), 0))
        heads.append(pts)
        images.append(render_image(params, pts, image_shape))
    ds = SceneDataset(params, images, heads)
    attach_density(ds, density_cfg)
    return ds


def attach_density(ds: SceneDataset, cfg: DensityConfig = DensityConfig()) -> SceneDataset:
    H, W = ds.images[0].shape[-2:]
    ds.density_maps = [density_from_heads(h, (H // DOWNSAMPLE, W // DOWNSAMPLE), DOWNSAMPLE, cfg) for h in ds.heads]
    return ds


def scene_ids(n: int) -> list[str]:
    return [f"scene_{i:03d}" for i in range(n)]


def gen_benchmark(n_scenes: int, n_images: int, image_shape: tuple[int, int], seed: int) -> list[SceneDataset]:
    return [gen_scene(sample_scene_params(sid, seed), n_images, image_shape, seed) for sid in scene_ids(n_scenes)]


def split_scenes(all_scenes: Sequence, n_train: int, seed: int) -> tuple[list, list]:
    """Partition whole scenes (never images) into train/test, deterministically."""
    total = len(all_scenes)
    if not 0 < n_train < total:
        raise ValueError(f"n_train must lie in [1, {total - 1}], got {n_train}")
    order = rngmod.stream(seed, "split").permutation(total)
    chosen = set(int(i) for i in order[:n_train])
    train = [s for i, s in enumerate(all_scenes) if i in chosen]
    test = [s for i, s in enumerate(all_scenes) if i not in chosen]
    return train, test


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def write_pgm(path: os.PathLike, image: np.ndarray) -> None:
    arr = np.asarray(image).reshape(image.shape[-2:])
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: os.PathLike) -> np.ndarray:
    """Read an 8-bit binary PGM as a [1, H, W] float array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=H * W, offset=pos).reshape(H, W)
    return (data.astype(np.float64) / 255.0)[None]


def write_scene(root: os.PathLike, ds: SceneDataset) -> Path:
    d = Path(root) / ds.scene_id
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (img, pts) in enumerate(zip(ds.images, ds.heads)):
        name = f"img_{k}.pgm"
        write_pgm(d / name, img)
        entries.append({"file": name, "heads": [[float(x), float(y)] for x, y in pts]})
    doc = {"scene_id": ds.scene_id, "params": ds.params.to_dict(), "images": entries}
    (d / "annotations.json").write_text(json.dumps(doc, indent=1) + "\n")
    return d


def read_scene(scene_dir: os.PathLike, density_cfg: DensityConfig = DensityConfig()) -> SceneDataset:
    d = Path(scene_dir)
    doc = json.loads((d / "annotations.json").read_text())
    params = SceneParams.from_dict(doc["params"])
    images, heads = [], []
    for entry in doc["images"]:
        images.append(read_pgm(d / entry["file"]))
        heads.append(np.asarray(entry["heads"], dtype=np.float64).reshape(-1, 2))
    ds = SceneDataset(params, images, heads)
    return attach_density(ds, density_cfg)


def read_dataset(root: os.PathLike, density_cfg: DensityConfig = DensityConfig()) -> list[SceneDataset]:
    """Load every scene listed in ``manifest.json`` (or every scene dir, sorted)."""
    root = Path(root)
    manifest = root / "manifest.json"
    if manifest.exists():
        ids = json.loads(manifest.read_text())["scenes"]
    else:
        ids = sorted(p.name for p in root.iterdir() if (p / "annotations.json").exists())
    return [read_scene(root / sid, density_cfg) for sid in ids]

"""Synthetic layered scenes, dataset generation and split construction.

A scene is a stack of horizontal strata separated by smooth sinusoidal
boundaries, with per-class elliptical blobs painted on top in a shuffled
order (the later draw wins overlaps).  Blobs carry a class-specific
intensity level and channel tint so classes stay distinguishable under
photometric jitter.  A volume fixes the stratum geometry and blob layout;
its scans re-render that sketch with small per-scan jitter, fresh channel
gains and fresh noise.

Record seeds derive from SeedSequence([dataset_seed, volume, scan]), so any
record can be regenerated in isolation.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .supervision import boxes_to_boxmask, derive_boxes, derive_global, encode_mask
from .tensorio import load_tensor, save_tensor

MANIFEST_VERSION = 1
SPLITS_VERSION = 1

_CLASS_LEVELS = (0.95, 0.05, 0.6, 0.8, 0.25)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    channels: int = 3
    num_fg_classes: int = 3
    layer_count_range: tuple = (3, 6)
    layer_intensity_range: tuple = (0.15, 0.85)
    boundary_amplitude: float = 2.5
    blob_count_range: tuple = (2, 2)
    blob_axes_range: tuple = (7.0, 12.0)
    blob_blend: float = 0.85
    noise_sigma: float = 0.04

    def validate(self):
        if self.channels != 3:
            raise ConfigError("scenes are 3-channel; tints and hue jitter need RGB")
        if self.height < 8 or self.width < 8:
            raise ConfigError("scene must be at least 8x8")
        if self.num_fg_classes < 1:
            raise ConfigError("need at least one foreground class")
        for lo, hi in (self.layer_count_range, self.blob_count_range,
                       self.layer_intensity_range, self.blob_axes_range):
            if lo > hi:
                raise ConfigError("range fields must be (low, high) with low <= high")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    @property
    def num_classes(self) -> int:
        """Total channels including background."""
        return self.num_fg_classes + 1


def _class_tint(c: int) -> np.ndarray:
    t = np.full(3, -0.12)
    t[c % 3] = 0.25
    return t


def _sample_sketch(cfg: SceneConfig, rng: np.random.Generator) -> dict:
    n_b = int(rng.integers(cfg.layer_count_range[0], cfg.layer_count_range[1] + 1))
    rows = np.sort(rng.uniform(0.1 * cfg.height, 0.9 * cfg.height, n_b))
    lo, hi = cfg.layer_intensity_range
    blobs = []
    for c in range(cfg.num_fg_classes):
        k = int(rng.integers(cfg.blob_count_range[0], cfg.blob_count_range[1] + 1))
        for _ in range(k):
            blobs.append({
                "cls": c,
                "cy": float(rng.uniform(0.15 * cfg.height, 0.85 * cfg.height)),
                "cx": float(rng.uniform(0.15 * cfg.width, 0.85 * cfg.width)),
                "a": float(rng.uniform(*cfg.blob_axes_range)),
                "b": float(rng.uniform(*cfg.blob_axes_range)),
                "theta": float(rng.uniform(0.0, np.pi)),
            })
    # draw order decides who wins overlaps; shuffle so no class always loses
    rng.shuffle(blobs)
    return {
        "rows": rows,
        "amps": rng.uniform(0.0, cfg.boundary_amplitude, n_b),
        "freqs": rng.uniform(0.5, 2.0, n_b),
        "phases": rng.uniform(0.0, 2.0 * np.pi, n_b),
        "intensities": rng.uniform(lo, hi, n_b + 1),
        "blobs": blobs,
    }


def _jitter_sketch(sketch: dict, cfg: SceneConfig, rng: np.random.Generator) -> dict:
    n_b = len(sketch["rows"])
    out = {
        "rows": sketch["rows"] + rng.normal(0.0, 1.0, n_b),
        "amps": sketch["amps"],
        "freqs": sketch["freqs"],
        "phases": sketch["phases"] + rng.normal(0.0, 0.15, n_b),
        "intensities": np.clip(sketch["intensities"] + rng.normal(0.0, 0.02, n_b + 1),
                               0.02, 0.98),
        "blobs": [],
    }
    for blob in sketch["blobs"]:
        keep = rng.random() < 0.9
        jb = {
            "cls": blob["cls"],
            "cy": blob["cy"] + float(rng.normal(0.0, 1.5)),
            "cx": blob["cx"] + float(rng.normal(0.0, 1.5)),
            "a": blob["a"] * float(rng.uniform(0.9, 1.1)),
            "b": blob["b"] * float(rng.uniform(0.9, 1.1)),
            "theta": blob["theta"] + float(rng.normal(0.0, 0.1)),
        }
        if keep:  # drawn either way to keep the stream position fixed
            out["blobs"].append(jb)
    return out


def _blur3(a: np.ndarray) -> np.ndarray:
    """Separable 3-tap (1,2,1)/4 smoothing with edge clamping."""
    p = np.pad(a, ((1, 1), (0, 0)), mode="edge")
    a = (p[:-2] + 2.0 * p[1:-1] + p[2:]) * 0.25
    p = np.pad(a, ((0, 0), (1, 1)), mode="edge")
    return (p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]) * 0.25


def _render(cfg: SceneConfig, sketch: dict, rng: np.random.Generator):
    h, w = cfg.height, cfg.width
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    curves = (sketch["rows"][:, None]
              + sketch["amps"][:, None]
              * np.sin(2.0 * np.pi * sketch["freqs"][:, None] * xs / w
                       + sketch["phases"][:, None]))  # (n_b, W)
    band = (ys[None, :, :] >= curves[:, None, :]).sum(axis=0)
    gray = _blur3(sketch["intensities"][band])

    grid = np.full((h, w), cfg.num_fg_classes, dtype=np.uint8)  # background
    tint = np.zeros((3, h, w))
    for blob in sketch["blobs"]:
        dy, dx = ys - blob["cy"], xs - blob["cx"]
        ct, st = np.cos(blob["theta"]), np.sin(blob["theta"])
        u = (dx * ct + dy * st) / blob["a"]
        v = (-dx * st + dy * ct) / blob["b"]
        mask = u * u + v * v <= 1.0
        grid[mask] = blob["cls"]
        level = _CLASS_LEVELS[blob["cls"] % len(_CLASS_LEVELS)]
        gray[mask] = (1.0 - cfg.blob_blend) * gray[mask] + cfg.blob_blend * level
        tint[:, mask] = _class_tint(blob["cls"])[:, None]

    gains = rng.uniform(0.95, 1.05, 3)
    img = gray[None] * gains[:, None, None] + tint
    img = img + rng.normal(0.0, cfg.noise_sigma, (3, h, w))
    return np.clip(img, 0.0, 1.0), grid


def generate_scene(cfg: SceneConfig, rng: np.random.Generator):
    """One standalone scene: (image (3,H,W) in [0,1], class grid (H,W))."""
    cfg.validate()
    sketch = _sample_sketch(cfg, rng)
    return _render(cfg, sketch, rng)


def generate_scan(cfg: SceneConfig, dataset_seed: int, volume: int, scan: int):
    """Render one volume scan reproducibly from its (seed, volume, scan) triple."""
    sketch = _sample_sketch(cfg, np.random.default_rng(
        np.random.SeedSequence([dataset_seed, volume])))
    rng = np.random.default_rng(np.random.SeedSequence([dataset_seed, volume, scan]))
    return _render(cfg, _jitter_sketch(sketch, cfg, rng), rng)


def config_hash(cfg: SceneConfig, seed: int, n_volumes: int, scans_per_volume: int) -> str:
    payload = json.dumps(
        {"scene": asdict(cfg), "seed": seed, "n_volumes": n_volumes,
         "scans_per_volume": scans_per_volume},
        sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def _prep_threads() -> int:
    raw = os.environ.get("FLUIDSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FLUIDSEG_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def generate_dataset(cfg: SceneConfig, out_dir, seed: int = 0,
                     n_volumes: int = 24, scans_per_volume: int = 8) -> dict:
    """Write images, masks and manifest.json under out_dir; returns the manifest.

    FLUIDSEG_THREADS caps generation parallelism (volumes are independent and
    seeded individually, so the output is identical at any thread count).
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def build_volume(v: int):
        vol_dir = out / f"vol{v:02d}"
        vol_dir.mkdir(exist_ok=True)
        recs = []
        for s in range(scans_per_volume):
            img, grid = generate_scan(cfg, seed, v, s)
            img_rel = f"vol{v:02d}/scan{s:02d}.img.ften"
            mask_rel = f"vol{v:02d}/scan{s:02d}.mask.ften"
            save_tensor(out / img_rel, img)
            save_tensor(out / mask_rel, grid.astype(np.uint8))
            onehot = encode_mask(grid, cfg.num_classes)
            recs.append({
                "volume": v,
                "scan": s,
                "image": img_rel,
                "mask": mask_rel,
                "boxes": [list(b) for b in derive_boxes(onehot)],
                "global_label": derive_global(onehot).tolist(),
            })
        return recs

    threads = _prep_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_volume = list(pool.map(build_volume, range(n_volumes)))
    else:
        per_volume = [build_volume(v) for v in range(n_volumes)]

    records = []
    for recs in per_volume:
        for r in recs:
            r["id"] = len(records)
            records.append(r)

    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "n_volumes": n_volumes,
        "scans_per_volume": scans_per_volume,
        "num_classes": cfg.num_classes,
        "height": cfg.height,
        "width": cfg.width,
        "scene_config": asdict(cfg),
        "config_hash": config_hash(cfg, seed, n_volumes, scans_per_volume),
        "records": records,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


@dataclass
class LoadedRecord:
    id: int
    volume: int
    scan: int
    image: np.ndarray        # (3,H,W) float64
    grid: np.ndarray         # (H,W) int
    onehot: np.ndarray       # (C,H,W) uint8
    boxes: list
    boxmask: np.ndarray      # (C,H,W) uint8
    global_label: np.ndarray  # (C,) uint8


@dataclass
class Dataset:
    num_classes: int
    height: int
    width: int
    records: list
    manifest: dict

    def __len__(self):
        return len(self.records)


def load_dataset(data_dir) -> Dataset:
    """Load every record referenced by manifest.json into memory."""
    root = Path(data_dir)
    mf_path = root / "manifest.json"
    if not mf_path.exists():
        raise DataError(f"no manifest.json under {root}")
    with open(mf_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('format_version')}")
    c = manifest["num_classes"]
    h, w = manifest["height"], manifest["width"]
    records = []
    for r in manifest["records"]:
        img = load_tensor(root / r["image"]).astype(np.float64)
        grid = load_tensor(root / r["mask"]).astype(np.int64)
        if img.shape != (3, h, w) or grid.shape != (h, w):
            raise DataError(f"record {r['id']}: tensor shapes disagree with manifest")
        onehot = encode_mask(grid, c)
        boxes = [tuple(b) for b in r["boxes"]]
        records.append(LoadedRecord(
            id=r["id"], volume=r["volume"], scan=r["scan"], image=img, grid=grid,
            onehot=onehot, boxes=boxes,
            boxmask=boxes_to_boxmask(boxes, c, h, w),
            global_label=np.asarray(r["global_label"], dtype=np.uint8),
        ))
    if [r.id for r in records] != list(range(len(records))):
        raise DataError("manifest record ids must be 0..N-1 in order")
    return Dataset(num_classes=c, height=h, width=w, records=records, manifest=manifest)


def verify_manifest(dataset: Dataset) -> list:
    """Re-derive weak annotations from masks; returns a list of mismatches."""
    problems = []
    for r in dataset.records:
        if sorted(derive_boxes(r.onehot)) != sorted(r.boxes):
            problems.append(f"record {r.id}: stored boxes disagree with mask")
        if not np.array_equal(derive_global(r.onehot), r.global_label):
            problems.append(f"record {r.id}: stored global label disagrees with mask")
    return problems


@dataclass
class SplitSpec:
    """One train/val/test partition with a coverage-ordered training list.

    ordered_train holds record ids; annotation budgets are prefixes of it, so
    smaller budgets are nested in larger ones.  coverage_gaps records the
    (position, class) pairs where no remaining scan could complete the
    window-of-3 class coverage rule.
    """

    split_id: int
    val_volumes: list
    test_volumes: list
    train_volumes: list
    ordered_train: list
    budgets: tuple
    coverage_gaps: list = field(default_factory=list)


def _order_for_coverage(rec_ids, presence, num_fg, start_rot: int = 0):
    """Greedy ordering: every window of 3 covers all classes when possible.

    presence maps record id to a frozenset of foreground classes.  Ties are
    broken by a rotating preferred class, then by position in the incoming
    list.  Returns (order, gaps).
    """
    remaining = list(rec_ids)
    all_classes = frozenset(range(num_fg))
    order, gaps = [], []
    pos = 0
    while remaining:
        prev = frozenset()
        for r in order[-2:]:
            prev |= presence[r]
        needed = all_classes - prev
        full = [r for r in remaining if needed <= presence[r]]
        pool = full
        if not pool:
            best = max(len(presence[r] & needed) for r in remaining)
            pool = [r for r in remaining if len(presence[r] & needed) == best]
        rot = (start_rot + pos) % num_fg
        preferred = [r for r in pool if rot in presence[r]]
        pick = (preferred or pool)[0]
        remaining.remove(pick)
        order.append(pick)
        if pos >= 2:
            window = presence[order[-1]] | presence[order[-2]] | presence[order[-3]]
            for c in sorted(all_classes - window):
                gaps.append((pos, c))
        pos += 1
    return order, gaps


def make_splits(dataset: Dataset, n_splits: int = 10, n_val: int = 5, n_test: int = 5,
                budgets=(3, 6, 12, 24), seed: int = 0) -> list:
    """Independent volume-level partitions with coverage-ordered train scans."""
    n_volumes = dataset.manifest["n_volumes"]
    if n_val + n_test >= n_volumes:
        raise ConfigError("val + test volumes must leave at least one train volume")
    by_volume = {}
    presence = {}
    for r in dataset.records:
        by_volume.setdefault(r.volume, []).append(r.id)
        presence[r.id] = frozenset(np.nonzero(r.global_label[:-1])[0].tolist())
    splits = []
    for k in range(n_splits):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        perm = rng.permutation(n_volumes).tolist()
        val_v, test_v = sorted(perm[:n_val]), sorted(perm[n_val : n_val + n_test])
        train_v = sorted(perm[n_val + n_test :])
        train_ids = [rid for v in train_v for rid in by_volume[v]]
        order, gaps = _order_for_coverage(train_ids, presence,
                                          dataset.num_classes - 1, start_rot=k)
        budgets_t = tuple(sorted(budgets))
        if budgets_t and budgets_t[-1] > len(order):
            raise ConfigError(f"budget {budgets_t[-1]} exceeds {len(order)} train scans")
        splits.append(SplitSpec(
            split_id=k, val_volumes=val_v, test_volumes=test_v, train_volumes=train_v,
            ordered_train=order, budgets=budgets_t,
            coverage_gaps=[list(g) for g in gaps]))
    return splits


def save_splits(splits, path, seed: int):
    payload = {
        "format_version": SPLITS_VERSION,
        "seed": seed,
        "splits": [asdict(s) for s in splits],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def load_splits(path) -> list:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format_version") != SPLITS_VERSION:
        raise FormatError(f"unsupported splits version {payload.get('format_version')}")
    out = []
    for s in payload["splits"]:
        s = dict(s)
        s["budgets"] = tuple(s["budgets"])
        s["coverage_gaps"] = [tuple(g) for g in s["coverage_gaps"]]
        out.append(SplitSpec(**s))
    return out

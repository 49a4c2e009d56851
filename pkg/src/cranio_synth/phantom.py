"""Procedural skull phantoms with five defect classes.

A phantom skull is an ellipsoidal shell (outer ellipsoid minus a concentric
inner one). Defects are carved by intersecting the shell with one or more
spheres whose placement depends on the defect class. Axis convention for the
``(depth, height, width)`` grid: depth runs superior (0) to inferior, height
runs anterior (0) to posterior, width runs left to right; the mid-sagittal
plane is the width-axis centre.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import voxel as vx

MAX_CUT_RETRIES = 20
CUT_RADIUS_RANGE = (0.15, 0.35)


class DefectClass(str, enum.Enum):
    BILATERAL = "bilateral"
    FRONTOORBITAL = "frontoorbital"
    PARIETOTEMPORAL = "parietotemporal"
    RANDOM_1 = "random_1"
    RANDOM_2 = "random_2"


DEFECT_CLASSES = tuple(DefectClass)
SPLITS = ("train", "validation", "test")


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    resolution: int = 32
    outer_radii: tuple[float, float, float] = (11.5, 12.5, 10.6)
    shell_thickness: float = 2.5
    center_jitter: float = 1.0
    radii_jitter_fraction: float = 0.08
    seed: int = 0

    @classmethod
    def for_resolution(cls, resolution: int, seed: int = 0, **overrides) -> "PhantomParams":
        """Defaults that fill ``resolution`` while honouring the 1-voxel margin."""
        center_jitter = overrides.get("center_jitter", resolution / 32.0)
        jitter = overrides.get("radii_jitter_fraction", cls.radii_jitter_fraction)
        r_max = ((resolution - 1) / 2.0 - 1.0 - center_jitter) / (1.0 + jitter)
        base = dict(
            resolution=resolution,
            outer_radii=(0.92 * r_max, r_max, 0.85 * r_max),
            shell_thickness=max(1.5, resolution / 13.0),
            center_jitter=center_jitter,
            seed=seed,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.resolution < 4:
            raise PhantomError("resolution must be at least 4")
        if self.shell_thickness < 1.0:
            raise PhantomError("shell_thickness must be at least 1 voxel")
        if not 0.0 <= self.radii_jitter_fraction <= 0.3:
            raise PhantomError("radii_jitter_fraction must lie in [0, 0.3]")
        if self.center_jitter < 0:
            raise PhantomError("center_jitter must be non-negative")
        if len(self.outer_radii) != 3 or min(self.outer_radii) <= 0:
            raise PhantomError("outer_radii must be three positive values")
        half = (self.resolution - 1) / 2.0
        reach = max(self.outer_radii) * (1 + self.radii_jitter_fraction) + self.center_jitter
        # Outermost shell voxel must keep at least one empty voxel to the border.
        if reach > half - 1:
            raise PhantomError(
                f"outer radii {self.outer_radii} with jitter do not fit a {self.resolution}³ grid "
                f"with a 1-voxel margin (reach {reach:.2f} > {half - 1:.2f})"
            )


@dataclass
class SkullSample:
    defective_skull: np.ndarray
    defect: np.ndarray
    skull_id: int = -1
    defect_class: str = ""
    seed: int = 0

    def __post_init__(self):
        self.defective_skull = vx.as_grid(self.defective_skull)
        self.defect = vx.as_grid(self.defect)
        if self.defective_skull.shape != self.defect.shape:
            raise vx.ShapeError("skull and defect channels differ in shape")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.defective_skull.shape

    def stacked(self) -> np.ndarray:
        """Channels-last float32 array ``(D, H, W, 2)``."""
        return np.stack([self.defective_skull, self.defect], axis=-1).astype(np.float32)


@dataclass
class Dataset:
    samples: list[SkullSample]
    complete_skulls: dict[int, np.ndarray] = field(default_factory=dict)
    splits: list[str] = field(default_factory=list)
    params: PhantomParams | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, split: str) -> "Dataset":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return self.take(idx)

    def take(self, indices: Sequence[int]) -> "Dataset":
        samples = [self.samples[i] for i in indices]
        ids = {s.skull_id for s in samples}
        return Dataset(
            samples=samples,
            complete_skulls={k: v for k, v in self.complete_skulls.items() if k in ids},
            splits=[self.splits[i] for i in indices] if self.splits else [],
            params=self.params,
            extra=dict(self.extra),
        )

    def skull_ids(self, split: str | None = None) -> set[int]:
        return {s.skull_id for s, t in zip(self.samples, self.splits or [None] * len(self)) if split is None or t == split}

    @property
    def resolution(self) -> int:
        return self.samples[0].shape[0]


# -- geometry ------------------------------------------------------------------


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def _coords(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.ogrid[:n, :n, :n]


def ellipsoid_mask(n: int, center: Sequence[float], radii: Sequence[float]) -> np.ndarray:
    if min(radii) <= 0:
        return np.zeros((n, n, n), dtype=bool)
    z, y, x = _coords(n)
    q = ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2
    return q <= 1.0


def sphere_mask(n: int, center: Sequence[float], radius: float) -> np.ndarray:
    return ellipsoid_mask(n, center, (radius, radius, radius))


def shell_geometry(p: PhantomParams, skull_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Jittered centre and outer radii of one phantom."""
    rng = _rng(p.seed, skull_seed, 0x5C)
    mid = (p.resolution - 1) / 2.0
    center = mid + rng.uniform(-p.center_jitter, p.center_jitter, size=3)
    radii = np.asarray(p.outer_radii, dtype=np.float64) * (
        1 + rng.uniform(-p.radii_jitter_fraction, p.radii_jitter_fraction, size=3)
    )
    return center, radii


def make_complete_skull(p: PhantomParams, skull_seed: int) -> np.ndarray:
    """Closed ellipsoidal shell; deterministic in ``(p, skull_seed)``."""
    p.validate()
    center, radii = shell_geometry(p, skull_seed)
    outer = ellipsoid_mask(p.resolution, center, radii)
    inner = ellipsoid_mask(p.resolution, center, radii - p.shell_thickness)
    return (outer & ~inner).astype(np.uint8)


def _surface_point(center, radii, direction) -> np.ndarray:
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u)
    return np.asarray(center) + np.asarray(radii) * u


def _skull_frame(skull: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centre and half-extent of the skull's bounding box."""
    idx = np.nonzero(skull)
    lo = np.array([i.min() for i in idx], dtype=np.float64)
    hi = np.array([i.max() for i in idx], dtype=np.float64)
    return (lo + hi) / 2.0, np.maximum((hi - lo) / 2.0, 1.0)


def cut_region(skull: np.ndarray, cls: DefectClass, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of the region removed for one defect of class ``cls``."""
    n = skull.shape[0]
    lo, hi = CUT_RADIUS_RANGE
    r = rng.uniform(lo, hi) * n
    center, radii = _skull_frame(skull)
    jitter = rng.normal(0.0, 0.15, size=3)
    cls = DefectClass(cls)
    if cls is DefectClass.BILATERAL:
        # Two cuts mirrored about the width-axis centre; the 1.1 outward offset
        # keeps them separated by more than their combined radii.
        d = np.array([-0.3 + jitter[0], jitter[1], 1.0])
        u = d / np.linalg.norm(d)
        r = min(r, 0.95 * radii[2] * abs(u[2]) * 1.1 - 1.0)
        p1 = center + 1.1 * radii * u
        p2 = p1.copy()
        p2[2] = 2 * center[2] - p1[2]
        return sphere_mask(n, p1, r) | sphere_mask(n, p2, r)
    if cls is DefectClass.FRONTOORBITAL:
        return sphere_mask(n, _surface_point(center, radii, np.array([0.6, -1.0, 0.0]) + jitter), r)
    if cls is DefectClass.PARIETOTEMPORAL:
        side = 1.0 if rng.random() < 0.5 else -1.0
        return sphere_mask(n, _surface_point(center, radii, np.array([-0.6, 0.0, side]) + jitter), r)
    if cls is DefectClass.RANDOM_1:
        return sphere_mask(n, _surface_point(center, radii, rng.normal(size=3)), r)
    # RANDOM_2: a chain of 2-3 overlapping spheres starting on the surface.
    k = int(rng.integers(2, 4))
    p = _surface_point(center, radii, rng.normal(size=3))
    region = sphere_mask(n, p, r)
    for _ in range(k - 1):
        r_next = rng.uniform(lo, hi) * n
        step = rng.normal(size=3)
        step *= rng.uniform(0.3, 0.9) * r / np.linalg.norm(step)
        p = p + step
        r = r_next
        region |= sphere_mask(n, p, r)
    return region


def carve_defect(skull, cls: DefectClass, defect_seed: int) -> SkullSample:
    """Split ``skull`` into (defective skull, defect) for one defect class."""
    skull = vx.as_grid(skull)
    if not skull.any():
        raise PhantomError("cannot carve a defect from an empty skull")
    rng = np.random.default_rng(np.random.SeedSequence([int(defect_seed) & 0xFFFFFFFFFFFFFFFF]))
    for _ in range(MAX_CUT_RETRIES):
        region = cut_region(skull, cls, rng).astype(np.uint8)
        defect = vx.grid_and(skull, region)
        if defect.any():
            return SkullSample(vx.grid_subtract(skull, defect), defect, defect_class=DefectClass(cls).value, seed=int(defect_seed))
    raise PhantomError(f"{cls} cut missed the skull {MAX_CUT_RETRIES} times")


def _defect_seed(global_seed: int, skull_index: int, class_index: int) -> int:
    return int(np.random.SeedSequence([global_seed, skull_index, class_index]).generate_state(1, np.uint64)[0])


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    # Every split with a positive share gets at least one skull.
    for i in range(len(counts)):
        if fractions[i] > 0 and counts[i] == 0:
            j = int(np.argmax(counts))
            counts[j] -= 1
            counts[i] += 1
    return counts.tolist()


def build_dataset(n_skulls: int, p: PhantomParams, split_fractions: Sequence[float] = (0.8, 0.0, 0.2)) -> Dataset:
    """``n_skulls`` phantoms x five defect classes, split at the skull level."""
    fr = [float(f) for f in split_fractions]
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split_fractions must be three non-negative values summing to 1, got {split_fractions}")
    n_active = sum(1 for f in fr if f > 0)
    if n_skulls < n_active:
        raise ValueError(f"need at least {n_active} skulls for {n_active} non-empty splits, got {n_skulls}")
    p.validate()
    counts = _split_counts(n_skulls, fr)
    perm = _rng(p.seed, 0x5B1).permutation(n_skulls)
    skull_split = {}
    start = 0
    for name, c in zip(SPLITS, counts):
        for i in perm[start : start + c]:
            skull_split[int(i)] = name
        start += c

    samples, splits, complete = [], [], {}
    for i in range(n_skulls):
        skull = make_complete_skull(p, i)
        complete[i] = skull
        for k, cls in enumerate(DEFECT_CLASSES):
            s = carve_defect(skull, cls, _defect_seed(p.seed, i, k))
            s.skull_id = i
            samples.append(s)
            splits.append(skull_split[i])
    return Dataset(samples=samples, complete_skulls=complete, splits=splits, params=p)


def batch_iterator(d: Dataset, batch_size: int, shuffle_seed: int | None) -> Iterator[np.ndarray]:
    """Yield ``(B, D, H, W, 2)`` float32 batches: channel 0 defective skull, channel 1 defect.

    ``shuffle_seed=None`` keeps dataset order. The last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(d) == 0:
        raise ValueError("dataset is empty")
    order = np.arange(len(d)) if shuffle_seed is None else _rng(shuffle_seed).permutation(len(d))
    for start in range(0, len(d), batch_size):
        yield np.stack([d.samples[i].stacked() for i in order[start : start + batch_size]])


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# -- persistence ---------------------------------------------------------------

MANIFEST = "manifest.json"


def save_dataset(d: Dataset, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    """Write the VXG directory layout plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, g in sorted(d.complete_skulls.items()):
        vx.write_vxg(g, out / f"skull_{i}_complete.vxg")
    entries = []
    for s, split in zip(d.samples, d.splits or ["train"] * len(d)):
        stem = f"skull_{s.skull_id}_{s.defect_class}"
        vx.write_vxg(s.defective_skull, out / f"{stem}_defective.vxg")
        vx.write_vxg(s.defect, out / f"{stem}_defect.vxg")
        entries.append({"skull_id": s.skull_id, "defect_class": s.defect_class, "seed": s.seed, "split": split})
    manifest = {"samples": entries}
    if d.params is not None:
        manifest["phantom_params"] = asdict(d.params)
    manifest.update(d.extra)
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(directory: str | os.PathLike) -> Dataset:
    src = Path(directory)
    manifest_path = src / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {src}")
    manifest = json.loads(manifest_path.read_text())
    samples, splits, complete = [], [], {}
    for e in manifest["samples"]:
        stem = f"skull_{e['skull_id']}_{e['defect_class']}"
        s = SkullSample(
            vx.read_vxg(src / f"{stem}_defective.vxg"),
            vx.read_vxg(src / f"{stem}_defect.vxg"),
            skull_id=int(e["skull_id"]),
            defect_class=e["defect_class"],
            seed=int(e.get("seed", 0)),
        )
        samples.append(s)
        splits.append(e.get("split", "train"))
        cpath = src / f"skull_{e['skull_id']}_complete.vxg"
        if e["skull_id"] not in complete and cpath.is_file():
            complete[int(e["skull_id"])] = vx.read_vxg(cpath)
    params = PhantomParams(**{**manifest["phantom_params"], "outer_radii": tuple(manifest["phantom_params"]["outer_radii"])}) if "phantom_params" in manifest else None
    extra = {k: v for k, v in manifest.items() if k not in ("samples", "phantom_params")}
    return Dataset(samples=samples, complete_skulls=complete, splits=splits, params=params, extra=extra)

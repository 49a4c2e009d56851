"""Sampling trained generators, postprocessing and synthetic-dataset export.

Latent draw ``i`` is seeded by ``(seed, i)`` alone, so the emitted dataset does
not depend on how draws are chunked or how many workers postprocess them.
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import voxel as vx
from .phantom import Dataset, SkullSample, save_dataset
from .training import Checkpoint, encode_checkpoint, generator_name

log = logging.getLogger(__name__)

DEFAULT_OVERSAMPLING = 5
MAX_DISCARD_RATE = 0.8
CHUNK = 16
SYNTHETIC_CLASS = "synthetic"


class DegenerateSampleError(ValueError):
    pass


class QualityError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    count: int = 100
    seed: int = 0
    threshold: float = vx.DEFAULT_THRESHOLD
    min_voxels: int | None = None
    connectivity: int = vx.DEFAULT_CONNECTIVITY
    out_dir: str | None = None
    oversampling: int = DEFAULT_OVERSAMPLING
    workers: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.min_voxels is not None and self.min_voxels < 0:
            raise ValueError("min_voxels must be >= 0")
        if self.connectivity not in (6, 18, 26):
            raise ValueError("connectivity must be 6, 18 or 26")
        if self.oversampling < 1 or self.workers < 1:
            raise ValueError("oversampling and workers must be >= 1")

    def min_size(self, dims: Sequence[int]) -> int:
        return vx.default_min_voxels(dims) if self.min_voxels is None else self.min_voxels


def _draw(seed: int, index: int, latent_dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    return rng.standard_normal(latent_dim).astype(np.float32)


def sample_latents(n: int, latent_dim: int, seed: int, start: int = 0) -> np.ndarray:
    """``(n, latent_dim)`` standard-normal codes; row ``k`` depends only on ``(seed, start + k)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    return np.stack([_draw(seed, start + k, latent_dim) for k in range(n)])


def load_generator(c: Checkpoint) -> torch.nn.Module:
    return c.network(generator_name(c))


def generate_raw(c: Checkpoint | torch.nn.Module, codes) -> np.ndarray:
    """Inference-mode decode of ``codes`` to ``(N, R, R, R, 2)`` float32 volumes in [0, 1].

    Generators without a final sigmoid (IntroVAE) are clamped to [0, 1].
    """
    gen = load_generator(c) if isinstance(c, Checkpoint) else c.eval()
    z = torch.as_tensor(np.asarray(codes, dtype=np.float32))
    if z.dim() == 1:
        z = z[None]
    latent_dim = gen.config["latent_dim"]
    if z.dim() != 2 or z.shape[1] != latent_dim:
        raise vx.ShapeError(f"codes have shape {tuple(z.shape)}, generator expects (N, {latent_dim})")
    with torch.no_grad():
        out = gen(z)
    if not gen.config.get("final_sigmoid", True):
        out = out.clamp(0.0, 1.0)
    out = out.numpy()
    if not np.isfinite(out).all():
        raise FloatingPointError("generator produced non-finite values")
    return out


def postprocess(raw: np.ndarray, cfg: SynthesisConfig = SynthesisConfig(), strict: bool = True) -> SkullSample:
    """Binarize both channels, remove skull voxels from the defect, drop small components.

    With ``strict`` an empty skull or defect channel raises ``DegenerateSampleError``.
    """
    raw = np.asarray(raw)
    if raw.ndim != 4 or raw.shape[-1] != 2:
        raise vx.ShapeError(f"expected a (D, H, W, 2) volume, got {raw.shape}")
    skull = vx.binarize(raw[..., 0], cfg.threshold)
    defect = vx.binarize(raw[..., 1], cfg.threshold)
    defect = vx.separate_defect(defect, skull)
    m = cfg.min_size(skull.shape)
    skull = vx.remove_small_components(skull, m, cfg.connectivity)
    defect = vx.remove_small_components(defect, m, cfg.connectivity)
    if strict:
        if not skull.any():
            raise DegenerateSampleError("skull channel is empty after postprocessing")
        if not defect.any():
            raise DegenerateSampleError("defect channel is empty after postprocessing")
    return SkullSample(skull, defect)


def checkpoint_hash(c: Checkpoint) -> str:
    return hashlib.sha256(encode_checkpoint(c)).hexdigest()


def _try_postprocess(args):
    raw, cfg = args
    try:
        return postprocess(raw, cfg)
    except DegenerateSampleError as exc:
        return exc


def synthesize(c: Checkpoint, cfg: SynthesisConfig) -> tuple[Dataset, dict]:
    """Draw until ``cfg.count`` valid samples exist; returns the dataset and its accounting."""
    gen = load_generator(c)
    latent_dim = gen.config["latent_dim"]
    budget = cfg.count * cfg.oversampling
    samples: list[SkullSample] = []
    discarded: list[int] = []
    drawn = 0
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        while len(samples) < cfg.count and drawn < budget:
            n = min(CHUNK, budget - drawn)
            raws = generate_raw(gen, sample_latents(n, latent_dim, cfg.seed, start=drawn))
            jobs = [(r, cfg) for r in raws]
            results = list(pool.map(_try_postprocess, jobs)) if pool else [_try_postprocess(j) for j in jobs]
            for k, res in enumerate(results):
                idx = drawn + k
                if len(samples) >= cfg.count:
                    break
                if isinstance(res, DegenerateSampleError):
                    discarded.append(idx)
                    log.debug("draw %d discarded: %s", idx, res)
                    continue
                res.skull_id = len(samples)
                res.defect_class = SYNTHETIC_CLASS
                res.seed = idx
                samples.append(res)
            drawn += n
    finally:
        if pool:
            pool.shutdown()
    used = len(samples) + len(discarded)
    rate = len(discarded) / used if used else 1.0
    if len(samples) < cfg.count or rate > MAX_DISCARD_RATE:
        raise QualityError(
            f"only {len(samples)} of {cfg.count} samples survived postprocessing after {used} draws "
            f"(discard rate {rate:.0%}); train the generator longer"
        )
    info = {
        "model_kind": c.model_kind,
        "checkpoint_sha256": checkpoint_hash(c),
        "generator_train_skull_ids": list(c.extra.get("train_skull_ids", [])),
        "latent_seed": cfg.seed,
        "emitted": len(samples),
        "discarded": len(discarded),
        "total_draws": used,
        "discarded_draws": discarded,
        "threshold": cfg.threshold,
        "min_voxels": cfg.min_size(samples[0].shape),
        "connectivity": cfg.connectivity,
    }
    complete = {s.skull_id: vx.grid_or(s.defective_skull, s.defect) for s in samples}
    data = Dataset(samples=samples, complete_skulls=complete, splits=["train"] * len(samples), extra={"synthesis": info})
    return data, info


def synthesize_dataset(c: Checkpoint, cfg: SynthesisConfig) -> tuple[Path, dict]:
    """``synthesize`` then write the phantom directory layout to ``cfg.out_dir``."""
    if cfg.out_dir is None:
        raise ValueError("SynthesisConfig.out_dir is required to write a dataset")
    data, info = synthesize(c, cfg)
    out = save_dataset(data, cfg.out_dir)
    log.info("wrote %d samples to %s (%d discarded)", info["emitted"], out, info["discarded"])
    return out, info


def interpolate_codes(z1, z2, steps: int) -> np.ndarray:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise vx.ShapeError(f"endpoint codes differ in shape: {z1.shape} vs {z2.shape}")
    t = np.linspace(0.0, 1.0, steps)[:, None]
    return ((1.0 - t) * z1[None] + t * z2[None]).astype(np.float32)


def interpolate_latent(c: Checkpoint | torch.nn.Module, z1, z2, steps: int, cfg: SynthesisConfig = SynthesisConfig()) -> list[SkullSample]:
    """Decode and postprocess ``steps`` evenly spaced points on the segment from ``z1`` to ``z2``.

    Intermediate samples are returned even when degenerate.
    """
    codes = interpolate_codes(z1, z2, steps)
    raws = generate_raw(c, codes)
    out = []
    for i, r in enumerate(raws):
        s = postprocess(r, cfg, strict=False)
        s.skull_id, s.defect_class, s.seed = i, "interp", i
        out.append(s)
    return out


def write_samples(samples: Sequence[SkullSample], directory: str | os.PathLike, prefix: str = "step") -> list[Path]:
    """Write ``<prefix>_<k>_defective.vxg`` / ``_defect.vxg`` pairs in index order."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(samples) - 1)))
    paths = []
    for k, s in enumerate(samples):
        stem = out / f"{prefix}_{k:0{width}d}"
        vx.write_vxg(s.defective_skull, f"{stem}_defective.vxg")
        vx.write_vxg(s.defect, f"{stem}_defect.vxg")
        paths.append(stem)
    return paths

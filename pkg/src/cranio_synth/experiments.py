"""Scaled experiments: VAE learnability smoke test and the augmentation trend check."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from . import evaluation as ev
from . import phantom as ph
from . import synthesis as syn
from . import training as tr
from . import voxel as vx

log = logging.getLogger(__name__)


# -- VAE smoke test --------------------------------------------------------------------


def reconstruction_dice(ckpt: tr.Checkpoint, data: ph.Dataset, batch_size: int = 16) -> np.ndarray:
    """Per-sample Dice of the decoded posterior mean, both channels pooled."""
    enc, dec = ckpt.network("encoder"), ckpt.network("decoder")
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            chunk = data.samples[start : start + batch_size]
            x = np.stack([s.stacked() for s in chunk])
            rec = dec(enc(torch.from_numpy(x)).mu).numpy()
            for xi, ri in zip(x, rec):
                pred = np.concatenate([vx.binarize(ri[..., c]) for c in range(2)])
                truth = np.concatenate([xi[..., c].astype(np.uint8) for c in range(2)])
                out.append(vx.dice_coefficient(pred, truth))
    return np.asarray(out)


@dataclass(frozen=True)
class SmokeConfig:
    resolution: int = 16
    n_skulls: int = 20
    epochs: int = 50
    threshold: float = 0.7


def vae_smoke(seed: int, cfg: SmokeConfig = SmokeConfig()) -> float:
    """Train a VAE on all phantom samples and return its mean reconstruction Dice."""
    data = ph.build_dataset(cfg.n_skulls, ph.PhantomParams.for_resolution(cfg.resolution, seed=seed))
    tcfg = tr.TrainConfig(model_kind="vae", resolution=cfg.resolution, epochs=cfg.epochs, seed=seed)
    ckpt = tr.pretrain_vae(tcfg, data)
    return float(reconstruction_dice(ckpt, data).mean())


# -- augmentation trend check ----------------------------------------------------------


@dataclass(frozen=True)
class TrendConfig:
    resolution: int = 32
    n_skulls: int = 100
    split_fractions: tuple[float, float, float] = (0.8, 0.0, 0.2)
    data_seed: int = 0
    generator: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(model_kind="wgan_gp", resolution=32, base_channels=8, epochs=60))
    subset_sizes: tuple[int, ...] = (50, 200, 1000)
    vnet: tr.TrainConfig = field(default_factory=lambda: tr.TrainConfig(model_kind="vnet", resolution=32))
    vnet_steps: int = 300
    min_gain: float = 0.02


@dataclass
class TrendResult:
    sizes: tuple[int, ...]
    per_seed: dict[int, list[float]]
    seconds: float

    @property
    def means(self) -> list[float]:
        return list(np.mean([self.per_seed[s] for s in sorted(self.per_seed)], axis=0))

    def non_decreasing(self) -> bool:
        m = self.means
        return all(b >= a for a, b in zip(m, m[1:]))

    def gain(self) -> float:
        return self.means[-1] - self.means[0]

    def passed(self, min_gain: float) -> bool:
        return self.non_decreasing() and self.gain() >= min_gain


def trend_seed(seed: int, real: ph.Dataset, cfg: TrendConfig) -> list[float]:
    """Mean held-out test DSC for each subset size, for one generator seed."""
    gen_cfg = replace(cfg.generator, resolution=cfg.resolution, seed=seed)
    t0 = time.time()
    ckpt, _ = tr.train(gen_cfg, real.subset("train"))
    log.info("seed %d: generator trained in %.0f s", seed, time.time() - t0)
    table = ev.TableConfig(
        subset_sizes=cfg.subset_sizes,
        vnet=replace(cfg.vnet, resolution=cfg.resolution),
        vnet_steps=cfg.vnet_steps,
        synthesis=syn.SynthesisConfig(count=max(cfg.subset_sizes), seed=seed),
        include_baseline=False,
        seed=seed,
    )
    reports = ev.run_table_experiment({gen_cfg.model_kind: ckpt}, real, table)
    means = [r.mean("test") for r in reports]
    log.info("seed %d: test DSC %s (%.0f s)", seed, ", ".join(f"{n}={m:.3f}" for n, m in zip(cfg.subset_sizes, means)), time.time() - t0)
    return means


def trend_check(seeds: Sequence[int] = (0, 1, 2), cfg: TrendConfig = TrendConfig()) -> TrendResult:
    t0 = time.time()
    real = ph.build_dataset(cfg.n_skulls, ph.PhantomParams.for_resolution(cfg.resolution, seed=cfg.data_seed), cfg.split_fractions)
    per_seed = {s: trend_seed(s, real, cfg) for s in seeds}
    return TrendResult(tuple(cfg.subset_sizes), per_seed, time.time() - t0)

"""Segmentation-based evaluation of synthetic data, DSC tables and embeddings.

The table protocol trains one V-Net per (generator, subset size) pair on
synthetic samples and scores it on three origins: the synthetic training
subset (``train``), the phantoms the generator was trained on
(``validation``) and held-out phantoms (``test``). A baseline row trains
directly on the real training split.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import voxel as vx
from .phantom import Dataset, num_batches
from .synthesis import SynthesisConfig, synthesize
from .training import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)

REPORT_SPLITS = ("train", "validation", "test")
SOURCES = ("real", "vae", "wgan_gp", "vae_wgan_gp", "introvae")
BASELINE = "none"


class ConfigError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass
class SegReport:
    model: str
    train_size: int
    cases: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def __post_init__(self):
        for split, rows in self.cases.items():
            for case, d in rows:
                if not 0.0 <= d <= 1.0:
                    raise ValueError(f"DSC {d} of case {case} in split {split} is outside [0, 1]")

    def values(self, split: str) -> np.ndarray:
        return np.array([d for _, d in self.cases.get(split, [])], dtype=np.float64)

    def mean(self, split: str) -> float:
        v = self.values(split)
        return float(v.mean()) if v.size else float("nan")

    def std(self, split: str) -> float:
        v = self.values(split)
        return float(v.std()) if v.size else float("nan")

    def n(self, split: str) -> int:
        return len(self.cases.get(split, []))


def case_id(sample) -> str:
    return f"skull_{sample.skull_id}_{sample.defect_class}"


def _vnet(c: Checkpoint | torch.nn.Module) -> torch.nn.Module:
    if isinstance(c, Checkpoint):
        if c.model_kind != "vnet":
            raise ConfigError(f"expected a vnet checkpoint, got {c.model_kind}")
        return c.network("vnet")
    return c.eval()


def predict_defects(net: torch.nn.Module, data: Dataset, threshold: float = vx.DEFAULT_THRESHOLD, batch_size: int = 8) -> list[np.ndarray]:
    """Binarized defect predictions from the defective-skull channel."""
    res = net.config["resolution"]
    if len(data) and data.resolution != res:
        raise ConfigError(f"V-Net resolution {res} does not match data resolution {data.resolution}")
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            chunk = data.samples[start : start + batch_size]
            x = torch.from_numpy(np.stack([s.defective_skull for s in chunk]).astype(np.float32))[..., None]
            probs = net(x)[..., 0].numpy()
            out.extend(vx.binarize(p, threshold) for p in probs)
    return out


def score_cases(net: torch.nn.Module, data: Dataset, eval_resolution: int | None = None) -> list[tuple[str, float]]:
    preds = predict_defects(net, data)
    rows = []
    for s, p in zip(data.samples, preds):
        t = s.defect
        if eval_resolution is not None and eval_resolution != t.shape[0]:
            dims = (eval_resolution,) * 3
            p, t = vx.resample(p, dims), vx.resample(t, dims)
        rows.append((case_id(s), vx.dice_coefficient(p, t)))
    return rows


def evaluate_segmentation(
    vnet: Checkpoint | torch.nn.Module,
    data: Dataset,
    eval_resolution: int | None = None,
    model: str = "",
    train_size: int = 0,
) -> SegReport:
    """Per-case DSC grouped by the dataset's own split tags."""
    net = _vnet(vnet)
    rows = score_cases(net, data, eval_resolution)
    tags = data.splits or ["test"] * len(data)
    cases: dict[str, list[tuple[str, float]]] = {}
    for tag, row in zip(tags, rows):
        cases.setdefault(tag, []).append(row)
    return SegReport(model=model, train_size=train_size, cases=cases)


# -- Table 1 protocol ----------------------------------------------------------------


@dataclass(frozen=True)
class TableConfig:
    subset_sizes: tuple[int, ...] = (50, 200, 1000)
    vnet: TrainConfig = field(default_factory=lambda: TrainConfig(model_kind="vnet", epochs=20))
    vnet_steps: int | None = None
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    eval_resolution: int | None = None
    include_baseline: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.subset_sizes:
            raise ConfigError("subset_sizes is empty")
        if any(n < 1 for n in self.subset_sizes):
            raise ConfigError("subset sizes must be positive")
        if self.vnet.model_kind != "vnet":
            raise ConfigError("TableConfig.vnet must have model_kind 'vnet'")
        if self.vnet_steps is not None and self.vnet_steps < 1:
            raise ConfigError("vnet_steps must be positive")


def _vnet_config(cfg: TableConfig, n_train: int, seed: int) -> TrainConfig:
    epochs = cfg.vnet.epochs
    if cfg.vnet_steps is not None:
        epochs = max(1, math.ceil(cfg.vnet_steps / num_batches(n_train, cfg.vnet.batch_size)))
    return replace(cfg.vnet, epochs=epochs, seed=seed)


def _tagged(d: Dataset, tag: str) -> Dataset:
    return Dataset(samples=list(d.samples), complete_skulls=dict(d.complete_skulls), splits=[tag] * len(d), params=d.params, extra=dict(d.extra))


def _concat(parts: Sequence[Dataset]) -> Dataset:
    samples, splits = [], []
    for p in parts:
        samples += p.samples
        splits += p.splits
    return Dataset(samples=samples, splits=splits)


def check_split_hygiene(generator_skulls: set[int], test: Dataset) -> None:
    overlap = generator_skulls & test.skull_ids()
    if overlap:
        raise ConfigError(f"test skulls {sorted(overlap)} were used to train the generator")


def run_table_experiment(
    generators: Mapping[str, Checkpoint | Dataset],
    real: Dataset,
    cfg: TableConfig = TableConfig(),
) -> list[SegReport]:
    """One V-Net per (generator, subset size) plus an optional real-data baseline.

    ``generators`` maps a model name to a trained checkpoint (sampled here) or a
    ready synthetic dataset. ``real`` must carry ``train`` and ``test`` split tags.
    """
    need = max(cfg.subset_sizes)
    real_train, real_test = real.subset("train"), real.subset("test")
    if len(real_test) == 0:
        raise ConfigError("real dataset has no test split")
    reports = []
    for name, src in generators.items():
        if isinstance(src, Checkpoint):
            skulls = set(src.extra.get("train_skull_ids", []))
            check_split_hygiene(skulls, real_test)
            synth, _ = synthesize(src, replace(cfg.synthesis, count=need, seed=cfg.synthesis.seed))
        else:
            synth = src
            check_split_hygiene(set(src.extra.get("synthesis", {}).get("generator_train_skull_ids", [])), real_test)
        if len(synth) < need:
            raise ValueError(f"{name}: {len(synth)} synthetic samples, largest subset needs {need}")
        for size in cfg.subset_sizes:
            subset = synth.take(range(size))
            vcfg = _vnet_config(cfg, size, cfg.seed)
            log.info("training V-Net on %d %s samples for %d epochs", size, name, vcfg.epochs)
            ckpt, _ = train(vcfg, subset)
            evalset = _concat([_tagged(subset, "train"), _tagged(real_train, "validation"), _tagged(real_test, "test")])
            reports.append(evaluate_segmentation(ckpt, evalset, cfg.eval_resolution, model=name, train_size=size))
    if cfg.include_baseline:
        if len(real_train) == 0:
            raise ConfigError("real dataset has no train split for the baseline row")
        vcfg = _vnet_config(cfg, len(real_train), cfg.seed)
        ckpt, _ = train(vcfg, real_train)
        evalset = _concat([_tagged(real_train, "train"), _tagged(real_train, "validation"), _tagged(real_test, "test")])
        reports.append(evaluate_segmentation(ckpt, evalset, cfg.eval_resolution, model=BASELINE, train_size=len(real_train)))
    return reports


# -- report export -------------------------------------------------------------------


def format_table(reports: Sequence[SegReport]) -> str:
    header = ["model", "train_size"] + [f"{s} DSC" for s in REPORT_SPLITS]
    rows = [header]
    for r in reports:
        cells = [r.model, str(r.train_size)]
        for s in REPORT_SPLITS:
            cells.append(f"{r.mean(s):.3f} ± {r.std(s):.3f}" if r.n(s) else "-")
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def export_report(reports: Sequence[SegReport], directory: str | Path) -> dict[str, Path]:
    if not reports:
        raise ValueError("no reports to export")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"seg_report": out / "seg_report.csv", "summary": out / "summary.csv", "table": out / "table.txt"}
    with open(paths["seg_report"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "train_size", "split", "case_id", "dsc"])
        for r in reports:
            for s in REPORT_SPLITS:
                for cid, d in r.cases.get(s, []):
                    w.writerow([r.model, r.train_size, s, cid, repr(float(d))])
    with open(paths["summary"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "train_size", "split", "mean_dsc", "std_dsc", "n"])
        for r in reports:
            for s in REPORT_SPLITS:
                if r.n(s):
                    w.writerow([r.model, r.train_size, s, repr(r.mean(s)), repr(r.std(s)), r.n(s)])
    paths["table"].write_text(format_table(reports))
    return paths


def read_report(directory: str | Path) -> list[SegReport]:
    """Parse ``seg_report.csv`` back into reports (in file order)."""
    reports: dict[tuple[str, int], SegReport] = {}
    with open(Path(directory) / "seg_report.csv", newline="") as f:
        for row in csv.DictReader(f):
            key = (row["model"], int(row["train_size"]))
            rep = reports.setdefault(key, SegReport(model=key[0], train_size=key[1]))
            rep.cases.setdefault(row["split"], []).append((row["case_id"], float(row["dsc"])))
    return list(reports.values())


# -- embeddings ----------------------------------------------------------------------


@dataclass
class EmbeddingMatrix:
    features: np.ndarray
    sources: list[str]
    row_ids: list[int]

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.sources) != self.features.shape[0] or len(self.row_ids) != self.features.shape[0]:
            raise vx.ShapeError("features, sources and row_ids disagree on the row count")


def _source_order(name: str) -> tuple[int, str]:
    return (SOURCES.index(name), name) if name in SOURCES else (len(SOURCES), name)


def build_embedding_matrix(
    datasets: Mapping[str, Dataset],
    mode: str = "flatten_downsampled",
    k: int | None = 16,
    encoder: Checkpoint | torch.nn.Module | None = None,
) -> EmbeddingMatrix:
    """Rows ordered by source (canonical order) then sample index.

    ``flatten_downsampled``: the complete skull (both channels joined) resampled
    to ``k``³ and flattened; ``k=None`` keeps native resolution, which must then
    agree across datasets. ``encoder_latent``: posterior means of an encoder.
    """
    if mode not in ("flatten_downsampled", "encoder_latent"):
        raise ValueError(f"unknown feature mode {mode!r}")
    names = sorted(datasets, key=_source_order)
    rows, sources, ids = [], [], []
    if mode == "flatten_downsampled":
        dims = None if k is None else (k, k, k)
        for name in names:
            for i, s in enumerate(datasets[name].samples):
                g = vx.grid_or(s.defective_skull, s.defect)
                if dims is not None:
                    g = vx.resample(g, dims)
                rows.append(g.reshape(-1).astype(np.float32))
                sources.append(name)
                ids.append(i)
        if len({r.size for r in rows}) > 1:
            raise vx.ShapeError("datasets have mixed resolutions; pass k to downsample")
    else:
        if encoder is None:
            raise ValueError("encoder_latent mode needs an encoder checkpoint")
        if isinstance(encoder, Checkpoint):
            if "encoder" not in encoder.networks:
                raise ValueError(f"{encoder.model_kind} checkpoint holds no encoder")
            enc = encoder.network("encoder")
        else:
            enc = encoder.eval()
        res = enc.config["resolution"]
        for name in names:
            samples = datasets[name].samples
            for start in range(0, len(samples), 16):
                chunk = samples[start : start + 16]
                vols = []
                for s in chunk:
                    a, b = s.defective_skull, s.defect
                    if a.shape[0] != res:
                        if k is None:
                            raise vx.ShapeError(f"data resolution {a.shape[0]} differs from encoder resolution {res}")
                        a, b = vx.resample(a, (res,) * 3), vx.resample(b, (res,) * 3)
                    vols.append(np.stack([a, b], axis=-1).astype(np.float32))
                with torch.no_grad():
                    mu = enc(torch.from_numpy(np.stack(vols))).mu.numpy()
                rows.extend(mu)
                sources.extend([name] * len(chunk))
                ids.extend(range(start, start + len(chunk)))
    if not rows:
        raise ValueError("no samples to embed")
    return EmbeddingMatrix(np.stack(rows).astype(np.float64), sources, ids)


def project_pca_2d(m: EmbeddingMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal coordinates and their explained-variance fractions.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(m.features if isinstance(m, EmbeddingMatrix) else m, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("PCA needs a 2D matrix with at least 3 rows")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    total = float((s**2).sum())
    if total <= 0.0 or not np.isfinite(total):
        raise DegenerateInputError("matrix has zero variance")
    axes = np.zeros((2, x.shape[1]))
    k = min(2, vt.shape[0])
    axes[:k] = vt[:k]
    for i in range(k):
        if axes[i, np.argmax(np.abs(axes[i]))] < 0:
            axes[i] = -axes[i]
    var = np.zeros(2)
    var[:k] = s[:k] ** 2 / total
    return xc @ axes.T, var


def export_embedding(m: EmbeddingMatrix, coords: np.ndarray, directory: str | Path) -> dict[str, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"embedding": out / "embedding.csv", "matrix": out / "embedding_matrix.csv"}
    with open(paths["embedding"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "row_id", "x", "y"])
        for src, rid, (x, y) in zip(m.sources, m.row_ids, coords):
            w.writerow([src, rid, repr(float(x)), repr(float(y))])
    with open(paths["matrix"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "row_id"] + [f"f{j}" for j in range(m.features.shape[1])])
        for src, rid, row in zip(m.sources, m.row_ids, m.features):
            w.writerow([src, rid] + [repr(float(v)) for v in row])
    return paths

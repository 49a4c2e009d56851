"""Training pipelines, Adam, loss traces and the checkpoint container.

Five pipelines share one epoch loop:

* ``vae``          encoder + group-norm decoder on the negative ELBO
* ``wgan_gp``      critic/generator with ``critic_iters_per_gen`` critic updates per batch
* ``vae_wgan_gp``  VAE pretraining of the WGAN generator, then WGAN-GP fed by
                   encoder latents, then plain WGAN-GP from the prior
* ``introvae``     VAE-manner warm-up (alpha = 0) followed by introspective training
* ``vnet``         defect segmentation with soft Dice

Determinism: network init draws from ``torch.manual_seed(cfg.seed)``, every
in-loop random draw comes from one ``torch.Generator`` whose state is
checkpointed, and the batch order of epoch ``e`` is a permutation seeded by
``(cfg.seed, e)``. A run resumed from an epoch-boundary checkpoint therefore
replays the uninterrupted run bit for bit.
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from . import losses as L
from . import nets
from .phantom import Dataset, batch_iterator

log = logging.getLogger(__name__)

MODEL_KINDS = ("vae", "wgan_gp", "vae_wgan_gp", "introvae", "vnet")
CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1
ADAM_EPS = 1e-8

# Paper optimiser settings per kind: (learning rate, beta1, beta2).
WGAN_ADAM = (2e-4, 0.5, 0.9)
VAE_ADAM = (1e-3, 0.9, 0.999)
VNET_ADAM = (1e-3, 0.9, 0.999)
_DEFAULT_ADAM = {"vae": VAE_ADAM, "wgan_gp": WGAN_ADAM, "vae_wgan_gp": WGAN_ADAM, "introvae": VAE_ADAM, "vnet": VNET_ADAM}


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = "wgan_gp"
    resolution: int = 32
    latent_dim: int = nets.LATENT_DIM
    batch_size: int = 8
    learning_rate: float | None = None
    adam_beta1: float | None = None
    adam_beta2: float | None = None
    epochs: int = 10
    wgan: L.WganGpConfig = field(default_factory=L.WganGpConfig)
    intro: L.IntroVaeConfig = field(default_factory=L.IntroVaeConfig)
    vae_pretrain_epochs: int = 10
    latent_feed_epochs: int = 15
    intro_warmup_epochs: int = 3
    base_channels: int = 16
    vnet_base_channels: int = 8
    vnet_levels: int = 3
    dice_epsilon: float = 1.0
    seed: int = 0
    log_interval: int = 10
    checkpoint_every: int = 0
    early_stop_patience: int = 10
    early_stop_tol: float = 1e-3

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("epochs", "latent_dim", "resolution", "base_channels", "vnet_base_channels", "vnet_levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("vae_pretrain_epochs", "latent_feed_epochs", "intro_warmup_epochs", "checkpoint_every", "early_stop_patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if b is not None and not 0.0 <= b < 1.0:
                raise ValueError("Adam betas must lie in [0, 1)")
        if isinstance(self.wgan, dict):
            object.__setattr__(self, "wgan", L.WganGpConfig(**self.wgan))
        if isinstance(self.intro, dict):
            object.__setattr__(self, "intro", L.IntroVaeConfig(**self.intro))

    def adam(self) -> tuple[float, float, float]:
        lr, b1, b2 = _DEFAULT_ADAM[self.model_kind]
        return (
            self.learning_rate if self.learning_rate is not None else lr,
            self.adam_beta1 if self.adam_beta1 is not None else b1,
            self.adam_beta2 if self.adam_beta2 is not None else b2,
        )

    def total_epochs(self) -> int:
        if self.model_kind == "vae_wgan_gp":
            return self.vae_pretrain_epochs + self.latent_feed_epochs + self.epochs
        if self.model_kind == "introvae":
            return self.intro_warmup_epochs + self.epochs
        return self.epochs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- Adam ----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float = ADAM_EPS,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise L.NumericError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


class Adam:
    """Adam over a named parameter set; state is exposed for checkpointing."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr: float, beta1: float, beta2: float, eps: float = ADAM_EPS):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState(
            m={k: torch.zeros_like(p) for k, p in self.params.items()},
            v={k: torch.zeros_like(p) for k, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def grad_norm(self) -> float:
        sq = sum(float((p.grad.double() ** 2).sum()) for p in self.params.values() if p.grad is not None)
        return math.sqrt(sq)


def _named(prefix: str, module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


# -- loss trace ------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    step: int
    name: str
    value: float
    wall_ms: float = field(default=0.0, compare=False)


class LossTrace(list):
    """Ordered ``TraceRecord`` list; equality ignores wall time."""

    def add(self, epoch: int, step: int, name: str, value: float, t0: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise L.NumericError(f"non-finite {name} at epoch {epoch} step {step}")
        self.append(TraceRecord(epoch, step, name, value, (time.perf_counter() - t0) * 1000.0))

    def values(self, name: str) -> list[float]:
        return [r.value for r in self if r.name == name]

    def records(self, name: str) -> list[TraceRecord]:
        return [r for r in self if r.name == name]

    def epoch_mean(self, name: str, epoch: int) -> float:
        vals = [r.value for r in self if r.name == name and r.epoch == epoch]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "step", "name", "value", "wall_ms"])
            for r in self:
                w.writerow([r.epoch, r.step, r.name, repr(r.value), f"{r.wall_ms:.3f}"])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "LossTrace":
        out = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                out.append(TraceRecord(int(row["epoch"]), int(row["step"]), row["name"], float(row["value"]), float(row["wall_ms"])))
        return out


# -- checkpoint ------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_kind: str
    train_config: dict
    networks: dict[str, dict]
    arrays: dict[str, np.ndarray]
    int_arrays: dict[str, list[int]] = field(default_factory=dict)
    optim_steps: dict[str, int] = field(default_factory=dict)
    epoch: int = 0
    rng_state: bytes = b""
    trace: LossTrace = field(default_factory=LossTrace)
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train_config)

    def network(self, name: str) -> nn.Module:
        """Rebuild network ``name`` and load its parameters (inference mode)."""
        if name not in self.networks:
            raise KeyError(f"checkpoint has no network {name!r}; has {sorted(self.networks)}")
        net = nets.build_network(self.networks[name])
        _load_module(net, name, self.arrays, self.int_arrays)
        return net.eval()


def _module_arrays(prefix: str, module: nn.Module) -> tuple[dict[str, np.ndarray], dict[str, list[int]]]:
    arrays, ints = {}, {}
    for k, t in module.state_dict().items():
        key = f"{prefix}.{k}"
        if t.is_floating_point():
            arrays[key] = t.detach().cpu().numpy().astype("<f4", copy=True)
        else:
            ints[key] = [int(v) for v in t.detach().cpu().reshape(-1).tolist()]
    return arrays, ints


def _load_module(module: nn.Module, prefix: str, arrays: dict, ints: dict) -> None:
    sd = module.state_dict()
    new = {}
    for k, t in sd.items():
        key = f"{prefix}.{k}"
        if key in arrays:
            a = arrays[key]
            if tuple(a.shape) != tuple(t.shape):
                raise CheckpointError(f"array {key} has shape {a.shape}, network expects {tuple(t.shape)}")
            new[k] = torch.from_numpy(np.asarray(a, dtype=np.float32).copy())
        elif key in ints:
            new[k] = torch.tensor(ints[key], dtype=t.dtype).reshape(t.shape)
        else:
            raise CheckpointError(f"checkpoint is missing array {key}")
    module.load_state_dict(new)


def encode_checkpoint(c: Checkpoint) -> bytes:
    names = sorted(c.arrays)
    index, blobs, offset = [], [], 0
    for n in names:
        a = np.ascontiguousarray(c.arrays[n], dtype="<f4")
        b = a.tobytes()
        index.append({"name": n, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": c.model_kind,
        "train_config": c.train_config,
        "networks": c.networks,
        "arrays": index,
        "int_arrays": c.int_arrays,
        "optim_steps": c.optim_steps,
        "epoch": c.epoch,
        "rng_state": base64.b64encode(c.rng_state).decode("ascii"),
        "trace": [[r.epoch, r.step, r.name, r.value, r.wall_ms] for r in c.trace],
        "extra": c.extra,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated preamble)")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    if 16 + hlen > len(buf):
        raise CheckpointError(f"corrupt payload: header declares {hlen} bytes, file holds {len(buf) - 16}")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt payload: unreadable header ({exc})") from None
    body = memoryview(buf)[16 + hlen :]
    try:
        return _checkpoint_from(header, body)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"corrupt payload: malformed header ({type(exc).__name__}: {exc})") from None


def _checkpoint_from(header: dict, body: memoryview) -> Checkpoint:
    expected = sum(e["nbytes"] for e in header["arrays"])
    if len(body) != expected:
        raise CheckpointError(f"corrupt payload: expected {expected} array bytes, found {len(body)}")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if n * 4 != e["nbytes"] or e["offset"] + e["nbytes"] > len(body):
            raise CheckpointError(f"corrupt payload: array {e['name']} index is inconsistent")
        arrays[e["name"]] = np.frombuffer(body, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    if header["model_kind"] not in MODEL_KINDS:
        raise CheckpointError(f"unknown model_kind {header['model_kind']!r}")
    return Checkpoint(
        model_kind=header["model_kind"],
        train_config=header["train_config"],
        networks=header["networks"],
        arrays=arrays,
        int_arrays=header["int_arrays"],
        optim_steps=header["optim_steps"],
        epoch=header["epoch"],
        rng_state=base64.b64decode(header["rng_state"], validate=True),
        trace=LossTrace(TraceRecord(*r) for r in header["trace"]),
        extra=header["extra"],
    )


def save_checkpoint(c: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(c))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# -- run state -------------------------------------------------------------------------


class _Run:
    """Mutable training state: networks, optimisers, RNG, trace, epoch counter."""

    def __init__(self, cfg: TrainConfig, networks: dict[str, nn.Module]):
        self.cfg = cfg
        self.nets = networks
        self.optims: dict[str, Adam] = {}
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.trace = LossTrace()
        self.epoch = 0
        self.step = 0
        self.extra: dict = {}
        self.t0 = time.perf_counter()

    def add_optim(self, name: str, modules: list[str], adam: tuple[float, float, float]) -> None:
        named = [kv for m in modules for kv in _named(m, self.nets[m])]
        self.optims[name] = Adam(named, *adam)

    def record(self, name: str, value) -> None:
        if isinstance(value, torch.Tensor):
            value = value.item()
        self.trace.add(self.epoch, self.step, name, value, self.t0)

    def randn(self, *shape) -> torch.Tensor:
        return torch.randn(*shape, generator=self.rng)

    def checkpoint(self) -> Checkpoint:
        arrays, ints = {}, {}
        for name, net in self.nets.items():
            a, i = _module_arrays(name, net)
            arrays.update(a)
            ints.update(i)
        steps = {}
        for oname, opt in self.optims.items():
            steps[oname] = opt.state.step
            for pname in opt.params:
                arrays[f"adam.{oname}.m.{pname}"] = opt.state.m[pname].detach().numpy().astype("<f4", copy=True)
                arrays[f"adam.{oname}.v.{pname}"] = opt.state.v[pname].detach().numpy().astype("<f4", copy=True)
        extra = dict(self.extra)
        extra["optims"] = {k: [o.lr, o.beta1, o.beta2, sorted(o.params)] for k, o in self.optims.items()}
        extra["step"] = self.step
        return Checkpoint(
            model_kind=self.cfg.model_kind,
            train_config=self.cfg.to_dict(),
            networks={k: dict(n.config) for k, n in self.nets.items()},
            arrays=arrays,
            int_arrays=ints,
            optim_steps=steps,
            epoch=self.epoch,
            rng_state=bytes(self.rng.get_state().numpy().tobytes()),
            trace=LossTrace(self.trace),
            extra=extra,
        )

    def restore(self, c: Checkpoint) -> None:
        if c.model_kind != self.cfg.model_kind:
            raise CheckpointError(f"checkpoint is for {c.model_kind}, run is {self.cfg.model_kind}")
        for name, net in self.nets.items():
            _load_module(net, name, c.arrays, c.int_arrays)
        self.optims = {}
        for oname, (lr, b1, b2, pnames) in c.extra.get("optims", {}).items():
            modules = sorted({p.split(".", 1)[0] for p in pnames})
            self.add_optim(oname, modules, (lr, b1, b2))
            opt = self.optims[oname]
            opt.state.step = c.optim_steps[oname]
            for pname in opt.params:
                opt.state.m[pname] = torch.from_numpy(c.arrays[f"adam.{oname}.m.{pname}"].astype(np.float32))
                opt.state.v[pname] = torch.from_numpy(c.arrays[f"adam.{oname}.v.{pname}"].astype(np.float32))
        self.rng.set_state(torch.from_numpy(np.frombuffer(c.rng_state, dtype=np.uint8).copy()))
        self.trace = LossTrace(c.trace)
        self.epoch = c.epoch
        self.step = int(c.extra.get("step", 0))
        self.extra = {k: v for k, v in c.extra.items() if k not in ("optims", "step")}


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 0xE9]).generate_state(1, np.uint64)[0])


def _batches(run: _Run, data: Dataset) -> Iterable[torch.Tensor]:
    for b in batch_iterator(data, run.cfg.batch_size, _epoch_seed(run.cfg.seed, run.epoch)):
        yield torch.from_numpy(b)


def _st_clamp(x: torch.Tensor) -> torch.Tensor:
    """Clamp to (0, 1) in the forward pass, identity gradient in the backward pass."""
    return x + (x.clamp(L.PROB_CLAMP, 1.0 - L.PROB_CLAMP) - x).detach()


def _plateaued(run: _Run, key: str, first_epoch: int) -> bool:
    p = run.cfg.early_stop_patience
    if p <= 0 or run.epoch - first_epoch < p + 1:
        return False
    means = [run.trace.epoch_mean(key, e) for e in range(run.epoch - p - 1, run.epoch)]
    return all(abs(b - a) <= run.cfg.early_stop_tol * max(abs(a), 1e-12) for a, b in zip(means, means[1:]))


def _run_epochs(
    run: _Run,
    data: Dataset,
    stages: list[tuple[str, int, Callable[[_Run, torch.Tensor], None], Callable[[_Run], None] | None, str | None]],
    checkpoint_dir: str | os.PathLike | None,
) -> None:
    """Drive ``stages`` = [(name, n_epochs, step_fn, on_enter, early_stop_key)] from ``run.epoch`` on."""
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    run.extra["train_skull_ids"] = sorted(int(i) for i in data.skull_ids())
    start = 0
    for stage_idx, (name, n_epochs, step_fn, on_enter, stop_key) in enumerate(stages):
        end = start + n_epochs
        if run.epoch >= end:
            start = end
            continue
        if run.epoch == start or run.extra.get("stage") != name:
            if on_enter is not None:
                on_enter(run)
            run.extra["stage"] = name
            run.record("stage_start", stage_idx + 1)
            log.info("stage %d (%s) begins at epoch %d", stage_idx + 1, name, run.epoch)
        while run.epoch < end:
            for net in run.nets.values():
                net.train()
            try:
                for batch in _batches(run, data):
                    step_fn(run, batch)
                    if run.cfg.log_interval and run.step % run.cfg.log_interval == 0:
                        last = run.trace[-1]
                        log.info("epoch %d step %d %s=%.5g", run.epoch, run.step, last.name, last.value)
                    run.step += 1
            except L.NumericError as exc:
                ckpt = run.checkpoint()
                if checkpoint_dir is not None:
                    save_checkpoint(ckpt, Path(checkpoint_dir) / "failure.ckpt")
                raise TrainingError(f"training aborted at epoch {run.epoch}: {exc}", ckpt) from exc
            run.epoch += 1
            if checkpoint_dir is not None and run.cfg.checkpoint_every and run.epoch % run.cfg.checkpoint_every == 0:
                save_checkpoint(run.checkpoint(), Path(checkpoint_dir) / f"epoch_{run.epoch:04d}.ckpt")
            if stop_key is not None and _plateaued(run, stop_key, start):
                log.info("early stop: %s plateaued at epoch %d", stop_key, run.epoch)
                run.extra.setdefault("early_stopped", []).append([name, run.epoch])
                end = run.epoch
                break
        start = end
    for net in run.nets.values():
        net.eval()


def _finish(run: _Run, checkpoint_dir) -> tuple[Checkpoint, LossTrace]:
    ckpt = run.checkpoint()
    if checkpoint_dir is not None:
        save_checkpoint(ckpt, Path(checkpoint_dir) / "final.ckpt")
        ckpt.trace.to_csv(Path(checkpoint_dir) / "loss_trace.csv")
    return ckpt, ckpt.trace


def _build(cfg: TrainConfig, factories: dict[str, Callable[[], nn.Module]]) -> dict[str, nn.Module]:
    torch.manual_seed(cfg.seed)
    return {k: f() for k, f in factories.items()}


# -- step functions ----------------------------------------------------------------------


def _vae_step(run: _Run, x: torch.Tensor, decoder: str) -> None:
    enc, dec = run.nets["encoder"], run.nets[decoder]
    opt = run.optims["vae"]
    post = enc(x)
    x_rec = dec(nets.reparameterize(post, run.randn(*post.mu.shape)))
    kl = L.kl_standard_normal(post)
    rec = L.reconstruction_loss(x, x_rec)
    loss = kl + rec
    run.record("kl", kl)
    run.record("rec", rec)
    run.record("vae_loss", loss)
    opt.zero_grad()
    loss.backward()
    opt.step()


def _generate(run: _Run, gen: nn.Module, z: torch.Tensor) -> torch.Tensor:
    # Batch norm cannot normalise a lone sample with a 1-voxel seed; pad with a prior draw and drop it.
    if z.shape[0] == 1 and gen.training and gen.config.get("norm") == "batch":
        return gen(torch.cat([z, run.randn(1, z.shape[1])]))[:1]
    return gen(z)


def _wgan_cycle(run: _Run, real: torch.Tensor, latent_fn: Callable[[torch.Tensor], torch.Tensor], source: int) -> None:
    """``critic_iters_per_gen`` critic updates on ``real`` then one generator update."""
    crit, gen = run.nets["critic"], run.nets["generator"]
    opt_c, opt_g = run.optims["critic"], run.optims["generator"]
    for _ in range(run.cfg.wgan.critic_iters_per_gen):
        with torch.no_grad():
            fake = _generate(run, gen, latent_fn(real))
        terms = {}
        loss = L.critic_loss(crit, real, fake, run.cfg.wgan, generator=run.rng, terms=terms)
        run.record("critic_loss", loss)
        run.record("wasserstein", terms["wasserstein"])
        run.record("gp", terms["gp"])
        opt_c.zero_grad()
        loss.backward()
        opt_c.step()
    fake = _generate(run, gen, latent_fn(real))
    g_loss = L.generator_wgan_loss(crit, fake)
    run.record("generator_loss", g_loss)
    run.record("latent_source", source)
    opt_g.zero_grad()
    g_loss.backward()
    opt_g.step()


def _prior_latents(run: _Run) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda real: run.randn(real.shape[0], run.cfg.latent_dim)


def _encoder_latents(run: _Run) -> Callable[[torch.Tensor], torch.Tensor]:
    enc = run.nets["encoder"]

    def fn(real):
        with torch.no_grad():
            post = enc(real)
            return nets.reparameterize(post, run.randn(*post.mu.shape))

    return fn


def _introvae_step(run: _Run, x: torch.Tensor) -> None:
    enc, gen = run.nets["encoder"], run.nets["generator"]
    opt_e, opt_g = run.optims["encoder"], run.optims["generator"]
    warm = run.extra.get("stage") == "warmup"
    cfg = replace(run.cfg.intro, alpha=0.0) if warm else run.cfg.intro
    run.record("alpha", cfg.alpha)

    # Encoder update: adversarial posteriors see detached generator outputs.
    post = enc(x)
    noise = run.randn(*post.mu.shape)
    z = nets.reparameterize(post, noise)
    z_p = run.randn(*post.mu.shape)
    x_rec = _st_clamp(gen(z))
    with torch.no_grad():
        x_p = _st_clamp(gen(z_p))
    posts = {"real": post, "rec": enc(x_rec.detach()), "sampled": enc(x_p)}
    terms = {}
    e_loss = L.introvae_encoder_loss(posts, x, x_rec, cfg, terms=terms)
    for k in ("kl_real", "kl_rec", "kl_sampled", "hinge_rec", "hinge_sampled", "rec"):
        run.record(k, terms[k])
    run.record("encoder_loss", e_loss)
    opt_e.zero_grad()
    opt_g.zero_grad()
    e_loss.backward()
    opt_e.step()

    # Generator update: gradients flow through the encoder into the generator.
    x_rec = _st_clamp(gen(z.detach()))
    x_p = _st_clamp(gen(z_p))
    posts = {"rec": enc(x_rec), "sampled": enc(x_p)}
    g_loss = L.introvae_generator_loss(posts, x, x_rec, cfg)
    run.record("generator_loss", g_loss)
    opt_e.zero_grad()
    opt_g.zero_grad()
    g_loss.backward()
    run.record("generator_grad_norm", opt_g.grad_norm())
    opt_g.step()
    opt_e.zero_grad()


def _vnet_step(run: _Run, batch: torch.Tensor, eps: float) -> None:
    net = run.nets["vnet"]
    opt = run.optims["vnet"]
    x, target = batch[..., :1], batch[..., 1:]
    pred = net(x)
    loss = L.dice_loss(pred, target, L.DiceLossConfig(eps))
    run.record("dice_loss", loss)
    opt.zero_grad()
    loss.backward()
    opt.step()


# -- pipelines ---------------------------------------------------------------------------


def _require(cfg: TrainConfig, *kinds: str) -> None:
    if cfg.model_kind not in kinds:
        raise ValueError(f"this pipeline needs model_kind in {kinds}, got {cfg.model_kind!r}")


def _check_data(cfg: TrainConfig, data: Dataset) -> None:
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if data.resolution != cfg.resolution:
        raise ValueError(f"dataset resolution {data.resolution} does not match config resolution {cfg.resolution}")


def pretrain_vae(cfg: TrainConfig, data: Dataset, resume: Checkpoint | None = None, checkpoint_dir=None) -> Checkpoint:
    """Baseline VAE: encoder + group-norm decoder minimising KL + reconstruction."""
    _require(cfg, "vae")
    _check_data(cfg, data)
    r, c = cfg.resolution, cfg.base_channels
    run = _Run(cfg, _build(cfg, {"encoder": lambda: nets.build_vae_encoder(r, c, cfg.latent_dim), "decoder": lambda: nets.build_vae_decoder(cfg.latent_dim, r, c)}))
    run.add_optim("vae", ["encoder", "decoder"], cfg.adam())
    if resume is not None:
        run.restore(resume)
    _run_epochs(run, data, [("vae", cfg.epochs, lambda rn, x: _vae_step(rn, x, "decoder"), None, "vae_loss")], checkpoint_dir)
    return _finish(run, checkpoint_dir)[0]


def train_wgan_gp(cfg: TrainConfig, data: Dataset, resume: Checkpoint | None = None, checkpoint_dir=None) -> tuple[Checkpoint, LossTrace]:
    _require(cfg, "wgan_gp")
    _check_data(cfg, data)
    r, c = cfg.resolution, cfg.base_channels
    run = _Run(cfg, _build(cfg, {"critic": lambda: nets.build_critic(r, c), "generator": lambda: nets.build_generator(cfg.latent_dim, r, c)}))
    run.add_optim("critic", ["critic"], cfg.adam())
    run.add_optim("generator", ["generator"], cfg.adam())
    if resume is not None:
        run.restore(resume)
    _run_epochs(run, data, [("wgan", cfg.epochs, lambda rn, x: _wgan_cycle(rn, x, _prior_latents(rn), 0), None, "critic_loss")], checkpoint_dir)
    return _finish(run, checkpoint_dir)


def train_hybrid(cfg: TrainConfig, data: Dataset, resume: Checkpoint | None = None, checkpoint_dir=None) -> tuple[Checkpoint, LossTrace]:
    """Three stages: VAE pretraining of the generator, encoder-fed WGAN-GP, prior-fed WGAN-GP."""
    _require(cfg, "vae_wgan_gp")
    _check_data(cfg, data)
    r, c = cfg.resolution, cfg.base_channels
    run = _Run(
        cfg,
        _build(
            cfg,
            {
                "encoder": lambda: nets.build_vae_encoder(r, c, cfg.latent_dim),
                "generator": lambda: nets.build_generator(cfg.latent_dim, r, c),
                "critic": lambda: nets.build_critic(r, c),
            },
        ),
    )
    wgan_adam = cfg.adam()

    def enter_vae(rn):
        rn.optims = {}
        rn.add_optim("vae", ["encoder", "generator"], VAE_ADAM)

    def enter_wgan(rn):
        if "critic" not in rn.optims:
            rn.optims = {}
            rn.add_optim("critic", ["critic"], wgan_adam)
            rn.add_optim("generator", ["generator"], wgan_adam)

    def feed_step(rn, x):
        # Encoder is frozen here: only critic and generator optimisers step.
        _wgan_cycle(rn, x, _encoder_latents(rn), 1)

    enter_vae(run)
    if resume is not None:
        run.restore(resume)
    stages = [
        ("vae_pretrain", cfg.vae_pretrain_epochs, lambda rn, x: _vae_step(rn, x, "generator"), enter_vae, None),
        ("latent_feed", cfg.latent_feed_epochs, feed_step, enter_wgan, None),
        ("wgan", cfg.epochs, lambda rn, x: _wgan_cycle(rn, x, _prior_latents(rn), 0), enter_wgan, "critic_loss"),
    ]
    _run_epochs(run, data, stages, checkpoint_dir)
    return _finish(run, checkpoint_dir)


def train_introvae(cfg: TrainConfig, data: Dataset, resume: Checkpoint | None = None, checkpoint_dir=None) -> tuple[Checkpoint, LossTrace]:
    _require(cfg, "introvae")
    _check_data(cfg, data)
    r, c = cfg.resolution, cfg.base_channels

    def factory():
        enc, gen = nets.build_introvae(r, c, cfg.latent_dim)
        return {"encoder": enc, "generator": gen}

    torch.manual_seed(cfg.seed)
    run = _Run(cfg, factory())
    run.add_optim("encoder", ["encoder"], cfg.adam())
    run.add_optim("generator", ["generator"], cfg.adam())
    if resume is not None:
        run.restore(resume)
    stages = [
        ("warmup", cfg.intro_warmup_epochs, _introvae_step, None, None),
        ("introspective", cfg.epochs, _introvae_step, None, "encoder_loss"),
    ]
    _run_epochs(run, data, stages, checkpoint_dir)
    return _finish(run, checkpoint_dir)


def train_vnet(cfg: TrainConfig, data: Dataset, resume: Checkpoint | None = None, checkpoint_dir=None) -> tuple[Checkpoint, LossTrace]:
    """Supervised defect segmentation: defective skull in, defect probability out."""
    _require(cfg, "vnet")
    _check_data(cfg, data)
    run = _Run(cfg, _build(cfg, {"vnet": lambda: nets.build_vnet(cfg.resolution, cfg.vnet_base_channels, cfg.vnet_levels)}))
    run.add_optim("vnet", ["vnet"], cfg.adam())
    if resume is not None:
        run.restore(resume)
    _run_epochs(run, data, [("vnet", cfg.epochs, lambda rn, b: _vnet_step(rn, b, cfg.dice_epsilon), None, None)], checkpoint_dir)
    return _finish(run, checkpoint_dir)


def train(cfg: TrainConfig, data: Dataset, resume: Checkpoint | None = None, checkpoint_dir=None) -> tuple[Checkpoint, LossTrace]:
    """Dispatch on ``cfg.model_kind``."""
    if cfg.model_kind == "vae":
        ckpt = pretrain_vae(cfg, data, resume, checkpoint_dir)
        return ckpt, ckpt.trace
    return {
        "wgan_gp": train_wgan_gp,
        "vae_wgan_gp": train_hybrid,
        "introvae": train_introvae,
        "vnet": train_vnet,
    }[cfg.model_kind](cfg, data, resume, checkpoint_dir)


def generator_name(c: Checkpoint) -> str:
    """Name of the network that maps latents to volumes in this checkpoint."""
    if "decoder" in c.networks:
        return "decoder"
    if "generator" in c.networks:
        return "generator"
    raise CheckpointError(f"{c.model_kind} checkpoint holds no generator")

"""Optimizers, the two-stage training procedure, and checkpoint files.

Stage one fits a single autoencoder on the union of all datasets by plain
MSE. Stage two freezes it and fits the conditional flow by maximum
likelihood on standardized representations, pushing every per-dataset code
distribution toward the shared standard normal prior. Both stages are
fully determined by (config, seed, data): batch order, init and noise all
come from named streams, so reruns produce bit-identical checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autoencoder import AEModel, PIXEL_DIM, RepStats
from .data import DatasetSpec, SampleSet
from .errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    NonFiniteError,
    TrainingDivergedError,
)
from .flow import FlowModel
from .rng import RngStream
from .tensor import Graph, Tensor, add, backward, mul, scale, sum_all, tensor_from_bytes, tensor_to_bytes

CHECKPOINT_MAGIC = b"BLENS\x00"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    seed: int = 7
    d: int = 16
    h: int = 128
    e: int = 8
    n_blocks: int = 8
    clamp_alpha: float = 2.0
    batch_size: int = 128
    lr_ae: float = 1e-3
    epochs_ae: int = 150
    lr_flow: float = 5e-4
    epochs_flow: int = 250
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    split_ratio: float = 1.0 / 3.0
    flow_noise: float = 0.1
    data_dir: str | None = None

    def __post_init__(self) -> None:
        if self.lr_ae <= 0 or self.lr_flow <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.epochs_ae < 1 or self.epochs_flow < 1:
            raise ValueError("epochs must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


class AdamState:
    def __init__(self, params: list[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay_mask: list[bool] | None = None,
) -> None:
    """Standard Adam with bias correction; updates params in place.

    Weight decay is decoupled (applied directly to the parameter, not the
    gradient) and only touches entries where decay_mask is true.
    """
    state.t += 1
    t = state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient in adam_step")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1**t)
        v_hat = state.v[i] / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay and (decay_mask is None or decay_mask[i]):
            p -= lr * weight_decay * p


def _batches(n: int, batch_size: int, order_rng: RngStream, epoch: int):
    perm = order_rng.split(epoch).permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if idx.size >= 2:
            yield idx


def _cosine_lr(base: float, epoch: int, total: int, floor_frac: float = 0.02) -> float:
    """Cosine decay from base to floor_frac * base across the run; without it
    Adam stalls at a noise floor proportional to the learning rate."""
    frac = 0.5 * (1.0 + math.cos(math.pi * epoch / max(total, 1)))
    return base * (floor_frac + (1.0 - floor_frac) * frac)


def reconstruction_mse(model: AEModel, pixels: np.ndarray) -> float:
    """Mean per-pixel squared reconstruction error."""
    recon = model.decode(model.encode(pixels))
    return float(np.mean((recon - np.atleast_2d(pixels)) ** 2))


def train_autoencoder(config: TrainConfig, train: SampleSet) -> tuple[AEModel, RepStats, list[float]]:
    """Fit the union autoencoder; returns (model, standardization stats, per-epoch
    train loss trace). Epoch means decrease up to a 5% tolerance band."""
    rng = RngStream(config.seed, "train-ae")
    model = AEModel.create(rng.split("init"), d=config.d, h=config.h)
    params = model.params()
    state = AdamState([p.data for p in params])
    decay_mask = [p.data.ndim == 2 for p in params]
    order_rng = rng.split("batches")
    trace: list[float] = []
    n = len(train)
    for epoch in range(config.epochs_ae):
        total, seen = 0.0, 0
        for idx in _batches(n, config.batch_size, order_rng, epoch):
            batch = train.pixels[idx]
            try:
                with Graph() as g:
                    out = model.decode_t(model.encode_t(Tensor(batch)))
                    diff = add(out, Tensor(-batch))
                    loss = scale(sum_all(mul(diff, diff)), 1.0 / batch.size)
                backward(loss, g)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"autoencoder loss non-finite at epoch {epoch}") from exc
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(
                [p.data for p in params], grads, state, _cosine_lr(config.lr_ae, epoch, config.epochs_ae),
                config.beta1, config.beta2, config.adam_eps, config.weight_decay, decay_mask,
            )
            for p in params:
                p.zero_grad()
            total += loss.item() * idx.size
            seen += idx.size
        trace.append(total / seen)
    stats = RepStats.fit(model.encode(train.pixels))
    return model, stats, trace


def initial_flow_nll(x_std: np.ndarray) -> float:
    """Mean negative log density of standardized representations under N(0, I);
    the starting point an identity-like flow should reproduce."""
    d = x_std.shape[1]
    return float(0.5 * d * np.log(2 * np.pi) + 0.5 * (x_std**2).sum(axis=1).mean())


def train_cinn(
    config: TrainConfig, train: SampleSet, ae: AEModel, stats: RepStats, n_datasets: int
) -> tuple[FlowModel, list[float]]:
    """Maximum-likelihood training of the conditional flow on standardized
    representations. A small seeded Gaussian jitter (config.flow_noise) is
    added to each training batch; representations of rendered scenes hug a
    low-dimensional manifold, and the jitter keeps the density estimate,
    and with it the learned code distribution, well conditioned."""
    rng = RngStream(config.seed, "train-flow")
    x = stats.standardize(ae.encode(train.pixels))
    ys = train.labels
    flow = FlowModel.create(
        rng.split("init"), d=config.d, n_datasets=n_datasets,
        e=config.e, n_blocks=config.n_blocks, hidden=config.h, alpha=config.clamp_alpha,
    )
    order_rng = rng.split("batches")
    noise_rng = rng.split("jitter")
    n = len(train)

    first_idx = next(_batches(n, config.batch_size, order_rng, 0))
    first = x[first_idx] + config.flow_noise * noise_rng.split("init").normal(size=(first_idx.size, config.d))
    flow.actnorm_data_init(first, ys[first_idx])

    params = flow.params()
    state = AdamState([p.data for p in params])
    decay_mask = [p.data.ndim == 2 and p is not flow.embedding for p in params]
    trace: list[float] = []
    for epoch in range(config.epochs_flow):
        total, seen = 0.0, 0
        for bi, idx in enumerate(_batches(n, config.batch_size, order_rng, epoch)):
            xb = x[idx]
            if config.flow_noise > 0:
                xb = xb + config.flow_noise * noise_rng.split(f"{epoch}/{bi}").normal(size=xb.shape)
            try:
                with Graph() as g:
                    loss = flow.nll_loss_t(xb, ys[idx])
                backward(loss, g)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"flow NLL non-finite at epoch {epoch}") from exc
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adam_step(
                [p.data for p in params], grads, state, _cosine_lr(config.lr_flow, epoch, config.epochs_flow),
                config.beta1, config.beta2, config.adam_eps, config.weight_decay, decay_mask,
            )
            for p in params:
                p.zero_grad()
            total += loss.item() * idx.size
            seen += idx.size
        trace.append(total / seen)
    return flow, trace


@dataclass
class Checkpoint:
    """Everything needed to reload the pipeline: both models, representation
    stats, the dataset registry, the config that produced them, and summary
    metrics. Flow may be absent for a stage-one (autoencoder only) file."""

    config: TrainConfig
    registry: list[DatasetSpec]
    ae: AEModel
    stats: RepStats
    flow: FlowModel | None = None
    metrics: dict = field(default_factory=dict)


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for side, mlp in (("enc", ckpt.ae.encoder), ("dec", ckpt.ae.decoder)):
        for i, layer in enumerate(mlp.layers):
            out.append((f"ae.{side}.{i}.w", layer.weight.data))
            out.append((f"ae.{side}.{i}.b", layer.bias.data))
    out.append(("stats.mean", ckpt.stats.mean))
    out.append(("stats.std", ckpt.stats.std))
    if ckpt.flow is not None:
        out.append(("flow.embedding", ckpt.flow.embedding.data))
        for bi, block in enumerate(ckpt.flow.blocks):
            out.append((f"flow.{bi}.log_scale", block.log_scale.data))
            out.append((f"flow.{bi}.bias", block.bias.data))
            for li, layer in enumerate(block.net.layers):
                out.append((f"flow.{bi}.net.{li}.w", layer.weight.data))
                out.append((f"flow.{bi}.net.{li}.b", layer.bias.data))
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    tensors = _named_tensors(ckpt)
    blob = b"".join(tensor_to_bytes(arr) for _, arr in tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "registry": [s.to_dict() for s in ckpt.registry],
        "has_flow": ckpt.flow is not None,
        "flow_perms": [b.perm.tolist() for b in ckpt.flow.blocks] if ckpt.flow else [],
        "flow_flips": [b.flip for b in ckpt.flow.blocks] if ckpt.flow else [],
        "metrics": ckpt.metrics,
        "tensor_names": [name for name, _ in tensors],
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise CheckpointCorruptError(f"{path} truncated in header")
    try:
        header = json.loads(raw[off : off + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path} has an unreadable header") from exc
    off += hlen
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unknown checkpoint version {version!r}")
    blob = raw[off:]
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise CheckpointCorruptError(f"{path} failed its checksum")

    arrays: dict[str, np.ndarray] = {}
    pos = 0
    for name in header["tensor_names"]:
        try:
            arr, pos = tensor_from_bytes(blob, pos)
        except Exception as exc:
            raise CheckpointCorruptError(f"{path} truncated in tensor section") from exc
        arrays[name] = arr

    config = TrainConfig.from_dict(header["config"])
    registry = [DatasetSpec.from_dict(d) for d in header["registry"]]
    if [s.id for s in sorted(registry, key=lambda s: s.id)] != list(range(len(registry))):
        raise CheckpointError("registry ids are not contiguous")

    ae = AEModel.zeros(d=config.d, h=config.h)
    for side, mlp in (("enc", ae.encoder), ("dec", ae.decoder)):
        for i, layer in enumerate(mlp.layers):
            _load_into(layer.weight.data, arrays, f"ae.{side}.{i}.w")
            _load_into(layer.bias.data, arrays, f"ae.{side}.{i}.b")
    stats = RepStats(arrays["stats.mean"], arrays["stats.std"])

    flow = None
    if header["has_flow"]:
        flow = FlowModel.create(
            RngStream(0, "ckpt-load"), d=config.d, n_datasets=len(registry),
            e=config.e, n_blocks=config.n_blocks, hidden=config.h, alpha=config.clamp_alpha,
        )
        _load_into(flow.embedding.data, arrays, "flow.embedding")
        for bi, block in enumerate(flow.blocks):
            block.perm = np.asarray(header["flow_perms"][bi], dtype=np.int64)
            pmat = np.zeros((config.d, config.d))
            pmat[block.perm, np.arange(config.d)] = 1.0
            block.pmat = Tensor(pmat)
            block.flip = bool(header["flow_flips"][bi])
            _load_into(block.log_scale.data, arrays, f"flow.{bi}.log_scale")
            _load_into(block.bias.data, arrays, f"flow.{bi}.bias")
            for li, layer in enumerate(block.net.layers):
                _load_into(layer.weight.data, arrays, f"flow.{bi}.net.{li}.w")
                _load_into(layer.bias.data, arrays, f"flow.{bi}.net.{li}.b")
            block.initialized = True

    return Checkpoint(config=config, registry=registry, ae=ae, stats=stats, flow=flow, metrics=header["metrics"])


def _load_into(dest: np.ndarray, arrays: dict[str, np.ndarray], name: str) -> None:
    if name not in arrays:
        raise CheckpointCorruptError(f"missing tensor {name}")
    if arrays[name].shape != dest.shape:
        raise CheckpointCorruptError(f"tensor {name} has shape {arrays[name].shape}, expected {dest.shape}")
    dest[:] = arrays[name]


def write_trace_csv(path: str | Path, trace: list[float]) -> None:
    lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")

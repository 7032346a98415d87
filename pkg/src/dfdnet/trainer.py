"""Optimisation loop, checkpoint archive and PSNR/SSIM evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dfdnet.autodiff import Tensor, no_grad
from dfdnet.errors import ContractError
from dfdnet.image import DatasetManifest, RainParams, atomic_write, make_sample, sample_patches, synthesize_rain
from dfdnet.losses import LossWeights, composite_loss, psnr, ssim_value
from dfdnet.net import DerainNet, ModelConfig

log = logging.getLogger(__name__)

MAGIC = b"DFD1"
FORMAT_VERSION = 1
STREAMS = {"init": 1, "crops": 2, "rain": 3}


def substream_seed(root: int, stream: str, *keys: int) -> int:
    """Independent 63-bit seed for a named random stream under one root seed."""
    ss = np.random.SeedSequence([int(root), STREAMS[stream], *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# -- optimiser -------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: OptimState) -> None:
    """One bias-corrected Adam update of every named parameter, in place."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)


# -- checkpoint ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Model configuration plus ordered named float32 records."""

    config: ModelConfig
    records: dict[str, np.ndarray]
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        text = "".join(f"{k}={v}\n" for k, v in self.config.to_dict().items()).encode("utf-8")
        buf.write(struct.pack("<I", len(text)))
        buf.write(text)
        buf.write(struct.pack("<I", len(self.records)))
        for name, arr in self.records.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            buf.write(struct.pack("<I", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise ContractError("not a checkpoint file (bad magic)")
        pos = 4

        def u32() -> int:
            nonlocal pos
            (value,) = struct.unpack_from("<I", view, pos)
            pos += 4
            return value

        version = u32()
        if version != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        n = u32()
        text = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        config = ModelConfig.from_dict(dict(line.split("=", 1) for line in text.splitlines() if line))
        records = {}
        for _ in range(u32()):
            n = u32()
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            shape = tuple(u32() for _ in range(u32()))
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            records[name] = arr.astype(np.float32)
        if pos != len(blob):
            raise ContractError("trailing bytes after checkpoint records")
        return cls(config=config, records=records, version=version)

    def save(self, path: str | os.PathLike) -> None:
        blob = self.to_bytes()
        atomic_write(path, lambda tmp: Path(tmp).write_bytes(blob))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def iteration(self) -> int:
        return int(self.records.get("train/iteration", np.zeros(())).item())


def make_checkpoint(model: DerainNet, state: OptimState | None = None, iteration: int = 0) -> Checkpoint:
    records: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        records[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        records[f"buffer/{name}"] = b
    if state is not None:
        records["optim/step"] = np.asarray(state.step, dtype=np.float32)
        records["optim/lr"] = np.asarray(state.lr, dtype=np.float32)
        for name, _ in model.named_parameters():
            if name in state.m:
                records[f"optim/m/{name}"] = state.m[name]
                records[f"optim/v/{name}"] = state.v[name]
    records["train/iteration"] = np.asarray(iteration, dtype=np.float32)
    return Checkpoint(config=model.config, records={k: np.array(v, dtype=np.float32) for k, v in records.items()})


def restore(ckpt: Checkpoint, model: DerainNet | None = None, state: OptimState | None = None) -> DerainNet:
    """Load parameters and buffers (and optimiser moments) from ``ckpt``."""
    if model is None:
        model = DerainNet(ckpt.config)
    elif model.config != ckpt.config:
        diff = [k for k, v in ckpt.config.to_dict().items() if model.config.to_dict()[k] != v]
        raise ContractError(f"checkpoint config differs in field(s) {diff}")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    stored_params = {k[6:] for k in ckpt.records if k.startswith("param/")}
    stored_buffers = {k[7:] for k in ckpt.records if k.startswith("buffer/")}
    if stored_params != set(params) or stored_buffers != set(buffers):
        missing = sorted(set(params) ^ stored_params) + sorted(set(buffers) ^ stored_buffers)
        raise ContractError(f"checkpoint records do not match the model registry: {missing[:5]}")
    for name, p in params.items():
        src = ckpt.records[f"param/{name}"]
        if src.shape != p.shape:
            raise ContractError(f"checkpoint shape {src.shape} != model shape {p.shape} for {name}")
        p.data = src.astype(p.dtype).copy()
    for name, b in buffers.items():
        b[...] = ckpt.records[f"buffer/{name}"]
    if state is not None and "optim/step" in ckpt.records:
        state.step = int(ckpt.records["optim/step"].item())
        state.lr = float(ckpt.records["optim/lr"].item())
        state.m = {n: ckpt.records[f"optim/m/{n}"].copy() for n in params if f"optim/m/{n}" in ckpt.records}
        state.v = {n: ckpt.records[f"optim/v/{n}"].copy() for n in params if f"optim/v/{n}" in ckpt.records}
    return model


# -- training -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch: int = 4
    iters: int = 1000
    seed: int = 0
    halve_lr_every: int | None = None
    patch_size: int = 32
    log_every: int = 10
    val_every: int = 0
    checkpoint_every: int = 0
    weights: LossWeights = LossWeights()
    rain: RainParams | None = None

    @property
    def halve_every(self) -> int:
        if self.halve_lr_every:
            return int(self.halve_lr_every)
        return max(1, int(0.4 * self.iters))

    def lr_at(self, iteration: int) -> float:
        return self.lr * 0.5 ** ((iteration - 1) // self.halve_every)


LOG_COLUMNS = ("iter", "L_d", "L_s", "L_r", "L_c", "val_psnr")


@dataclass
class TrainResult:
    model: DerainNet
    state: OptimState
    losses: np.ndarray
    log_rows: list[dict]
    checkpoint: Checkpoint


def _batch_arrays(samples) -> tuple[np.ndarray, ...]:
    return tuple(np.stack([getattr(s, k) for s in samples]) for k in ("rainy", "clean", "structure", "detail"))


def training_batch(manifest: DatasetManifest, hyper: TrainHyper, iteration: int):
    """The (rainy, clean, structure, detail) batch for ``iteration``; a pure function of the seed."""
    samples = sample_patches(manifest, hyper.batch, hyper.patch_size, substream_seed(hyper.seed, "crops", iteration))
    if hyper.rain is not None:
        samples = [
            make_sample(synthesize_rain(s.clean, replace(hyper.rain, seed=substream_seed(hyper.seed, "rain", iteration, b))), s.clean)
            for b, s in enumerate(samples)
        ]
    return _batch_arrays(samples)


def loss_weights_for(config: ModelConfig, weights: LossWeights) -> LossWeights:
    # the single-branch baseline has no decomposed outputs to supervise
    if not config.dual:
        return LossWeights(0.0, 0.0, weights.reconstruction)
    return weights


def train_step(model: DerainNet, state: OptimState, batch, weights: LossWeights):
    rainy, clean, structure, detail = batch
    model.train()
    d_hat, s_hat, pred = model(Tensor(rainy))
    terms = composite_loss(d_hat, s_hat, pred, clean, detail, structure, loss_weights_for(model.config, weights),
                           return_terms=True)
    total = float(terms.total.data)
    if not math.isfinite(total):
        raise FloatingPointError(f"loss became non-finite ({total}) at step {state.step + 1}")
    model.zero_grad()
    terms.total.backward()
    adam_step(list(model.named_parameters()), state)
    return terms


def train(manifest: DatasetManifest, config: ModelConfig, hyper: TrainHyper,
          val_manifest: DatasetManifest | None = None, out_dir: str | os.PathLike | None = None,
          resume: Checkpoint | None = None) -> TrainResult:
    """Minimise the composite loss with Adam, halving the learning rate on schedule.

    When ``out_dir`` is given, ``log.csv`` and ``checkpoint.dfd`` are written
    there (the checkpoint every ``checkpoint_every`` steps and at the end).
    """
    if not manifest.entries:
        raise ContractError("training manifest has no entries")
    manifest.validate()
    model = DerainNet(config, seed=substream_seed(hyper.seed, "init"))
    state = OptimState(lr=hyper.lr)
    start = 1
    if resume is not None:
        restore(resume, model, state)
        start = resume.iteration + 1
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    losses, rows = [], []
    for it in range(start, hyper.iters + 1):
        state.lr = hyper.lr_at(it)
        terms = train_step(model, state, training_batch(manifest, hyper, it), hyper.weights)
        losses.append(float(terms.total.data))
        val = ""
        if val_manifest is not None and hyper.val_every and (it % hyper.val_every == 0 or it == hyper.iters):
            val = evaluate(model, val_manifest).mean["psnr_out"]
        if it % hyper.log_every == 0 or it == hyper.iters or val != "":
            row = dict(zip(LOG_COLUMNS, (it, *(float(t.data) for t in (terms.detail, terms.structure,
                                                                         terms.reconstruction, terms.total)), val)))
            rows.append(row)
            log.info("iter %d  L_c %.5f  L_d %.5f  L_s %.5f  L_r %.5f%s", it, row["L_c"], row["L_d"], row["L_s"],
                     row["L_r"], f"  val PSNR {val:.2f}" if val != "" else "")
        if out is not None and hyper.checkpoint_every and it % hyper.checkpoint_every == 0:
            make_checkpoint(model, state, it).save(out / "checkpoint.dfd")
    ckpt = make_checkpoint(model, state, max(hyper.iters, start - 1))
    if out is not None:
        ckpt.save(out / "checkpoint.dfd")
        write_log(out / "log.csv", rows)
    return TrainResult(model, state, np.asarray(losses), rows, ckpt)


def write_log(path: str | os.PathLike, rows: list[dict]) -> None:
    def writer(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            w.writerows(rows)

    atomic_write(path, writer)


def smoothed(values: np.ndarray, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) : i+1]."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# -- evaluation --------------------------------------------------------------------

EVAL_COLUMNS = ("path", "psnr_in", "psnr_out", "ssim_in", "ssim_out")


@dataclass
class EvalReport:
    rows: list[dict]
    mean: dict

    def write_csv(self, path: str | os.PathLike) -> None:
        def fmt(v):
            return v if isinstance(v, str) else ("inf" if math.isinf(v) else f"{v:.6f}")

        def writer(tmp):
            with open(tmp, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(EVAL_COLUMNS)
                for row in self.rows + [self.mean]:
                    w.writerow([fmt(row[c]) for c in EVAL_COLUMNS])

        atomic_write(path, writer)


def derain(model: DerainNet, rainy: np.ndarray) -> np.ndarray:
    """Eval-mode prediction for one 3xHxW image, clipped to [0, 1]."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            _, _, pred = model(Tensor(rainy[None]))
    finally:
        model.train(was_training)
    return np.clip(pred.data[0], 0.0, 1.0)


def evaluate(model: DerainNet | Checkpoint, manifest: DatasetManifest) -> EvalReport:
    """Per-image and mean PSNR/SSIM of the rainy inputs and the derained outputs."""
    if isinstance(model, Checkpoint):
        model = restore(model)
    if not manifest.entries:
        raise ContractError("manifest has no entries")
    manifest.validate()
    rows = []
    for i, (rainy_path, _) in enumerate(manifest.entries):
        rainy, clean = manifest.pair(i)
        out = derain(model, rainy)
        if out.shape != rainy.shape:
            raise ContractError(f"derained shape {out.shape} != input shape {rainy.shape}")
        rows.append({
            "path": str(rainy_path),
            "psnr_in": psnr(rainy, clean), "psnr_out": psnr(out, clean),
            "ssim_in": ssim_value(rainy, clean), "ssim_out": ssim_value(out, clean),
        })
    mean = {"path": "mean"}
    for col in EVAL_COLUMNS[1:]:
        mean[col] = float(np.mean([r[col] for r in rows]))
    return EvalReport(rows, mean)

"""Optimization loop: AdamW with cosine-decayed learning rate, sequence-aware
batching (memory reset per sequence, carried across its frames), CSV logs and
bit-exact binary checkpoints."""

from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .engine import Tensor
from .losses import LossWeights
from .metrics import MetricReport, aggregate_reports, evaluate_frame
from .model import DepthModel, composite_loss
from .bins import smooth_prior
from .scene import Dataset, SequenceData
from .stack import RunFlags


@dataclass
class TrainConfig:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    epochs: int = 30
    batch_frames: int = 8          # desk-scale: 2 sequences of 4 frames
    grad_clip: float = 5.0
    seed: int = 0
    eval_every: int = 5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_frames < 1:
            raise ValueError("batch size must be >= 1")


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * t / total_steps)))


class AdamW:
    """Decoupled weight decay; bias-corrected moments."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g.sum()):
                raise E.NonFiniteError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= (lr * update + lr * cfg.weight_decay * p.data).astype(p.data.dtype)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CUEDCKPT"
_CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    import hashlib
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, model: DepthModel, optimizer: AdamW | None,
                    step: int, config: dict, rng_state: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0

    def push(name, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr)
        dtype = "<f4" if a.dtype == np.float32 else "<f8"
        raw = a.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.parameters().items():
        push(f"param/{name}", p.data)
    if optimizer is not None:
        for name in optimizer.m:
            push(f"adam_m/{name}", optimizer.m[name])
            push(f"adam_v/{name}", optimizer.v[name])
    header = {
        "version": _CKPT_VERSION,
        "step": step,
        "opt_step": optimizer.step_count if optimizer is not None else 0,
        "config": config,
        "config_hash": config_hash(config),
        "rng_state": rng_state,
        "entries": entries,
    }
    hjson = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for raw in blobs:
            f.write(raw)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
    return header


def load_checkpoint(path, model: DepthModel, optimizer: AdamW | None = None,
                    warn=print) -> dict:
    """Restore parameters (and optimizer moments) in place; returns the header."""
    path = Path(path)
    header = read_checkpoint_header(path)
    with open(path, "rb") as f:
        f.seek(8)
        (hlen,) = struct.unpack("<Q", f.read(8))
        base = 16 + hlen
        data_size = path.stat().st_size - base
        expected = sum(e["nbytes"] for e in header["entries"])
        if data_size != expected:
            raise CheckpointError(
                f"{path}: truncated or corrupt (payload {data_size} bytes, "
                f"manifest says {expected})")
        f.seek(base)
        payload = f.read()

    def pull(entry):
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        return np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()

    by_name = {e["name"]: e for e in header["entries"]}
    params = model.parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in by_name:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = pull(by_name[key])
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: checkpoint "
                f"{arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=False)
    if optimizer is not None:
        for name in optimizer.m:
            optimizer.m[name] = pull(by_name[f"adam_m/{name}"])
            optimizer.v[name] = pull(by_name[f"adam_v/{name}"])
        optimizer.step_count = header.get("opt_step", header["step"])
    return header


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: str
    steps: int
    epoch0_metrics: MetricReport
    final_metrics: MetricReport
    eval_rows: list
    loss_rows: list
    runtime_s: float


def evaluate_sequences(model: DepthModel, sequences: list[SequenceData],
                       flags: RunFlags | None = None,
                       frame_transform=None) -> tuple[MetricReport, list]:
    reports = []
    rows = []
    for seq in sequences:
        frames = seq.frames
        if frame_transform is not None:
            frames = frame_transform(frames)
        results, _ = model.forward_sequence(frames, flags)
        for i, (res, frame) in enumerate(zip(results, frames)):
            if frame.get("_blank"):
                continue
            rep = evaluate_frame(res.depth.data, frame["depth"], frame["edges"])
            reports.append(rep)
            rows.append({"scene": seq.scene_id, "frame": i, **rep.as_dict()})
    return aggregate_reports(reports), rows


def train(dataset: Dataset, model: DepthModel, cfg: TrainConfig,
          weights: LossWeights, out_dir, run_config: dict | None = None,
          flags: RunFlags | None = None, frame_transform=None,
          log=print) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flags = flags or RunFlags()
    t_start = time.time()

    train_seqs = dataset.split("train")
    val_seqs = dataset.split("val")
    if not train_seqs:
        raise ValueError("dataset has no training sequences")
    prior = smooth_prior(dataset.depth_prior)
    d_min, d_max = dataset.d_min, dataset.d_max

    seq_len = len(train_seqs[0].frames)
    seqs_per_batch = max(cfg.batch_frames // seq_len, 1)
    steps_per_epoch = int(np.ceil(len(train_seqs) / seqs_per_batch))
    total_steps = cfg.epochs * steps_per_epoch

    params = model.parameters()
    optimizer = AdamW(params, cfg)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))

    def prepared(seq: SequenceData):
        return frame_transform(seq.frames) if frame_transform else seq.frames

    eval0, _ = evaluate_sequences(model, val_seqs or train_seqs, flags, frame_transform)
    eval_rows = [{"epoch": 0, "step": 0, **eval0.as_dict()}]
    log(f"epoch 0 (init): silog={eval0.silog:.4f} d1={eval0.delta1:.3f} "
        f"abs_rel={eval0.abs_rel:.3f}")

    loss_rows = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(train_seqs))
        for b0 in range(0, len(perm), seqs_per_batch):
            batch = [train_seqs[i] for i in perm[b0:b0 + seqs_per_batch]]
            model.zero_grad()
            term_acc: dict[str, float] = {}
            for seq in batch:
                frames = prepared(seq)
                with E.Tape() as tape:
                    results, _ = model.forward_sequence(frames, flags)
                    seq_loss = None
                    for res, frame in zip(results, frames):
                        if frame.get("_blank"):
                            continue
                        l, terms = composite_loss(model, res, frame, weights,
                                                  prior, d_min, d_max)
                        seq_loss = l if seq_loss is None else E.add(seq_loss, l)
                        for k, v in terms.items():
                            term_acc[k] = term_acc.get(k, 0.0) + v
                    seq_loss = E.div(seq_loss, float(len(results)))
                if not np.isfinite(seq_loss.data):
                    raise RuntimeError(
                        f"non-finite loss at step {step} (epoch {epoch})")
                tape.backward(seq_loss)
            for p in params.values():
                if p.grad is not None:
                    p.grad /= len(batch)
            grad_norm = clip_global_norm(params, cfg.grad_clip)
            lr = cosine_lr(cfg.lr, step, total_steps)
            optimizer.step(lr)
            n_frames = sum(len(s.frames) for s in batch)
            row = {"step": step, "epoch": epoch, "lr": lr, "grad_norm": grad_norm}
            row.update({k: v / n_frames for k, v in term_acc.items()})
            loss_rows.append(row)
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 and epoch + 1 < cfg.epochs:
            rep, _ = evaluate_sequences(model, val_seqs or train_seqs, flags,
                                        frame_transform)
            eval_rows.append({"epoch": epoch + 1, "step": step, **rep.as_dict()})
            log(f"epoch {epoch + 1}: silog={rep.silog:.4f} d1={rep.delta1:.3f} "
                f"loss={loss_rows[-1]['total']:.4f} lr={lr:.2e}")

    final, _ = evaluate_sequences(model, val_seqs or train_seqs, flags, frame_transform)
    eval_rows.append({"epoch": cfg.epochs, "step": step, **final.as_dict()})
    log(f"final: silog={final.silog:.4f} d1={final.delta1:.3f} "
        f"abs_rel={final.abs_rel:.3f}")

    ckpt_path = out / "checkpoint.ckpt"
    rng_state = order_rng.bit_generator.state
    save_checkpoint(ckpt_path, model, optimizer, step,
                    run_config or {}, rng_state=rng_state)
    _write_csv(out / "train_log.csv", loss_rows)
    _write_csv(out / "eval_log.csv", eval_rows)
    return TrainResult(checkpoint_path=str(ckpt_path), steps=step,
                       epoch0_metrics=eval0, final_metrics=final,
                       eval_rows=eval_rows, loss_rows=loss_rows,
                       runtime_s=time.time() - t_start)


def _write_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

"""
Desk-scale training loop: AdamW, cosine schedule with linear warm-up, clipping,
masked next-token cross-entropy. Checkpoints are SPKT files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import pickle
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from sparsekit.exceptions import ArgumentException, StorageException, TrainingDivergedException
from sparsekit.numerics import Rng, make_rng
from sparsekit.trainer.config import ToyModelConfig, TrainHyperParams
from sparsekit.trainer.model import ToyDecoder
from sparsekit.trainer.tasks import Batch, BatchSource

CHECKPOINT_MAGIC = b"SPKT"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("step", "loss", "lr", "wall_ms")

_PREFIX = struct.Struct("<4sHI")


def train_logger(run: str) -> logging.LoggerAdapter:
    return logging.LoggerAdapter(logging.getLogger("sparsekit_train"), extra={"run": run})


@dataclass
class TrainState:
    model_cfg: ToyModelConfig
    hyper: TrainHyperParams
    model: ToyDecoder
    optimizer: torch.optim.Optimizer
    rng: Rng
    step: int = 0
    losses: List[float] = field(default_factory=list)

    @property
    def last_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def build_optimizer(model: ToyDecoder, hyper: TrainHyperParams) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.decay_groups(hyper.weight_decay), lr=hyper.lr, betas=tuple(hyper.betas))


def new_train_state(model_cfg: ToyModelConfig, hyper: TrainHyperParams) -> TrainState:
    model = ToyDecoder(model_cfg)
    return TrainState(
        model_cfg=model_cfg,
        hyper=hyper,
        model=model,
        optimizer=build_optimizer(model, hyper),
        rng=make_rng(model_cfg.seed),
    )


def lr_at(step: int, hyper: TrainHyperParams) -> float:
    """
    linear warm-up from warmup_from to lr, then cosine decay to min_lr over the remaining steps.
    """
    if step < hyper.warmup:
        return hyper.warmup_from + (hyper.lr - hyper.warmup_from) * step / hyper.warmup
    span = max(1, hyper.steps - hyper.warmup)
    ratio = min(1.0, (step - hyper.warmup) / span)
    return hyper.min_lr + 0.5 * (1.0 + math.cos(math.pi * ratio)) * (hyper.lr - hyper.min_lr)


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    weights = mask.reshape(-1).to(ce.dtype)
    return (ce * weights).sum() / weights.sum().clamp(min=1.0)


# ---- batches ---- #

def rng_state(rng: Rng) -> dict:
    """
    JSON-safe snapshot of the Philox stream.
    """
    state = rng.bit_generator.state

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, np.integer):
            return int(v)
        return v

    return plain(state)


def restore_rng(state: dict) -> Rng:
    rng = make_rng(0)
    raw = dict(state)
    raw["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in state["state"].items()}
    raw["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
    rng.bit_generator.state = raw
    return rng


class _Prefetcher:
    """
    draws batches on a background thread through a bounded queue.
    each item carries the rng state right after its batch, so a checkpoint
    resumes exactly at the consumed batch.
    """

    def __init__(self, source: BatchSource, rng: Rng, batch: int, length: int, count: int, size: int):
        self._queue: queue.Queue = queue.Queue(maxsize=size)
        self._stop = threading.Event()
        self._args = (source, rng, batch, length, count)
        self._thread = threading.Thread(target=self._run, name="sparsekit-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        source, rng, batch, length, count = self._args
        try:
            for _ in range(count):
                item = (source.batch(rng, batch, length), rng_state(rng))
                if not self._put(item):
                    return
        except Exception as e:
            self._put(e)

    def get(self) -> Tuple[Batch, dict]:
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=1.0)


def _grad_norms(model: ToyDecoder) -> Dict[str, float]:
    norms = {}
    for name, p in model.named_parameters():
        if p.grad is not None:
            norms[name] = float(p.grad.detach().norm())
    return norms


def _json_float(v: float):
    return v if math.isfinite(v) else str(v)


def _dump_divergence(out_dir: Path | None, step: int, loss: float, norms: Dict[str, float]) -> Path | None:
    if out_dir is None:
        return None
    path = out_dir / "divergence.json"
    body = {
        "step": step,
        "loss": _json_float(loss),
        "grad_norms": {k: _json_float(v) for k, v in norms.items()},
    }
    path.write_text(json.dumps(body, indent=2))
    return path


def train(
        source: BatchSource,
        model_cfg: ToyModelConfig | None = None,
        hyper: TrainHyperParams | None = None,
        out_dir: str | Path | None = None,
        state: TrainState | None = None,
        run: str = "train",
        until: int | None = None,
) -> TrainState:
    """
    trains until state.step == hyper.steps (or `until`, which keeps the schedule of
    hyper.steps); pass `state` to continue a checkpoint.
    writes metrics.csv (and divergence.json on a non-finite loss) under out_dir.
    """
    if state is None:
        if model_cfg is None or hyper is None:
            raise ArgumentException("train needs configs or a state")
        state = new_train_state(model_cfg, hyper)
    hyper = state.hyper
    model_cfg = state.model_cfg
    log = train_logger(run)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fp = None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fresh = state.step == 0 or not metrics_path.exists()
        metrics_fp = metrics_path.open("w" if fresh else "a", newline="")
        writer = csv.writer(metrics_fp)
        if fresh:
            writer.writerow(METRICS_HEADER)

    stop = hyper.steps if until is None else min(until, hyper.steps)
    remaining = max(0, stop - state.step)
    length = model_cfg.context
    prefetch = _Prefetcher(source, state.rng, hyper.batch, length, remaining, hyper.prefetch) \
        if hyper.prefetch and remaining > 0 else None
    log.info("training kind=%s params=%d from step %d to %d",
             model_cfg.kind, state.model.num_params(), state.step, stop)
    model = state.model
    model.train()
    try:
        while state.step < stop:
            begin = time.perf_counter()
            if prefetch is not None:
                (inputs, targets, mask), snapshot = prefetch.get()
            else:
                inputs, targets, mask = source.batch(state.rng, hyper.batch, length)
                snapshot = None
            lr = lr_at(state.step, hyper)
            for group in state.optimizer.param_groups:
                group["lr"] = lr

            logits = model(inputs, chunk_len=hyper.chunk_len)
            loss = masked_cross_entropy(logits, targets, mask)
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            value = float(loss.detach())
            total_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), hyper.clip))
            if not (math.isfinite(value) and math.isfinite(total_norm)):
                norms = _grad_norms(model)
                path = _dump_divergence(out, state.step, value, norms)
                log.error("diverged at step %d: loss=%s grad_norm=%s dump=%s", state.step, value, total_norm, path)
                raise TrainingDivergedException(f"loss {value} / grad norm {total_norm} at step {state.step}",
                                                at=str(path or ""))
            state.optimizer.step()
            if snapshot is not None:
                state.rng = restore_rng(snapshot)

            state.step += 1
            state.losses.append(value)
            wall_ms = (time.perf_counter() - begin) * 1000.0
            if writer is not None:
                writer.writerow((state.step, repr(value), repr(lr), f"{wall_ms:.3f}"))
            if state.step % hyper.log_every == 0 or state.step == stop:
                log.info("step %d loss %.4f lr %.2e %.1fms", state.step, value, lr, wall_ms)
    finally:
        if prefetch is not None:
            prefetch.close()
        if metrics_fp is not None:
            metrics_fp.close()
    return state


# ---- checkpoints ---- #

def save_checkpoint(state: TrainState, fp: BinaryIO) -> None:
    """
    "SPKT" | u16 version | u32 header length | JSON header | torch.save payload
    """
    header = json.dumps({
        "model": json.loads(state.model_cfg.json()),
        "hyper": json.loads(state.hyper.json()),
        "step": state.step,
        "losses": state.losses,
        "rng": rng_state(state.rng),
    }).encode("utf-8")
    payload = io.BytesIO()
    torch.save({
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }, payload)
    fp.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
    fp.write(header)
    fp.write(payload.getvalue())


def load_checkpoint(fp: BinaryIO) -> TrainState:
    prefix = fp.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise StorageException("truncated checkpoint prefix")
    magic, version, size = _PREFIX.unpack(prefix)
    if magic != CHECKPOINT_MAGIC:
        raise StorageException(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise StorageException(f"unsupported checkpoint version {version}")
    raw = fp.read(size)
    if len(raw) < size:
        raise StorageException("truncated checkpoint header")
    try:
        header = json.loads(raw.decode("utf-8"))
        model_cfg = ToyModelConfig.parse_obj(header["model"])
        hyper = TrainHyperParams.parse_obj(header["hyper"])
        payload = torch.load(io.BytesIO(fp.read()), map_location="cpu", weights_only=True)
    except (ValueError, KeyError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise StorageException("unreadable checkpoint", e=e)

    model = ToyDecoder(model_cfg)
    model.load_state_dict(payload["model"])
    optimizer = build_optimizer(model, hyper)
    optimizer.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["torch_rng"])
    return TrainState(
        model_cfg=model_cfg,
        hyper=hyper,
        model=model,
        optimizer=optimizer,
        rng=restore_rng(header["rng"]),
        step=int(header["step"]),
        losses=[float(x) for x in header["losses"]],
    )


def save_checkpoint_file(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fp:
        save_checkpoint(state, fp)
    return path


def load_checkpoint_file(path: str | Path) -> TrainState:
    try:
        with Path(path).open("rb") as fp:
            return load_checkpoint(fp)
    except OSError as e:
        raise StorageException(f"cannot read checkpoint {path}", at=str(path), e=e)


def metrics_rows(path: str | Path) -> List[dict]:
    with Path(path).open(newline="") as fp:
        return list(csv.DictReader(fp))


def final_loss(state: TrainState, window: int = 10) -> Optional[float]:
    """
    mean of the last `window` losses.
    """
    if not state.losses:
        return None
    tail = state.losses[-window:]
    return sum(tail) / len(tail)

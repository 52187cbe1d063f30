"""Loss, Adam with plateau decay, the training loop, and checkpoint files.

Checkpoint layout::

    b"MVPC"  u8 version=1  u32 header_len  header (UTF-8 JSON)
    float32 little-endian payloads, concatenated in manifest order
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset
from .model import ModelConfig, Parameters, init_params, model_forward, parameter_shapes
from .numerics import NonFiniteError, Tensor, make_rng, no_grad, reduce, sub

__all__ = [
    "NumericalAbort",
    "CheckpointError",
    "loss",
    "OptimState",
    "adam_step",
    "SchedulerState",
    "plateau_step",
    "TrainHyper",
    "TrainResult",
    "make_pairs",
    "train",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MVPC"
CKPT_VERSION = 1


class NumericalAbort(FloatingPointError):
    """Training hit a NaN/Inf loss."""


class CheckpointError(ValueError):
    pass


def loss(predictions: Sequence[Tensor], target, deep_supervision: bool = True, normalize: bool = True) -> Tensor:
    """Squared-Frobenius plus L1 error of the predictions against ``target`` [B, n, C0, H0, W0].

    ``predictions`` holds one tensor per supervised decoder layer; with
    ``deep_supervision`` the per-layer losses are averaged, otherwise only the
    last one counts. ``normalize`` divides by B*n.
    """
    preds = list(predictions)
    if not preds:
        raise ValueError("need at least one supervised prediction")
    if not deep_supervision:
        preds = preds[-1:]
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=preds[-1].dtype))
    total = None
    for p in preds:
        if p.shape != target.shape:
            raise ValueError(f"prediction shape {p.shape} != target shape {target.shape}")
        r = sub(p, target)
        term = reduce(r, "sum_of_squares") + reduce(r, "sum_of_abs")
        total = term if total is None else total + term
    scale = 1.0 / len(preds)
    if normalize:
        scale /= target.shape[0] * target.shape[1]
    return total * scale


# -- optimizer ------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def _global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))


def adam_step(params: Parameters, state: OptimState, clip_norm: Optional[float] = None) -> OptimState:
    """Bias-corrected Adam update in place; gradients are cleared afterwards."""
    missing = [name for name, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for {len(missing)} trainable parameter(s), e.g. {missing[0]}")
    scale = 1.0
    if clip_norm is not None:
        norm = _global_norm(p.grad for p in params.values() if p.requires_grad)
        if norm > clip_norm:
            scale = clip_norm / norm
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad * scale if scale != 1.0 else p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        p.grad = None
    return state


@dataclass
class SchedulerState:
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    threshold: float = 1e-6
    best: float = math.inf
    counter: int = 0


def plateau_step(state: SchedulerState, epoch_loss: float, lr: float) -> float:
    """Update the plateau tracker and return the (possibly reduced) learning rate."""
    if not math.isfinite(epoch_loss):
        raise NumericalAbort(f"non-finite epoch loss {epoch_loss}")
    if epoch_loss < state.best - state.threshold:
        state.best = epoch_loss
        state.counter = 0
        return lr
    state.counter += 1
    if state.counter >= state.patience:
        state.counter = 0
        return max(lr * state.factor, state.min_lr)
    return lr


# -- training loop --------------------------------------------------------

@dataclass
class TrainHyper:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-6
    clip_norm: Optional[float] = None
    normalize_loss: bool = True
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 100
    eval_every: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def np_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return np.dtype(self.dtype)


@dataclass
class TrainResult:
    params: Parameters
    history: List[tuple]  # (step, loss, lr)
    optim: OptimState
    scheduler: SchedulerState
    rng_state: dict
    epoch: int = 0
    epoch_pos: int = 0
    epoch_loss_sum: float = 0.0
    epoch_loss_count: int = 0
    order: Optional[np.ndarray] = None
    evals: List[dict] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.optim.step


def make_pairs(ds: Dataset, cfg: ModelConfig):
    """Split each sequence into (first m frames, next out_len frames)."""
    need = cfg.m + cfg.out_len
    if ds.seq_len < need:
        raise ValueError(f"sequences have {ds.seq_len} frames, need at least m + out_len = {need}")
    if tuple(ds.frame_shape) != (cfg.C0, cfg.H0, cfg.W0):
        raise ValueError(f"data frames {ds.frame_shape} do not match model {(cfg.C0, cfg.H0, cfg.W0)}")
    seqs = ds.sequences
    return seqs[:, :cfg.m], seqs[:, cfg.m:need]


def _layer_sweep(params: Parameters, cfg: ModelConfig, x: np.ndarray) -> str:
    try:
        with no_grad():
            model_forward(x, params, cfg, debug=True)
    except NonFiniteError as exc:
        return str(exc)
    bad = [k for k, p in params.items() if not p.is_finite()]
    return f"non-finite parameters: {bad[:5]}" if bad else "all layer outputs finite"


def train(cfg: ModelConfig, dataset: Dataset, hyper: TrainHyper, resume: Optional[TrainResult] = None,
          on_step: Optional[Callable[[int, float, float], None]] = None,
          evaluator: Optional[Callable[[Parameters], dict]] = None) -> TrainResult:
    """Minibatch Adam on (m inputs -> next frames) pairs, reproducible from (seed, config, data).

    An epoch is one pass over the shuffled training pairs; the plateau
    scheduler is updated with the mean loss of each completed epoch.
    ``hyper.steps`` counts total optimizer steps, including resumed ones.
    When ``evaluator`` is given it is called every ``hyper.eval_every`` steps
    and its result is appended to ``evals`` along with the step number.
    """
    dtype = hyper.np_dtype
    xs, ys = make_pairs(dataset, cfg)
    xs, ys = xs.astype(dtype), ys.astype(dtype)
    N = len(xs)
    bs = min(hyper.batch_size, N)

    if resume is None:
        params = init_params(cfg, hyper.seed, dtype)
        optim = OptimState(hyper.lr, hyper.beta1, hyper.beta2, hyper.adam_eps)
        sched = SchedulerState(hyper.patience, hyper.factor, hyper.min_lr)
        rng = make_rng(hyper.seed + 1)
        state = TrainResult(params, [], optim, sched, rng.bit_generator.state)
    else:
        state = resume
        rng = make_rng(0)
        rng.bit_generator.state = state.rng_state

    params, optim, sched = state.params, state.optim, state.scheduler
    while optim.step < hyper.steps:
        if state.order is None or state.epoch_pos + bs > N:
            if state.order is not None and state.epoch_loss_count:
                optim.lr = plateau_step(sched, state.epoch_loss_sum / state.epoch_loss_count, optim.lr)
                state.epoch += 1
            state.order = rng.permutation(N)
            state.epoch_pos = 0
            state.epoch_loss_sum = 0.0
            state.epoch_loss_count = 0
        idx = np.sort(state.order[state.epoch_pos:state.epoch_pos + bs])
        state.epoch_pos += bs

        result = model_forward(xs[idx], params, cfg)
        value = loss(result.layer_predictions, ys[idx], cfg.deep_supervision, hyper.normalize_loss)
        lv = float(value.item())
        if not math.isfinite(lv):
            raise NumericalAbort(f"loss became {lv} at step {optim.step + 1}; {_layer_sweep(params, cfg, xs[idx])}")
        value.backward()
        adam_step(params, optim, hyper.clip_norm)
        state.history.append((optim.step, lv, optim.lr))
        state.epoch_loss_sum += lv
        state.epoch_loss_count += 1
        if on_step is not None:
            on_step(optim.step, lv, optim.lr)
        if hyper.log_every and optim.step % hyper.log_every == 0:
            log.info("step %d loss %.6f lr %.2e", optim.step, lv, optim.lr)
        if evaluator is not None and hyper.eval_every and optim.step % hyper.eval_every == 0:
            with no_grad():
                state.evals.append({"step": optim.step, **evaluator(params)})
    state.rng_state = rng.bit_generator.state
    return state


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: Parameters
    optim: OptimState
    scheduler: SchedulerState
    step: int
    rng_state: dict
    history: List[tuple]
    extra: dict = field(default_factory=dict)
    progress: dict = field(default_factory=dict)

    @classmethod
    def from_result(cls, cfg: ModelConfig, result: TrainResult, extra: Optional[dict] = None) -> "Checkpoint":
        progress = {
            "epoch": result.epoch,
            "epoch_pos": result.epoch_pos,
            "epoch_loss_sum": result.epoch_loss_sum,
            "epoch_loss_count": result.epoch_loss_count,
            "order": None if result.order is None else result.order.tolist(),
        }
        return cls(cfg, result.params, result.optim, result.scheduler, result.optim.step,
                   result.rng_state, list(result.history), dict(extra or {}), progress)

    def to_result(self) -> TrainResult:
        p = self.progress or {}
        order = p.get("order")
        return TrainResult(self.params, list(self.history), self.optim, self.scheduler, self.rng_state,
                           p.get("epoch", 0), p.get("epoch_pos", 0), p.get("epoch_loss_sum", 0.0),
                           p.get("epoch_loss_count", 0), None if order is None else np.asarray(order))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest = []
    payloads = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(blob)
        offset += len(blob)

    for name, p in ckpt.params.items():
        add(name, p.data)
    for name in ckpt.params:
        if name in ckpt.optim.m:
            add(f"optim.m.{name}", ckpt.optim.m[name])
            add(f"optim.v.{name}", ckpt.optim.v[name])
    header = {
        "config": ckpt.config.to_dict(),
        "manifest": manifest,
        "payload_bytes": offset,
        "optim": ckpt.optim.scalars(),
        "scheduler": asdict(ckpt.scheduler),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "history": [list(h) for h in ckpt.history],
        "progress": ckpt.progress,
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 9 + hlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[start:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest expects {header['payload_bytes']}")

    cfg = ModelConfig.from_dict(header["config"])
    shapes = parameter_shapes(cfg)
    arrays = {}
    for entry in header["manifest"]:
        count = math.prod(entry["shape"])
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"]) \
            .reshape(entry["shape"]).astype(dtype)
    params: Parameters = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: manifest lacks parameter {name}")
        if tuple(arrays[name].shape) != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}")
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    extra_names = {e["name"] for e in header["manifest"]} - set(shapes)
    stray = [n for n in extra_names if not n.startswith(("optim.m.", "optim.v."))]
    if stray:
        raise CheckpointError(f"{path}: manifest has tensors not in the model: {sorted(stray)[:3]}")

    o = header["optim"]
    optim = OptimState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"])
    for name in shapes:
        if f"optim.m.{name}" in arrays:
            optim.m[name] = arrays[f"optim.m.{name}"]
            optim.v[name] = arrays[f"optim.v.{name}"]
    sched = SchedulerState(**header["scheduler"])
    history = [tuple(h) for h in header["history"]]
    return Checkpoint(cfg, params, optim, sched, header["step"], header["rng_state"], history,
                      header.get("extra", {}), header.get("progress", {}))

"""Adam, the milestone learning-rate schedule, the training loop and checkpoints."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .cytr import load_checkpoint, save_checkpoint
from .data import PKSampler, SampleArrays
from .losses import LOSS_NAMES, KernelBank, LossWeights, objective
from .params import ParameterStore
from .pipeline import CycleTransNet, ModelConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", *LOSS_NAMES, "total", "lr"]


class TrainingAborted(RuntimeError):
    """A non-finite loss or gradient stopped training."""


# ------------------------------------------------------------------- Adam

class Adam:
    def __init__(self, store: ParameterStore, lr: float = 3.5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = None):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip = clip
        self.steps = 0
        self.m = {pid: np.zeros_like(p.data) for pid, p in store.items()}
        self.v = {pid: np.zeros_like(p.data) for pid, p in store.items()}

    def step(self) -> None:
        """Bias-corrected Adam update of every registered parameter, then zero the grads."""
        grads = {}
        for pid, p in self.store.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(f"non-finite gradient for parameter {pid}")
            grads[pid] = g
        if self.clip is not None:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > self.clip:
                grads = {pid: g * (self.clip / total) for pid, g in grads.items()}
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for pid, p in self.store.items():
            g = grads[pid]
            self.m[pid] = b1 * self.m[pid] + (1 - b1) * g
            self.v[pid] = b2 * self.v[pid] + (1 - b2) * g * g
            m_hat = self.m[pid] / c1
            v_hat = self.v[pid] / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            p.grad = None


def adam_step(store: ParameterStore, state: Adam) -> None:
    state.step()


# --------------------------------------------------------------- schedule

@dataclass
class Schedule:
    base_lr: float = 3.5e-4
    milestones: tuple[int, ...] = (40, 70)
    decay: float = 0.1
    total_epochs: int = 140

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        self.milestones = ms


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.decay ** passed


# ------------------------------------------------------------------ train

@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 3.5e-4
    milestones: tuple[int, ...] = (40, 70)
    decay: float = 0.1
    lambdas: tuple[float, float, float, float] = (0.2, 1.0, 0.1, 0.1)
    margin: float = 0.5
    batch_identities: int = 8
    k_visible: int = 4
    k_infrared: int = 4
    clip: float | None = None
    checkpoint_every: int = 0
    seed: int = 0

    def schedule(self) -> Schedule:
        # milestones past the run length are simply never reached
        return Schedule(self.lr, tuple(self.milestones), self.decay, max(self.epochs, 1))

    def weights(self) -> LossWeights:
        return LossWeights.from_lambdas(self.lambdas, self.margin)


@dataclass
class TrainResult:
    net: CycleTransNet
    history: list[dict] = field(default_factory=list)
    steps_per_epoch: list[int] = field(default_factory=list)

    def epoch_means(self, column: str) -> list[float]:
        out, start = [], 0
        for n in self.steps_per_epoch:
            rows = self.history[start:start + n]
            start += n
            vals = [r[column] for r in rows if r[column] == r[column]]
            out.append(float(np.mean(vals)) if vals else float("nan"))
        return out


def train_step(net: CycleTransNet, opt: Adam, arrays: SampleArrays, index: np.ndarray,
               weights: LossWeights) -> dict[str, float]:
    batch = arrays.subset(index)
    with T.Tape() as tape:
        fwd = net.forward_batch(T.Tensor(batch.maps), batch.modalities, batch.labels)
        total, comps = objective(fwd, batch.labels, batch.modalities, net.classifier, weights,
                                 variant=net.config.variant)
    if not np.isfinite(total.item()):
        raise TrainingAborted("total loss is not finite")
    T.backward(total, tape)
    opt.step()
    row = {name: (comps[name].item() if name in comps else float("nan")) for name in LOSS_NAMES}
    row["total"] = total.item()
    return row


def train(model_config: ModelConfig, config: TrainConfig, arrays: SampleArrays,
          out_dir=None, init_seed: int | None = None) -> TrainResult:
    """Run the optimisation loop; writes ``loss_log.csv`` and checkpoints when ``out_dir`` is set."""
    seed = config.seed if init_seed is None else init_seed
    net = CycleTransNet(model_config, seed=seed)
    opt = Adam(net.store, lr=config.lr, clip=config.clip)
    sampler = PKSampler(arrays.labels, arrays.modalities, config.batch_identities,
                        config.k_visible, config.k_infrared, seed=seed + 1)
    schedule = config.schedule()
    weights = config.weights()
    result = TrainResult(net)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss_log.csv", "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    step = 0
    try:
        for epoch in range(config.epochs):
            opt.lr = lr_at_epoch(schedule, epoch)
            n_steps = 0
            for index in sampler:
                try:
                    row = train_step(net, opt, arrays, index, weights)
                except (T.NonFiniteError, TrainingAborted) as exc:
                    raise TrainingAborted(f"step {step}: {exc}") from exc
                step += 1
                n_steps += 1
                row = {"step": step, **row, "lr": opt.lr}
                result.history.append(row)
                if out is not None:
                    writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            result.steps_per_epoch.append(n_steps)
            log.info("epoch %d: %d steps, total %.4f", epoch, n_steps,
                     np.mean([r["total"] for r in result.history[-n_steps:]]) if n_steps else float("nan"))
            if out is not None:
                save_model(out / "last_good.ckpt", net)
                if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    save_model(out / f"epoch{epoch + 1:03d}.ckpt", net)
    except TrainingAborted:
        if out is not None and not (out / "last_good.ckpt").exists():
            log.warning("training aborted before any checkpoint was written")
        raise
    finally:
        if out is not None:
            log_fh.close()
    if out is not None:
        save_model(out / "model.ckpt", net)
    return result


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# ------------------------------------------------------------ checkpoints

def save_model(path, net: CycleTransNet, extra_meta: dict | None = None) -> None:
    tensors = {pid: t.data for pid, t in net.store.items()}
    tensors["classifier.running_mean"] = net.classifier.running_mean
    tensors["classifier.running_var"] = net.classifier.running_var
    meta = {f"model.{k}": ("" if v is None else v) for k, v in asdict(net.config).items()}
    meta.update(extra_meta or {})
    save_checkpoint(path, tensors, meta)


def load_model(path) -> CycleTransNet:
    tensors, meta = load_checkpoint(path)
    kwargs = {}
    for f in fields(ModelConfig):
        raw = meta.get(f"model.{f.name}")
        if raw is None:
            continue
        if f.name == "variant":
            kwargs[f.name] = raw
        elif f.name == "init_std":
            kwargs[f.name] = float(raw)
        elif raw == "":
            kwargs[f.name] = None
        else:
            kwargs[f.name] = int(raw)
    net = CycleTransNet(ModelConfig(**kwargs))
    net.store.load(tensors)
    net.classifier.running_mean = tensors["classifier.running_mean"].copy()
    net.classifier.running_var = tensors["classifier.running_var"].copy()
    return net

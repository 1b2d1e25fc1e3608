"""Cross-entropy training with decoupled weight decay.

Single-threaded and deterministic: a fixed seed fixes the weight draw, the
data shuffle and the dropout masks, so two runs of the same config produce
byte-identical checkpoints.  Parameters are snapped to the float32 grid
after every update, which keeps the float32 checkpoint format lossless.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, NumericalError
from .config import TrainConfig
from .data import Sample, split_dataset, stack_batch
from .metrics import EvalRecord, metrics_report, uar, war
from .model import ModelParams, build_model, forward_batch, save_model
from .storage import quantize32


class NumericalAbort(ArithmeticError):
    """Training hit a non-finite value; the last good checkpoint survives."""

    def __init__(self, message: str, checkpoint_path: str | None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list."""

    def __init__(
        self,
        params,
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data[...] = quantize32(p.data)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    final_checkpoint: str | None = None
    best_checkpoint: str | None = None


def evaluate(params: ModelParams, samples: list[Sample], batch_size: int = 64):
    """Eval-mode predictions as metric records."""
    records = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        rgb, vox, labels = stack_batch(chunk)
        logits = forward_batch(params, rgb, vox, train=False)
        preds = np.argmax(logits.data, axis=1)
        records += [
            EvalRecord(int(lab), int(pred), s.condition)
            for lab, pred, s in zip(labels, preds, chunk)
        ]
    return records


def _diagnose_nonfinite(params, rgb, vox, labels) -> str:
    """Re-run the failing forward with finite checks on to name the first bad op."""
    ad.set_finite_check(True)
    try:
        logits = forward_batch(params, rgb, vox, train=False)
        ad.cross_entropy(logits, labels)
    except NumericalError as exc:
        return str(exc)
    finally:
        ad.set_finite_check(False)
    return "loss non-finite but a deterministic eval-mode replay stayed finite"


def train(
    config: TrainConfig,
    dataset: list[Sample],
    out_dir: str | Path | None = None,
    log=None,
) -> TrainResult:
    """Minimize mean cross-entropy with AdamW; checkpoint final and best-UAR.

    ``dataset`` comes from :mod:`evfuse.data`.  Stops after ``epochs`` or
    ``max_steps`` optimizer steps, whichever is first.  A non-finite loss
    aborts with the last good checkpoint retained and a diagnostic naming
    the first non-finite tensor.
    """
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng_model = np.random.default_rng([config.seed, 0x0DE1])
    rng_train = np.random.default_rng([config.seed, 0x7EA1])
    params = build_model(config, rng_model)
    tensors = [t for _, t in params.named_parameters()]
    optim = AdamW(tensors, lr=config.lr, weight_decay=config.weight_decay)
    train_set, holdout_set = split_dataset(dataset, config.holdout_frac, config.seed)
    result = TrainResult(params=params)
    metrics_path = out_dir / "metrics.jsonl"
    last_good_path = out_dir / "last_good.ckpt"
    best_uar = -1.0
    start = time.time()
    stop = False
    with metrics_path.open("w", encoding="utf-8") as metrics_file:
        for epoch in range(config.epochs):
            order = rng_train.permutation(len(train_set))
            losses = []
            for lo in range(0, len(order), config.batch_size):
                batch = [train_set[i] for i in order[lo : lo + config.batch_size]]
                rgb, vox, labels = stack_batch(batch)
                with GradientTape() as tape:
                    logits = forward_batch(params, rgb, vox, train=True, rng=rng_train)
                    loss = ad.cross_entropy(logits, labels)
                if not np.isfinite(loss.data):
                    diag = _diagnose_nonfinite(params, rgb, vox, labels)
                    raise NumericalAbort(
                        f"non-finite loss at step {result.steps + 1}: {diag}",
                        str(last_good_path) if last_good_path.exists() else None,
                    )
                grads = tape.gradients(loss, tensors)
                optim.step(grads)
                losses.append(loss.item())
                result.steps += 1
                if config.max_steps and result.steps >= config.max_steps:
                    stop = True
                    break
            save_model(last_good_path, params)
            train_records = evaluate(params, train_set, config.batch_size)
            holdout_records = evaluate(params, holdout_set, config.batch_size)
            entry = {
                "epoch": epoch,
                "steps": result.steps,
                "loss": float(np.mean(losses)) if losses else float("nan"),
                "train_war": war(train_records),
                "holdout_war": war(holdout_records),
                "holdout_uar": uar(holdout_records),
                "elapsed_s": round(time.time() - start, 3),
            }
            result.history.append(entry)
            metrics_file.write(json.dumps(entry) + "\n")
            metrics_file.flush()
            if log:
                log(entry)
            if entry["holdout_uar"] > best_uar:
                best_uar = entry["holdout_uar"]
                best_path = out_dir / "best.ckpt"
                save_model(best_path, params)
                result.best_checkpoint = str(best_path)
            if stop:
                break
    final_path = out_dir / "final.ckpt"
    save_model(final_path, params)
    result.final_checkpoint = str(final_path)
    return result


def expert_utilization(params: ModelParams, samples: list[Sample]) -> dict[str, int]:
    """Selection counts per expert over a dataset (JSON-ready keys)."""
    if params.pool is None:
        return {}
    params.pool.eval_counts[:] = 0
    evaluate(params, samples)
    return {str(i): int(c) for i, c in enumerate(params.pool.eval_counts)}


def full_report(params: ModelParams, samples: list[Sample]) -> dict:
    return metrics_report(evaluate(params, samples))

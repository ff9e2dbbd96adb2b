"""Training loop, measurement passes, gradient checks and sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from larslab import engine as E
from larslab.adapters import AdapterSet, AdapterSpec, attach, make_adapter
from larslab.config import ExperimentConfig, TrainConfig
from larslab.engine import Tensor
from larslab.memory import estimate_peak
from larslab.optim import AdamW, clip_grad_norm, cosine_lr
from larslab.tasks import Task, make_task
from larslab.transformer import Backbone, build_backbone, forward, hidden_states, site_dims

log = logging.getLogger(__name__)

__all__ = [
    "CSV_COLUMNS", "RunReport", "TrainConfig", "TrainingDiverged", "adapter_gradcheck",
    "classification_loss", "evaluate", "linear_probe_accuracy", "measure_step",
    "measure_throughput", "run_point", "sweep", "train", "write_csv",
]

LOSS_SCOPE = "loss"
CSV_COLUMNS = (
    "adapter", "pooling", "B", "S", "H", "L", "R", "targets",
    "step_peak_adapter_bytes", "step_peak_base_bytes", "est_adapter_bytes", "est_base_bytes",
    "params_trainable", "tokens_per_sec", "final_loss", "final_acc",
)
_MEASURED = ("step_peak_adapter_bytes", "step_peak_base_bytes", "tokens_per_sec",
             "final_loss", "final_acc")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass
class RunReport:
    losses: list = field(default_factory=list)
    peak_adapter_bytes: int = 0
    peak_base_bytes: int = 0
    peak_scope_bytes: dict = field(default_factory=dict)
    tokens_per_sec: float = 0.0
    final_acc: float = 0.0
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "steps": self.steps,
            "losses": self.losses,
            "final_loss": self.final_loss if self.losses else None,
            "final_acc": self.final_acc,
            "peak_adapter_bytes": self.peak_adapter_bytes,
            "peak_base_bytes": self.peak_base_bytes,
            "peak_scope_bytes": dict(sorted(self.peak_scope_bytes.items())),
            "tokens_per_sec": self.tokens_per_sec if timing else None,
        }


def measure_throughput(token_count: int, elapsed_seconds: float) -> float:
    """Tokens per second over one accumulation window."""
    if elapsed_seconds <= 0:
        raise ValueError(f"elapsed time must be positive, got {elapsed_seconds}")
    return token_count / elapsed_seconds


def classification_loss(model: Backbone, adapters, tokens, labels, label_tokens):
    """Cross-entropy over the readout-token logits at the final position."""
    logits = forward(model, tokens, adapters)
    last = E.select_index(logits, tokens.shape[1] - 1, axis=1)
    scores = E.select_index(last, label_tokens, axis=1)
    with E.scope(LOSS_SCOPE):
        loss = E.cross_entropy(scores, labels)
    return loss, scores.data


def evaluate(model: Backbone, adapters, task: Task, batch_size: int = 64) -> float:
    correct = 0
    for lo in range(0, len(task), batch_size):
        toks = task.tokens[lo:lo + batch_size]
        with E.Tape():
            logits = forward(model, toks, adapters)
        scores = logits.data[:, -1, task.label_tokens]
        correct += int(np.sum(scores.argmax(axis=1) == task.labels[lo:lo + batch_size]))
    return correct / len(task)


def _check_frozen(model: Backbone, adapters: AdapterSet) -> None:
    if any(w.requires_grad for w in model.weights.values()):
        raise ValueError("backbone weights must be frozen")
    if not adapters or not adapters.parameters():
        raise ValueError("no adapter parameters to train")


def train(model: Backbone, adapters: AdapterSet, task: Task, cfg: TrainConfig,
          clock=time.perf_counter) -> RunReport:
    """AdamW over adapter parameters; the backbone is never written."""
    _check_frozen(model, adapters)
    params = adapters.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = RunReport()
    n_batch = cfg.batch_size * cfg.accum_steps
    total_tokens, total_time = 0, 0.0

    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.steps)
        idx = rng.choice(len(task), size=n_batch, replace=n_batch > len(task))
        accum = [np.zeros_like(p.data) for p in params]
        step_loss = 0.0
        start = clock()
        for micro in range(cfg.accum_steps):
            sl = idx[micro * cfg.batch_size:(micro + 1) * cfg.batch_size]
            toks, labels = task.tokens[sl], task.labels[sl]
            with E.Tape() as tape:
                loss, _ = classification_loss(model, adapters, toks, labels, task.label_tokens)
                grads = E.backward(loss, tape)
                ledger = tape.ledger_snapshot()
            for scope, nbytes in ledger.scope_totals.items():
                report.peak_scope_bytes[scope] = max(report.peak_scope_bytes.get(scope, 0), nbytes)
            report.peak_adapter_bytes = max(report.peak_adapter_bytes, ledger.adapter_bytes())
            report.peak_base_bytes = max(report.peak_base_bytes, ledger.bytes_for(E.BASE_SCOPE))
            for acc, p in zip(accum, params):
                g = grads.get(p.id)
                if g is not None:
                    acc += g / cfg.accum_steps
            step_loss += loss.item() / cfg.accum_steps
        if not math.isfinite(step_loss):
            raise TrainingDiverged(step, step_loss)
        clip_grad_norm(accum, cfg.clip_norm)
        opt.step(accum, lr)
        elapsed = clock() - start
        total_tokens += n_batch * task.S
        total_time += elapsed
        report.losses.append(step_loss)

    report.steps = cfg.steps
    if total_time > 0:
        report.tokens_per_sec = measure_throughput(total_tokens, total_time)
    report.final_acc = evaluate(model, adapters, task)
    return report


def measure_step(model: Backbone, adapters, task: Task, B: int, clock=time.perf_counter):
    """One forward+backward on the first ``B`` examples; returns (ledger, loss, acc, seconds)."""
    toks, labels = task.tokens[:B], task.labels[:B]
    start = clock()
    with E.Tape() as tape:
        loss, scores = classification_loss(model, adapters, toks, labels, task.label_tokens)
        E.backward(loss, tape)
    elapsed = clock() - start
    acc = float(np.mean(scores.argmax(axis=1) == labels))
    return tape.ledger_snapshot(), loss.item(), acc, elapsed


def linear_probe_accuracy(model: Backbone, task: Task, ridge: float = 1e-3) -> float:
    """Ridge one-vs-all probe on frozen (mean + last) pooled final hidden states."""
    feats = []
    for lo in range(0, len(task), 64):
        with E.Tape():
            h = hidden_states(model, task.tokens[lo:lo + 64]).data.astype(np.float64)
        feats.append(h.mean(axis=1) + h[:, -1])
    X = np.concatenate(feats)
    X = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(task.num_classes)[task.labels]
    W = np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ Y)
    return float(np.mean((X @ W).argmax(axis=1) == task.labels))


def adapter_gradcheck(spec: AdapterSpec, in_dim: int, out_dim: int, site: str = "attn_o",
                      B: int = 2, S: int = 8, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every adapter tensor at float64.

    Parameters are moved off their identity initialisation so every path
    carries signal; the loss is a fixed random projection of the site output.
    Returns the max relative error per tensor name.
    """
    rng = np.random.default_rng(seed)
    adapter = make_adapter(spec, in_dim, out_dim, site, rng, np.float64)
    for name, t in adapter.params.tensors().items():
        if t.size == 1:
            t.data[...] = 1.0 + 0.2 * rng.standard_normal(t.shape)
        elif name == "M_mix":
            t.data[...] = np.eye(t.shape[0]) + 0.3 * rng.standard_normal(t.shape)
        else:  # fan-in scaling keeps the sigmoid and GeLU away from saturation
            t.data[...] = rng.standard_normal(t.shape) / np.sqrt(t.shape[0])
    X = Tensor(rng.standard_normal((B, S, in_dim)), dtype=np.float64)
    # a parameter-independent term in the loss only adds rounding noise to the
    # differences, so the frozen projection is zero unless IA3 scales through it
    w0 = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
    W = Tensor.parameter(w0 if spec.kind == "ia3" else np.zeros_like(w0),
                         dtype=np.float64, trainable=False)
    proj = Tensor(rng.standard_normal((B, S, out_dim)), dtype=np.float64)

    def loss():
        x = adapter.transform_input(X)
        out = adapter.transform_output(x, E.matmul(x, W))
        return E.sum_over_axis(E.mul(out, proj))

    errors = {}
    for name, t in adapter.params.tensors().items():
        try:
            errors[name] = E.finite_diff_gradcheck(loss, t, eps)
        except E.NonFiniteGradient as exc:
            exc.tensor = name
            raise
    return errors


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def _point_config(cfg: ExperimentConfig, dimension: str, value, label: str):
    spec_overrides = {}
    if dimension == "S":
        S = int(value)
        cfg = replace(cfg, task=replace(cfg.task, S=S),
                      backbone=replace(cfg.backbone, max_S=max(cfg.backbone.max_S, S)))
    elif dimension == "R":
        spec_overrides["R"] = int(value)
    elif dimension == "target_modules":
        targets = value.split("+") if isinstance(value, str) else list(value)
        spec_overrides["targets"] = tuple(targets)
    elif dimension == "adapter":
        label = value
    else:
        raise ValueError(f"unknown sweep dimension {dimension!r}")
    return cfg, label, spec_overrides


def run_point(cfg: ExperimentConfig, label: str, spec_overrides: dict | None = None,
              train_run: bool = False, budget: int | None = None, timing: bool = False) -> dict:
    """One grid point: ledger maxima, analytic estimate, loss/accuracy, throughput."""
    spec = cfg.spec(label, **(spec_overrides or {}))
    B = cfg.train.batch_size if train_run else cfg.sweep.batch_size
    S = cfg.task.S
    est = estimate_peak(cfg.backbone, spec, B, S,
                        num_classes=cfg.task.num_classes if cfg.task.kind == "seqclass"
                        else cfg.task.num_passkeys)
    row = {
        "adapter": spec.kind,
        "pooling": spec.pooling if spec.kind == "lars" else "none",
        "B": B, "S": S, "H": cfg.backbone.H, "L": cfg.backbone.L,
        "R": spec.R if spec.kind != "ia3" else 0,
        "targets": "+".join(spec.targets),
        "est_adapter_bytes": est.adapter_act_bytes,
        "est_base_bytes": est.base_act_bytes,
    }
    if budget is not None and est.total_bytes > budget:
        row.update({k: "exceeds_budget" for k in _MEASURED})
        row["params_trainable"] = ""
        return row
    try:
        model = build_backbone(cfg.backbone)
        adapters = attach(model, spec, seed=cfg.backbone.seed)
        row["params_trainable"] = adapters.trainable_count()
        kwargs = cfg.task.make_kwargs(cfg.backbone.vocab)
        if not train_run:
            kwargs["num_examples"] = B
        task = make_task(cfg.task.kind, **kwargs)
        if train_run:
            rep = train(model, adapters, task, cfg.train)
            row.update(step_peak_adapter_bytes=rep.peak_adapter_bytes,
                       step_peak_base_bytes=rep.peak_base_bytes,
                       tokens_per_sec=rep.tokens_per_sec,
                       final_loss=rep.final_loss, final_acc=rep.final_acc)
        else:
            ledger, loss, acc, elapsed = measure_step(model, adapters, task, B)
            row.update(step_peak_adapter_bytes=ledger.adapter_bytes(),
                       step_peak_base_bytes=ledger.bytes_for(E.BASE_SCOPE),
                       tokens_per_sec=measure_throughput(B * S, elapsed) if elapsed > 0 else 0.0,
                       final_loss=loss, final_acc=acc)
    except Exception as exc:  # one bad point must not sink the sweep
        log.error("grid point %s %s failed: %s", label, row, exc)
        row.setdefault("params_trainable", "")
        row.update({k: "error" for k in _MEASURED})
        return row
    if not timing:
        row["tokens_per_sec"] = ""
    return row


def sweep(dimension: str, grid, base_cfg: ExperimentConfig, adapters=None, train_run: bool = False,
          budget: int | None = None, timing: bool = False, jobs: int = 1) -> list[dict]:
    """One row per (adapter, grid value); rows come back in grid order regardless of ``jobs``."""
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    labels = [None] if dimension == "adapter" else list(adapters or base_cfg.sweep.adapters)
    points = []
    for label in labels:
        for value in grid:
            cfg, lab, overrides = _point_config(base_cfg, dimension, value, label)
            points.append((cfg, lab, overrides, train_run, budget, timing))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_point, *zip(*points)))
    return [run_point(*p) for p in points]


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})

"""Multitask optimization: proportional task sampling, gradient
accumulation, text-LM initialization, validation-based selection.

Each update draws `accumulation_steps` task-homogeneous micro-batches (the
task is re-sampled per micro-batch), sums gradients scaled by the reciprocal
of the accumulation count, then applies one Adam step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .lm import LmConfig, MultiModalLm, lm_loss, text_el
from .numerics import AdamState, adam_update
from .rng import stream
from .tasks import AssembledExample

TEXT_LM_TASK = "textlm"


@dataclass
class TaskMix:
    sizes: dict[str, int]

    def __post_init__(self):
        if not self.sizes:
            raise ValueError("empty task mix")
        if any(s < 0 for s in self.sizes.values()):
            raise ValueError("negative task size")
        if sum(self.sizes.values()) == 0:
            raise ValueError("all task sizes are zero")

    @property
    def tasks(self) -> list[str]:
        return sorted(self.sizes)

    @property
    def probabilities(self) -> np.ndarray:
        sizes = np.array([self.sizes[t] for t in self.tasks], dtype=np.float64)
        return sizes / sizes.sum()

    @classmethod
    def from_data(cls, data: dict[str, list]) -> "TaskMix":
        return cls({task: len(examples) for task, examples in data.items()})


@dataclass
class TrainConfig:
    accumulation_steps: int = 4
    batch_size: int = 4
    max_updates: int = 200
    val_every: int = 50
    seed: int = 0
    peak_lr: float = 3e-3
    warmup_steps: int = 20

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.batch_size < 1 or self.max_updates < 1:
            raise ValueError("batch_size and max_updates must be >= 1")


def sample_task(rng: np.random.Generator, mix: TaskMix) -> str:
    """Draw a task with probability proportional to its data volume."""
    tasks = mix.tasks
    return tasks[int(rng.choice(len(tasks), p=mix.probabilities))]


def example_loss(model: MultiModalLm, ex: AssembledExample):
    return lm_loss(model.forward(ex.elements, ex.task, ex.boundary), ex)


def train_update(model: MultiModalLm, opt: AdamState,
                 data: dict[str, list[AssembledExample]], mix: TaskMix,
                 cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One accumulated update. Returns per-task mean losses plus the
    accumulated mixture loss under key "loss"."""
    model.zero_grad()
    task_losses: dict[str, list[float]] = {}
    total = 0.0
    scale = 1.0 / cfg.accumulation_steps
    for _ in range(cfg.accumulation_steps):
        task = sample_task(rng, mix)
        pool = data[task]
        if not pool:
            raise ValueError(f"no training examples for task {task!r}")
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)),
                         replace=False)
        terms = [example_loss(model, pool[int(i)]) for i in idx]
        batch_loss = terms[0]
        for t in terms[1:]:
            batch_loss = batch_loss + t
        batch_loss = batch_loss * (1.0 / len(terms))
        (batch_loss * scale).backward()
        task_losses.setdefault(task, []).append(batch_loss.item())
        total += batch_loss.item() * scale
    adam_update(opt, model.params)
    out = {task: float(np.mean(v)) for task, v in task_losses.items()}
    out["loss"] = total
    return out


def validation_loss(model: MultiModalLm,
                    data: dict[str, list[AssembledExample]],
                    mix: TaskMix) -> float:
    """Mixture validation loss: per-task means weighted by the sampling
    probabilities."""
    probs = dict(zip(mix.tasks, mix.probabilities))
    total = 0.0
    for task in mix.tasks:
        pool = data.get(task, [])
        if not pool:
            raise ValueError(f"no validation examples for task {task!r}")
        losses = [example_loss(model, ex).item() for ex in pool]
        total += probs[task] * float(np.mean(losses))
    return total


def select_best(checkpoints: list[tuple]) -> object:
    """Argmin by validation loss; ties resolve to the earliest entry."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best, best_loss = checkpoints[0]
    for item, loss in checkpoints[1:]:
        if loss < best_loss:
            best, best_loss = item, loss
    return best


def init_from_text_lm(text_lm: MultiModalLm,
                      target: MultiModalLm) -> MultiModalLm:
    """Copy the trunk and text embedding from a trained text-only LM into
    `target`; speech, task, projection, and head parameters stay freshly
    initialized. The source model is not mutated."""
    for name in target.trunk_param_names():
        src = text_lm.params.get(name)
        if src is None:
            raise ValueError(f"text LM missing trunk parameter {name!r}")
        if src.data.shape != target.params[name].data.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        target.params[name].data = src.data.copy()
    return target


@dataclass
class TrainResult:
    model: MultiModalLm
    log_rows: list[dict] = field(default_factory=list)
    validations: list[tuple[int, float]] = field(default_factory=list)
    best_update: int = -1


def train_lm(model: MultiModalLm, train_data: dict[str, list],
             val_data: dict[str, list], cfg: TrainConfig,
             on_validate=None) -> TrainResult:
    """Full training loop with periodic validation.

    on_validate(update, val_loss, model) runs at every validation point
    (checkpointing hook). Log rows carry update, task, loss, lr, and
    wallclock_ms."""
    mix = TaskMix.from_data(train_data)
    opt = AdamState(peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps)
    rng = stream(cfg.seed, "train-sampler")
    result = TrainResult(model=model)
    scored: list[tuple[int, float]] = []
    for update in range(1, cfg.max_updates + 1):
        t0 = time.monotonic()
        metrics = train_update(model, opt, train_data, mix, cfg, rng)
        elapsed_ms = (time.monotonic() - t0) * 1000.0
        tasks = "+".join(sorted(t for t in metrics if t != "loss"))
        result.log_rows.append({
            "update": update,
            "task": tasks,
            "loss": metrics["loss"],
            "lr": opt.lr_at(opt.step_count),
            "wallclock_ms": elapsed_ms,
        })
        if update % cfg.val_every == 0 or update == cfg.max_updates:
            vloss = validation_loss(model, val_data, mix)
            result.validations.append((update, vloss))
            scored.append((update, vloss))
            if on_validate is not None:
                on_validate(update, vloss, model)
    result.best_update = select_best(scored)
    return result


# -- text-LM pretraining ------------------------------------------------------


def text_lm_examples(texts: list[str], vocab) -> list[AssembledExample]:
    """Next-token prediction sequences; boundary 1 makes the prefix mask
    strictly causal."""
    out = []
    for text in texts:
        ids = vocab.encode_text(text)
        if not ids:
            continue
        elements = [text_el(t) for t in ids]
        targets = np.array(ids[1:] + [vocab.text_eos], dtype=np.int64)
        out.append(_TextExample(elements, 1, targets, TEXT_LM_TASK))
    if not out:
        raise ValueError("no nonempty texts")
    return out


@dataclass
class _TextExample:
    """AssembledExample shape without the task-ID-element invariant."""
    elements: list
    boundary: int
    target_ids: np.ndarray
    task: str


def build_text_lm(lm_cfg: LmConfig, seed: int = 0) -> MultiModalLm:
    return MultiModalLm(lm_cfg, {TEXT_LM_TASK: lm_cfg.text_vocab_size},
                        seed=seed)


def train_text_lm(model: MultiModalLm, texts: list[str], vocab,
                  cfg: TrainConfig) -> TrainResult:
    examples = text_lm_examples(texts, vocab)
    split = max(1, len(examples) // 10)
    data = {TEXT_LM_TASK: examples[split:]}
    val = {TEXT_LM_TASK: examples[:split]}
    return train_lm(model, data, val, cfg)

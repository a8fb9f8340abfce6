"""
Обучение: взвешенная сумма потерь трёх задач, детерминированная сборка
пакетов смешанного состава и двухэтапный цикл с контрольными точками.
"""

import csv
import functools
import io
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core.blockworld import render
from core.codecs import Vocabulary, decode_tokens, tokenize_text
from core.dataset import EpisodeArrays, VqaRecord
from core.errors import ArtifactError, ConfigError, TrainingDivergedError
from core.model import (
    ForwardOutput, ModelConfig, ModelParams, forward, load_checkpoint, save_checkpoint,
)
from core.ndcore import (
    AdamState, Tensor, adam_step, add, backward, bce_with_logits, cross_entropy, getitem,
    mse, scale, warmup_lr,
)
from core.seqlayout import PackedBatch, PackedSequence, Packer, chunk_actions, collate
from utils.file_utils import FileManager
from utils.logger import logger

TASK_ORDER = ("mmu", "pre", "act")
STAGES = ("pretrain", "tune")

METRIC_COLUMNS = (
    "step", "stage", "lr", "total_loss", "mmu_loss", "pre_loss", "act_loss",
    "mmu_acc", "pre_acc", "act_mse", "n_mmu", "n_pre", "n_act", "wall_ms",
)


@dataclass
class LossWeights:
    mmu: float = 1.0
    pre: float = 1.0
    act: float = 1.0

    def __post_init__(self):
        for name in TASK_ORDER:
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name}", "вес потери не может быть отрицательным")

    def as_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in TASK_ORDER}


@dataclass
class StagePlan:
    """
    План этапа обучения.

    Args:
        stage: "pretrain" или "tune"
        mix: Доли задач в пакете (сумма 1)
        steps: Число шагов
    """

    stage: str
    mix: Dict[str, float]
    steps: int
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 100
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError("stage", f"неизвестный этап {self.stage}")
        unknown = set(self.mix) - set(TASK_ORDER)
        if unknown:
            raise ConfigError(f"{self.stage}.mix", f"неизвестные задачи {sorted(unknown)}")
        for task, ratio in self.mix.items():
            if ratio < 0:
                raise ConfigError(f"{self.stage}.mix.{task}", "доля не может быть отрицательной")
        if self.steps > 0 and abs(sum(self.mix.values()) - 1.0) > 1e-6:
            raise ConfigError(f"{self.stage}.mix", f"сумма долей {sum(self.mix.values())} != 1")
        if self.stage == "pretrain" and self.mix.get("act", 0.0) > 0:
            raise ConfigError("pretrain.mix.act", "на предобучении нет данных действий")
        if self.batch_size < 1:
            raise ConfigError(f"{self.stage}.batch_size", "должно быть >= 1")
        if self.steps < 0:
            raise ConfigError(f"{self.stage}.steps", "должно быть >= 0")


@dataclass
class LossBreakdown:
    """Полная потеря и значения компонент; задача без покрытия или с нулевым весом даёт 0.0."""

    total: Tensor
    components: Dict[str, float] = field(default_factory=dict)

    def value(self, task: str) -> float:
        return float(self.components.get(task, 0.0))


@dataclass
class StageResult:
    params: ModelParams
    optimizer: AdamState
    rows: List[dict]
    checkpoint_path: Optional[str] = None


# ----------------------------------------------------------------------
# Потери
# ----------------------------------------------------------------------

def weighted_total(components: Mapping[str, Optional[Tensor]], weights: LossWeights) -> Tensor:
    """Сумма компонент с ненулевым весом; компоненты с нулевым весом в граф не входят."""
    total: Optional[Tensor] = None
    for task in TASK_ORDER:
        term = components.get(task)
        weight = getattr(weights, task)
        if term is None or weight == 0:
            continue
        weighted = scale(term, weight) if weight != 1 else term
        total = weighted if total is None else add(total, weighted)
    if total is None:
        return Tensor(0.0)
    return total


def action_loss(batch: PackedBatch, outputs: ForwardOutput) -> Optional[Tensor]:
    """L_ACT = MSE(a_pos) + BCE(a_end) по строкам с целями."""
    if outputs.actions is None or not batch.act_has_targets.any():
        return None
    rows = np.nonzero(batch.act_has_targets)[0]
    a_pos = getitem(outputs.actions.a_pos, rows)
    a_end = getitem(outputs.actions.a_end_logits, rows)
    grip = batch.grip_targets[rows].reshape(a_end.shape)
    return add(mse(a_pos, batch.action_targets[rows]), bce_with_logits(a_end, grip))


def compute_losses(batch: PackedBatch, outputs: ForwardOutput, weights: LossWeights) -> LossBreakdown:
    components: Dict[str, Optional[Tensor]] = {"mmu": None, "pre": None, "act": None}
    if batch.lm_loss_mask.any() and weights.mmu > 0:
        components["mmu"] = cross_entropy(outputs.lm_logits, batch.lm_targets, batch.lm_loss_mask)
    if batch.pre_loss_mask.any() and weights.pre > 0:
        components["pre"] = cross_entropy(outputs.lm_logits, batch.pre_targets, batch.pre_loss_mask)
    if weights.act > 0:
        components["act"] = action_loss(batch, outputs)
    total = weighted_total(components, weights)
    values = {task: (0.0 if t is None else float(t.data)) for task, t in components.items()}
    return LossBreakdown(total, values)


def mmu_token_accuracy(batch: PackedBatch, outputs: ForwardOutput) -> float:
    if not batch.lm_loss_mask.any():
        return float("nan")
    predicted = outputs.lm_logits.data.argmax(axis=-1)
    return float((predicted[batch.lm_loss_mask] == batch.lm_targets[batch.lm_loss_mask]).mean())


def pre_token_accuracy(batch: PackedBatch, outputs: ForwardOutput, vocab: Vocabulary) -> float:
    if not batch.pre_loss_mask.any():
        return float("nan")
    start, stop = vocab.image_range.start, vocab.image_range.stop
    predicted = outputs.lm_logits.data[..., start:stop].argmax(axis=-1) + start
    return float((predicted[batch.pre_loss_mask] == batch.pre_targets[batch.pre_loss_mask]).mean())


def action_mse(batch: PackedBatch, outputs: ForwardOutput) -> float:
    if outputs.actions is None or not batch.act_has_targets.any():
        return float("nan")
    rows = batch.act_has_targets
    diff = outputs.actions.a_pos.data[rows] - batch.action_targets[rows]
    return float((diff * diff).mean())


# ----------------------------------------------------------------------
# Наборы данных задач
# ----------------------------------------------------------------------

class MmuDataset:
    """Пары вопрос-ответ; изображение перерисовывается из состояния."""

    def __init__(self, records: Sequence[VqaRecord], packer: Packer):
        self.records = list(records)
        self.packer = packer

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> PackedSequence:
        record = self.records[index]
        vocab = self.packer.vocab
        return self.packer.pack_mmu(render(record.state), tokenize_text(record.question, vocab),
                                    tokenize_text(record.answer, vocab))


class PreDataset:
    """(инструкция, текущий кадр) -> кадр через dt шагов."""

    def __init__(self, episodes: Sequence[EpisodeArrays], packer: Packer):
        self.episodes = list(episodes)
        self.packer = packer
        self.index = [(e, t) for e, ep in enumerate(self.episodes) for t in range(ep.n_frames)]

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, index: int) -> PackedSequence:
        e, t = self.index[index]
        episode = self.episodes[e]
        future = min(t + self.packer.action_horizon, episode.n_frames - 1)
        return self.packer.pack_pre(episode.instruction_ids, episode.codes[t], episode.codes[future])


class ActDataset:
    """
    Кадры демонстраций с действиями: чанк следующих dt действий и, если
    включено, будущий кадр как вспомогательная цель.
    """

    def __init__(self, episodes: Sequence[EpisodeArrays], packer: Packer, predict_future: bool = True):
        self.episodes = list(episodes)
        self.packer = packer
        self.predict_future = predict_future
        self.index = [(e, t) for e, ep in enumerate(self.episodes) for t in range(ep.n_frames - 1)]

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, index: int) -> PackedSequence:
        e, t = self.index[index]
        episode = self.episodes[e]
        horizon = self.packer.action_horizon
        future = episode.codes[min(t + horizon, episode.n_frames - 1)] if self.predict_future else None
        return self.packer.pack_act(
            decode_tokens(episode.codes[t]),
            episode.descriptions[t] if self.packer.mmu_condition else [],
            episode.instruction_ids,
            episode.codes[t],
            future_codes=future,
            action_chunk=chunk_actions(episode.actions, t, horizon),
        )


# ----------------------------------------------------------------------
# Сборка пакетов
# ----------------------------------------------------------------------

def allocate_counts(mix: Mapping[str, float], batch_size: int) -> Dict[str, int]:
    """
    Количество примеров каждой задачи методом наибольшего остатка.
    При равных остатках приоритет по порядку mmu, pre, act.
    """
    raw = {task: float(mix.get(task, 0.0)) * batch_size for task in TASK_ORDER}
    counts = {task: int(np.floor(value + 1e-9)) for task, value in raw.items()}
    leftover = batch_size - sum(counts.values())
    order = sorted(
        (task for task in TASK_ORDER if mix.get(task, 0.0) > 0),
        key=lambda task: (-(raw[task] - counts[task]), TASK_ORDER.index(task)),
    )
    for task in order[:max(leftover, 0)]:
        counts[task] += 1
    return counts


@functools.lru_cache(maxsize=64)
def _permutation(seed: int, task: str, epoch: int, size: int) -> np.ndarray:
    return np.random.default_rng([seed, TASK_ORDER.index(task), epoch]).permutation(size)


def sample_batch(datasets: Mapping[str, object], plan: StagePlan, step: int,
                 seed: int = 0) -> Tuple[List[PackedSequence], List[Tuple[str, int]]]:
    """
    Детерминированный пакет шага step: зависит только от (seed, step, плана).
    Каждая задача проходит свои данные эпохами в перестановке по (seed, задача, эпоха).

    Returns:
        Последовательности и состав [(задача, индекс примера)]
    """
    counts = allocate_counts(plan.mix, plan.batch_size)
    samples, composition = [], []
    for task in TASK_ORDER:
        count = counts[task]
        if count == 0:
            continue
        dataset = datasets.get(task)
        if dataset is None or len(dataset) == 0:
            raise ConfigError(f"{plan.stage}.mix.{task}", "доля задачи > 0, но данных нет")
        size = len(dataset)
        for j in range(count):
            epoch, offset = divmod(step * count + j, size)
            index = int(_permutation(seed, task, epoch, size)[offset])
            samples.append(dataset[index])
            composition.append((task, index))
    return samples, composition


# ----------------------------------------------------------------------
# Цикл этапа
# ----------------------------------------------------------------------

def checkpoint_path(run_dir: str, stage: str, kind: str = "latest") -> str:
    return os.path.join(run_dir, "checkpoints", f"{stage}_{kind}.ckpt")


def _format(value) -> str:
    if isinstance(value, float):
        return "nan" if value != value else f"{value:.9g}"
    return str(value)


def _read_rows(path: str, up_to_step: int) -> List[List[str]]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(line for line in f if not line.startswith("#"))
        rows = list(reader)
    return [row for row in rows[1:] if row and int(row[0]) < up_to_step]


def _write_metrics(path: str, meta_line: str, rows: Sequence[Sequence[str]]) -> None:
    buffer = io.StringIO()
    buffer.write(f"# {meta_line}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    writer.writerows(rows)
    FileManager.write_bytes(path, buffer.getvalue().encode("utf-8"))


def _dump_divergence(run_dir: str, plan: StagePlan, step: int, losses: LossBreakdown,
                     composition: Sequence[Tuple[str, int]]) -> str:
    path = os.path.join(run_dir, f"diverged_{plan.stage}_step{step}.json")
    FileManager.write_json(path, {
        "stage": plan.stage,
        "step": step,
        "losses": {task: (v if np.isfinite(v) else None) for task, v in losses.components.items()},
        "total_is_finite": bool(np.isfinite(losses.total.data)),
        "composition": [list(c) for c in composition],
    })
    return path


def run_stage(
    plan: StagePlan,
    params: ModelParams,
    datasets: Mapping[str, object],
    model_config: ModelConfig,
    run_dir: str,
    weights: Optional[LossWeights] = None,
    optimizer: Optional[AdamState] = None,
    seed: int = 0,
    meta: Optional[dict] = None,
    resume: bool = True,
    record_wall_time: bool = True,
    stop_after: Optional[int] = None,
) -> StageResult:
    """
    Цикл этапа: сборка пакета, прямой проход, потери, обратный проход, шаг Adam.

    Контрольная точка (параметры, моменты Adam, номер шага) сохраняется
    каждые checkpoint_every шагов и в конце этапа; при resume этап
    продолжается с последней контрольной точки, давая те же строки
    метрик, что и непрерывный запуск.

    Args:
        stop_after: Остановиться после этого номера шага (имитация прерывания)

    Raises:
        TrainingDivergedError: нечисловое значение потерь
    """
    weights = weights or LossWeights()
    optimizer = optimizer if optimizer is not None else AdamState()
    meta = dict(meta or {})
    metrics_path = os.path.join(run_dir, f"metrics_{plan.stage}.csv")
    latest = checkpoint_path(run_dir, plan.stage, "latest")
    FileManager.ensure_dir(os.path.dirname(latest))

    start_step = 0
    if resume and os.path.exists(latest):
        params, optimizer, saved = load_checkpoint(latest)
        optimizer = optimizer or AdamState()
        start_step = int(saved.get("step", 0))
        logger.log_operation("Возобновление этапа", f"{plan.stage} с шага {start_step}")

    vocab = next(iter(datasets.values())).packer.vocab
    meta_line = " ".join(f"{k}={meta[k]}" for k in sorted(meta)) or f"stage={plan.stage}"
    rows = _read_rows(metrics_path, start_step)
    _write_metrics(metrics_path, meta_line, rows)

    logger.log_operation(
        f"Этап {plan.stage}",
        f"шагов: {plan.steps}, пакет: {plan.batch_size}, состав: {plan.mix}, веса: {weights.as_dict()}",
    )
    new_rows: List[dict] = []
    end_step = plan.steps if stop_after is None else min(plan.steps, stop_after)
    for step in tqdm(range(start_step, end_step), desc=plan.stage, initial=start_step, total=plan.steps):
        started = time.perf_counter()
        samples, composition = sample_batch(datasets, plan, step, seed)
        batch = collate(samples)
        params.zero_grad()
        outputs = forward(batch, params, model_config)
        losses = compute_losses(batch, outputs, weights)
        if not np.isfinite(losses.total.data):
            path = _dump_divergence(run_dir, plan, step, losses, composition)
            logger.error(f"Потери не конечны на шаге {step}, диагностика: {path}")
            raise TrainingDivergedError(f"Расхождение обучения на шаге {step} этапа {plan.stage}")
        backward(losses.total)
        lr = warmup_lr(step, plan.lr, plan.warmup_steps)
        adam_step(params, params.grads(), optimizer, lr)

        counts = {task: sum(1 for c in composition if c[0] == task) for task in TASK_ORDER}
        row = {
            "step": step,
            "stage": plan.stage,
            "lr": lr,
            "total_loss": float(losses.total.data),
            "mmu_loss": losses.value("mmu"),
            "pre_loss": losses.value("pre"),
            "act_loss": losses.value("act"),
            "mmu_acc": mmu_token_accuracy(batch, outputs),
            "pre_acc": pre_token_accuracy(batch, outputs, vocab),
            "act_mse": action_mse(batch, outputs),
            "n_mmu": counts["mmu"],
            "n_pre": counts["pre"],
            "n_act": counts["act"],
            "wall_ms": int((time.perf_counter() - started) * 1000) if record_wall_time else 0,
        }
        new_rows.append(row)
        rows.append([_format(row[c]) for c in METRIC_COLUMNS])
        logger.log_metrics(step, {k: row[k] for k in ("total_loss", "mmu_loss", "pre_loss", "act_loss")})

        done = step + 1
        if done % max(plan.checkpoint_every, 1) == 0 or done == end_step:
            save_checkpoint(latest, params, {**meta, "stage": plan.stage, "step": done}, optimizer)
            _write_metrics(metrics_path, meta_line, rows)

    final_path = None
    if end_step == plan.steps:
        final_path = checkpoint_path(run_dir, plan.stage, "final")
        save_checkpoint(final_path, params, {**meta, "stage": plan.stage, "step": plan.steps}, optimizer)
        _write_metrics(metrics_path, meta_line, rows)
        logger.info(f"Этап {plan.stage} завершён: {plan.steps} шагов")
    return StageResult(params, optimizer, new_rows, final_path)


def read_metrics(path: str) -> List[Dict[str, str]]:
    if not os.path.exists(path):
        raise ArtifactError(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def build_datasets(stage: str, bundle, packer: Packer, predict_future: bool = True) -> Dict[str, object]:
    """Наборы задач этапа из загруженных данных."""
    datasets: Dict[str, object] = {"mmu": MmuDataset(bundle.vqa_train, packer)}
    if stage == "pretrain":
        datasets["pre"] = PreDataset(bundle.pretrain, packer)
    else:
        datasets["act"] = ActDataset(bundle.demo, packer, predict_future)
    return datasets

"""
Оценка: прогон цепочек задач в замкнутом контуре, средняя длина
выполненной цепочки, точность VQA и предсказания кадра, сводный отчёт
по нескольким запускам.
"""

import os
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core import __version__
from core.blockworld import (
    DESCRIBE_PROMPT, ActionCommand, EnvState, TaskSpec, expert_action, render, reset,
    sample_chain, step, success,
)
from core.codecs import decode_tokens, detokenize, encode_image, tokenize_text
from core.errors import ArtifactError, EmptyEvaluationError, InvariantError
from core.model import ModelConfig, ModelParams, forward, generate_text, predict_future_tokens
from core.ndcore import no_grad
from core.report_generator import ReportGenerator
from core.seqlayout import Packer, collate
from utils.file_utils import FileManager
from utils.logger import logger


class Policy(Protocol):
    def act(self, state: EnvState, task: TaskSpec) -> List[ActionCommand]:
        ...


@dataclass(frozen=True)
class ChainResult:
    """Флаги успеха задач цепочки; успех - префикс (после первой неудачи всё ложно)."""

    flags: Tuple[bool, ...]
    steps_used: Tuple[int, ...] = ()
    env_seed: int = 0

    def __post_init__(self):
        failed = False
        for flag in self.flags:
            if failed and flag:
                raise InvariantError(f"Успех после неудачи в цепочке: {self.flags}")
            failed = failed or not flag

    @property
    def completed(self) -> int:
        return sum(self.flags)


@dataclass
class ChainSummary:
    rates: List[float]
    avg_len: float
    n_chains: int


@dataclass
class EvalReport:
    """Итог оценки одного запуска."""

    kind: str
    split: str
    config_hash: str
    seeds: List[int]
    rates: List[float] = field(default_factory=list)
    avg_len: Optional[float] = None
    single_task_success: Optional[float] = None
    vqa_accuracy: Optional[float] = None
    pred_token_accuracy: Optional[float] = None
    code_version: str = __version__

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "split": self.split,
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "rates": list(self.rates),
            "avg_len": self.avg_len,
            "single_task_success": self.single_task_success,
            "vqa_accuracy": self.vqa_accuracy,
            "pred_token_accuracy": self.pred_token_accuracy,
            "code_version": self.code_version,
        }


# ----------------------------------------------------------------------
# Политики
# ----------------------------------------------------------------------

class ExpertPolicy:
    def act(self, state: EnvState, task: TaskSpec) -> List[ActionCommand]:
        return [expert_action(state, task)]


class RandomPolicy:
    """Случайные действия; генератор зависит только от сида и состояния, а не от порядка вызовов."""

    def __init__(self, seed: int = 0, horizon: int = 4):
        self.seed = seed
        self.horizon = horizon

    def act(self, state: EnvState, task: TaskSpec) -> List[ActionCommand]:
        rng = np.random.default_rng([self.seed, state.step_index, *state.gripper.cell])
        moves = rng.uniform(-1.0, 1.0, size=(self.horizon, 2))
        grips = rng.integers(0, 2, size=self.horizon)
        return [ActionCommand(float(m[0]), float(m[1]), int(g)) for m, g in zip(moves, grips)]


class ModelPolicy:
    """
    Политика модели: описание сцены генерируется собственной головой LM
    (если включено условие MMU), затем голова действий выдаёт чанк.
    """

    def __init__(self, params: ModelParams, config: ModelConfig, packer: Packer, max_new_tokens: int = 24):
        self.params = params
        self.config = config
        self.packer = packer
        self.max_new_tokens = max_new_tokens

    def describe(self, image: np.ndarray) -> List[int]:
        prompt = tokenize_text(DESCRIBE_PROMPT, self.packer.vocab)
        prefix = self.packer.pack_mmu(image, prompt, prompt_only=True)
        return generate_text(prefix, self.params, self.config, self.packer, self.max_new_tokens)

    def act(self, state: EnvState, task: TaskSpec) -> List[ActionCommand]:
        image = render(state)
        description = self.describe(image) if self.packer.mmu_condition else []
        packed = self.packer.pack_act(image, description, tokenize_text(task.instruction, self.packer.vocab),
                                      encode_image(image))
        with no_grad():
            out = forward(collate([packed]), self.params, self.config)
        a_pos = np.clip(out.actions.a_pos.data[0], -1.0, 1.0)
        grips = out.actions.a_end_logits.data[0, :, 0] > 0
        return [ActionCommand(float(p[0]), float(p[1]), int(g)) for p, g in zip(a_pos, grips)]


class ModelAnswerer:
    def __init__(self, params: ModelParams, config: ModelConfig, packer: Packer, max_new_tokens: int = 24):
        self.policy = ModelPolicy(params, config, packer, max_new_tokens)

    def __call__(self, image: np.ndarray, question: str) -> str:
        packer = self.policy.packer
        prefix = packer.pack_mmu(image, tokenize_text(question, packer.vocab), prompt_only=True)
        ids = generate_text(prefix, self.policy.params, self.policy.config, packer, self.policy.max_new_tokens)
        return detokenize(ids, packer.vocab)


class ModelPredictor:
    def __init__(self, params: ModelParams, config: ModelConfig, packer: Packer):
        self.params = params
        self.config = config
        self.packer = packer

    def __call__(self, instruction: str, current_codes: np.ndarray) -> np.ndarray:
        packed = self.packer.pack_pre(tokenize_text(instruction, self.packer.vocab), current_codes)
        with no_grad():
            out = forward(collate([packed]), self.params, self.config, compute_actions=False)
        return predict_future_tokens(out.lm_logits, packed, self.packer.vocab)


# ----------------------------------------------------------------------
# Цепочки
# ----------------------------------------------------------------------

def rollout_chain(policy: Policy, chain: Sequence[TaskSpec], env_seed: int, split: str = "eval_seen",
                  max_steps_per_task: int = 64, replan_every: Optional[int] = None) -> ChainResult:
    """
    Прогон цепочки в замкнутом контуре. Задача успешна, если её условие
    выполнено не позже max_steps_per_task шагов; первая неудача
    завершает эпизод.

    Args:
        replan_every: Выполнять из чанка не больше стольких действий до
            повторного запроса политики (None - весь чанк)
    """
    state = reset(env_seed, split)
    flags: List[bool] = []
    used: List[int] = []
    for task in chain:
        steps = 0
        while not success(state, task) and steps < max_steps_per_task:
            chunk = policy.act(state, task)
            if not chunk:
                break
            if replan_every is not None:
                chunk = chunk[:max(replan_every, 1)]
            for action in chunk:
                state = step(state, action)
                steps += 1
                if success(state, task) or steps >= max_steps_per_task:
                    break
        done = success(state, task)
        flags.append(done)
        used.append(steps)
        if not done:
            break
    flags += [False] * (len(chain) - len(flags))
    return ChainResult(tuple(flags), tuple(used), env_seed)


def avg_len(results: Sequence[ChainResult]) -> ChainSummary:
    """
    Доли rates[k] - цепочек с хотя бы k+1 выполненной задачей, и средняя
    длина выполненного префикса (равна сумме долей).

    Raises:
        EmptyEvaluationError: Если не передано ни одной цепочки
    """
    if not results:
        raise EmptyEvaluationError("Нет результатов цепочек для подсчёта Avg.Len")
    k = max(len(r.flags) for r in results)
    completed = np.array([r.completed for r in results])
    rates = [float((completed >= i + 1).mean()) for i in range(k)]
    return ChainSummary(rates, float(completed.mean()), len(results))


def _chain_worker(args) -> ChainResult:
    policy, env_seed, split, k, max_steps, replan_every = args
    chain = sample_chain(env_seed, k, split)
    return rollout_chain(policy, chain, env_seed, split, max_steps, replan_every)


def eval_chains(policy: Policy, seeds: Sequence[int], split: str = "eval_seen", k: int = 5,
                max_steps_per_task: int = 64, replan_every: Optional[int] = None,
                workers: int = 1) -> List[ChainResult]:
    """Независимые прогоны по сидам; порядок результатов совпадает с порядком сидов."""
    jobs = [(policy, int(s), split, k, max_steps_per_task, replan_every) for s in seeds]
    logger.log_operation("Оценка цепочек", f"сплит: {split}, цепочек: {len(jobs)}, процессов: {workers}")
    if workers > 1:
        with Pool(workers) as pool:
            return list(tqdm(pool.imap(_chain_worker, jobs), total=len(jobs), desc="Цепочки"))
    return [_chain_worker(job) for job in tqdm(jobs, desc="Цепочки")]


def eval_single_task(policy: Policy, seeds: Sequence[int], split: str = "eval_seen",
                     max_steps_per_task: int = 64, replan_every: Optional[int] = None,
                     workers: int = 1) -> float:
    results = eval_chains(policy, seeds, split, 1, max_steps_per_task, replan_every, workers)
    if not results:
        return 0.0
    return float(np.mean([r.flags[0] for r in results]))


# ----------------------------------------------------------------------
# VQA и предсказание кадра
# ----------------------------------------------------------------------

def eval_vqa(answerer: Callable[[np.ndarray, str], str],
             pairs: Sequence[Tuple[np.ndarray, str, str]]) -> float:
    """Точное совпадение ответа после нормализации пробелов."""
    if not pairs:
        return 0.0
    correct = 0
    for image, question, answer in tqdm(pairs, desc="VQA", leave=False):
        predicted = answerer(image, question)
        correct += " ".join(predicted.split()) == " ".join(answer.split())
    return correct / len(pairs)


def eval_pred(predictor: Callable[[str, np.ndarray], np.ndarray],
              triples: Sequence[Tuple[str, np.ndarray, np.ndarray]],
              dump_dir: Optional[str] = None, max_dumps: int = 8) -> float:
    """
    Доля совпавших кодов заплаток между предсказанным и истинным будущим кадром.

    Args:
        triples: (инструкция, текущие коды, будущие коды)
        dump_dir: Куда сохранять PPM-тройки (текущий, предсказанный, истинный)
    """
    if not triples:
        return 0.0
    matched, total = 0, 0
    for i, (instruction, current, future) in enumerate(tqdm(triples, desc="Предсказание", leave=False)):
        predicted = predictor(instruction, current)
        matched += int((np.asarray(predicted) == np.asarray(future)).sum())
        total += len(future)
        if dump_dir is not None and i < max_dumps:
            FileManager.write_ppm(os.path.join(dump_dir, f"pred_{i:03d}_current.ppm"), decode_tokens(current))
            FileManager.write_ppm(os.path.join(dump_dir, f"pred_{i:03d}_predicted.ppm"), decode_tokens(predicted))
            FileManager.write_ppm(os.path.join(dump_dir, f"pred_{i:03d}_target.ppm"), decode_tokens(future))
    return matched / total


def pred_triples(trajectories, horizon: int) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    triples = []
    for trajectory in trajectories:
        codes = [encode_image(frame.image) for frame in trajectory.frames]
        for t in range(len(codes)):
            triples.append((trajectory.task.instruction, codes[t], codes[min(t + horizon, len(codes) - 1)]))
    return triples


# ----------------------------------------------------------------------
# Сводный отчёт
# ----------------------------------------------------------------------

ABLATION_FLAGS = ("no_mmu", "no_pretrain", "no_prediction", "no_mmu_condition")


@dataclass
class ReportRow:
    variant: str
    split: str
    n_seeds: int
    avg_len_mean: float
    avg_len_std: float
    delta_vs_full: Optional[float]
    rates_mean: List[float]
    vqa_accuracy_mean: Optional[float] = None
    pred_token_accuracy_mean: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "split": self.split,
            "n_seeds": self.n_seeds,
            "avg_len_mean": self.avg_len_mean,
            "avg_len_std": self.avg_len_std,
            "delta_vs_full": self.delta_vs_full,
            "rates_mean": self.rates_mean,
            "vqa_accuracy_mean": self.vqa_accuracy_mean,
            "pred_token_accuracy_mean": self.pred_token_accuracy_mean,
        }


def variant_label(ablation: Dict[str, bool]) -> str:
    active = [flag.replace("_", "-") for flag in ABLATION_FLAGS if ablation.get(flag)]
    return "+".join(active) if active else "full"


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def _optional_mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def collect_run(run_dir: str) -> Tuple[str, List[dict], Dict[str, Optional[float]]]:
    """
    Чтение результатов одного запуска.

    Raises:
        ArtifactError: нет нормализованного конфига или ни одного отчёта цепочек
    """
    config = FileManager.read_json(os.path.join(run_dir, "config.normalized.json"))
    label = variant_label(config.get("ablation", {}))
    eval_dir = os.path.join(run_dir, "eval")
    chain_reports = []
    if os.path.isdir(eval_dir):
        for path in FileManager.find_files(eval_dir, [".json"]):
            if os.path.basename(path).startswith("eval_chain_"):
                chain_reports.append(FileManager.read_json(path))
    if not chain_reports:
        raise ArtifactError(os.path.join(eval_dir, "eval_chain_<split>.json"), "Нет результатов оценки цепочек")
    extras: Dict[str, Optional[float]] = {"vqa": None, "pred": None}
    vqa_path = os.path.join(eval_dir, "eval_vqa.json")
    pred_path = os.path.join(eval_dir, "eval_pred.json")
    if os.path.exists(vqa_path):
        extras["vqa"] = FileManager.read_json(vqa_path).get("vqa_accuracy")
    if os.path.exists(pred_path):
        extras["pred"] = FileManager.read_json(pred_path).get("pred_token_accuracy")
    return label, chain_reports, extras


def build_report(run_dirs: Sequence[str]) -> List[ReportRow]:
    """Агрегирование по (вариант, сплит): среднее и выборочное стандартное отклонение по сидам."""
    groups: Dict[Tuple[str, str], List[Tuple[dict, Dict[str, Optional[float]]]]] = {}
    for run_dir in run_dirs:
        label, reports, extras = collect_run(run_dir)
        for report in reports:
            groups.setdefault((label, report["split"]), []).append((report, extras))

    rows = []
    for (label, split), entries in sorted(groups.items()):
        lens = [e[0]["avg_len"] for e in entries]
        mean, std = _mean_std(lens)
        k = max(len(e[0]["rates"]) for e in entries)
        rates = [float(np.mean([e[0]["rates"][i] for e in entries if len(e[0]["rates"]) > i])) for i in range(k)]
        rows.append(ReportRow(
            variant=label, split=split, n_seeds=len(entries),
            avg_len_mean=mean, avg_len_std=std, delta_vs_full=None, rates_mean=rates,
            vqa_accuracy_mean=_optional_mean([e[1]["vqa"] for e in entries]),
            pred_token_accuracy_mean=_optional_mean([e[1]["pred"] for e in entries]),
        ))
    full = {row.split: row.avg_len_mean for row in rows if row.variant == "full"}
    for row in rows:
        if row.split in full:
            row.delta_vs_full = row.avg_len_mean - full[row.split]
    return rows


def report(run_dirs: Sequence[str], out_dir: str, config_hash: Optional[str] = None) -> List[ReportRow]:
    """
    Сводная таблица в CSV, JSON и DOCX.

    Args:
        run_dirs: Директории запусков
        out_dir: Куда писать отчёт
        config_hash: Хэш конфигурации, с которой вызван отчёт; хэши самих
            запусков берутся из их config.normalized.json
    """
    rows = build_report(run_dirs)
    run_hashes = {
        run_dir: FileManager.read_json(os.path.join(run_dir, "config.normalized.json")).get("config_hash")
        for run_dir in run_dirs
    }
    FileManager.ensure_dir(out_dir)
    FileManager.write_json(os.path.join(out_dir, "comparison.json"), {
        "config_hash": config_hash,
        "run_config_hashes": run_hashes,
        "runs": list(run_dirs),
        "rows": [row.to_dict() for row in rows],
        "code_version": __version__,
    })
    ReportGenerator.write_csv(rows, os.path.join(out_dir, "comparison.csv"))
    ReportGenerator.generate(rows, os.path.join(out_dir, "comparison.docx"), list(run_dirs),
                             config_hash=config_hash)
    logger.info(f"Отчёт: {len(rows)} строк(и) в {out_dir}")
    return rows

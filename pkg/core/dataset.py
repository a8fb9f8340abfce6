"""
Генерация и загрузка синтетического набора данных Blockworld.

Структура директории данных:
    manifest.json                       - счётчики, сплиты, палитра, хэши файлов
    vocab.json                          - единый словарь
    trajectories/<pool>/<seed>_<i>.traj - бинарные демонстрации
    vqa/train.jsonl, vqa/eval.jsonl     - состояния и пары вопрос-ответ
    images/*.ppm                        - примеры кадров для просмотра
"""

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from typing import Dict, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core import __version__
from core.blockworld import (
    PALETTE, IMAGE_SIZE, ActionCommand, EnvState, Frame, TaskSpec, Trajectory,
    advance_along_chain, describe_scene, make_vqa, render, replay, run_expert_chain,
)
from core.codecs import Vocabulary, encode_image, tokenize_text
from core.errors import ArtifactError
from utils.file_utils import FileManager
from utils.logger import logger

TRAJ_MAGIC = b"UPVT"
TRAJ_VERSION = 1
_HEADER = struct.Struct("<4sHHII")
ACTION_DTYPE = np.dtype([("dx", "<f4"), ("dy", "<f4"), ("grip", "u1")])

# базы сидов пулов; итоговый сид = база + индекс + seed * SEED_STRIDE
SEED_BASES = {"pretrain": 0, "demo": 1_000_000, "vqa": 2_000_000, "eval": 9_000_000}
SEED_STRIDE = 10_000_000

POOL_SPLITS = {"pretrain": "train", "demo": "train", "eval": "eval_seen"}


@dataclass
class DataConfig:
    pretrain_chains: int = 100
    demo_chains: int = 1000
    eval_chains: int = 20
    vqa_train_states: int = 1000
    vqa_eval_states: int = 100
    vqa_per_state: int = 5
    chain_length: int = 5
    max_steps_per_task: int = 64
    dump_ppm: int = 8


@dataclass
class EpisodeArrays:
    """
    Компактная демонстрация для обучения.

    codes: [T, 64] коды палитры кадров
    descriptions: id описания сцены для каждого кадра
    instruction_ids: id инструкции
    actions: [T-1, 3] (dx, dy, grip)
    """

    codes: np.ndarray
    descriptions: List[List[int]]
    instruction_ids: List[int]
    actions: np.ndarray
    instruction: str = ""
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(self.codes.shape[0])


@dataclass
class VqaRecord:
    state: EnvState
    question: str
    answer: str
    seed: int = 0

    @property
    def image(self) -> np.ndarray:
        return render(self.state)


@dataclass
class DatasetBundle:
    manifest: dict
    vocab: Vocabulary
    pretrain: List[EpisodeArrays] = field(default_factory=list)
    demo: List[EpisodeArrays] = field(default_factory=list)
    eval: List[Trajectory] = field(default_factory=list)
    vqa_train: List[VqaRecord] = field(default_factory=list)
    vqa_eval: List[VqaRecord] = field(default_factory=list)


def pool_seed(pool: str, index: int, seed: int) -> int:
    return SEED_BASES[pool] + int(index) + int(seed) * SEED_STRIDE


# ----------------------------------------------------------------------
# Бинарный формат демонстрации
# ----------------------------------------------------------------------

def encode_trajectory(trajectory: Trajectory) -> bytes:
    """
    Little-endian запись: magic, версия, резерв, число кадров, длина
    метаданных, JSON метаданных, сырые RGB кадры, упакованные действия.
    """
    meta = {
        "initial_state": trajectory.frames[0].state.to_dict(),
        "task": trajectory.task.to_dict(),
        "seed": trajectory.seed,
        "split": trajectory.split,
        "scene_description": trajectory.scene_description,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    frames = np.stack(trajectory.images).astype(np.uint8)
    actions = np.zeros(len(trajectory.actions), dtype=ACTION_DTYPE)
    for i, action in enumerate(trajectory.actions):
        actions[i] = (action.dx, action.dy, action.grip)
    header = _HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, 0, len(trajectory.frames), len(meta_bytes))
    return header + meta_bytes + frames.tobytes() + actions.tobytes()


def decode_trajectory(raw: bytes, path: str = "<bytes>", verify: bool = False) -> Trajectory:
    """
    Разбор записи; состояния восстанавливаются повторным проигрыванием
    действий от начального состояния.

    Args:
        verify: сверять перерисованные кадры с сохранёнными
    """
    if len(raw) < _HEADER.size:
        raise ArtifactError(path, "Обрезанный заголовок демонстрации")
    magic, version, _, n_frames, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != TRAJ_MAGIC:
        raise ArtifactError(path, "Неверная сигнатура демонстрации")
    if version != TRAJ_VERSION:
        raise ArtifactError(path, f"Неподдерживаемая версия демонстрации {version}")
    if n_frames == 0:
        raise ArtifactError(path, "Демонстрация без кадров")

    offset = _HEADER.size
    frame_bytes = n_frames * IMAGE_SIZE * IMAGE_SIZE * 3
    action_bytes = max(n_frames - 1, 0) * ACTION_DTYPE.itemsize
    if len(raw) != offset + meta_len + frame_bytes + action_bytes:
        raise ArtifactError(path, "Размер записи не совпадает с заголовком")

    meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    frames = np.frombuffer(raw, dtype=np.uint8, count=frame_bytes, offset=offset)
    frames = frames.reshape(n_frames, IMAGE_SIZE, IMAGE_SIZE, 3)
    offset += frame_bytes
    packed = np.frombuffer(raw, dtype=ACTION_DTYPE, count=n_frames - 1, offset=offset)
    actions = [ActionCommand(float(a["dx"]), float(a["dy"]), int(a["grip"])) for a in packed]

    states = replay(EnvState.from_dict(meta["initial_state"]), actions)
    if verify:
        for t, state in enumerate(states):
            if not np.array_equal(render(state), frames[t]):
                raise ArtifactError(path, f"Кадр {t} не совпадает с проигрыванием")

    return Trajectory(
        frames=[Frame(state, frames[t].copy()) for t, state in enumerate(states)],
        actions=actions,
        task=TaskSpec.from_dict(meta["task"]),
        scene_description=meta["scene_description"],
        seed=int(meta["seed"]),
        split=meta["split"],
    )


def write_trajectory(path: str, trajectory: Trajectory) -> str:
    FileManager.write_bytes(path, encode_trajectory(trajectory))
    return path


def read_trajectory(path: str, verify: bool = False) -> Trajectory:
    return decode_trajectory(FileManager.read_bytes(path), path, verify)


def to_episode_arrays(trajectory: Trajectory, vocab: Vocabulary) -> EpisodeArrays:
    actions = np.array([a.as_array() for a in trajectory.actions], dtype=np.float32).reshape(-1, 3)
    return EpisodeArrays(
        codes=np.stack([encode_image(frame.image) for frame in trajectory.frames]),
        descriptions=[tokenize_text(describe_scene(s), vocab) for s in trajectory.states],
        instruction_ids=tokenize_text(trajectory.task.instruction, vocab),
        actions=actions,
        instruction=trajectory.task.instruction,
        seed=trajectory.seed,
    )


# ----------------------------------------------------------------------
# Генерация
# ----------------------------------------------------------------------

def _chain_job(job: Tuple[str, int, str, int, int]) -> Tuple[str, int, List[bytes]]:
    pool, seed, split, k, max_steps = job
    trajectories = run_expert_chain(seed, split, k, max_steps)
    return pool, seed, [encode_trajectory(t) for t in trajectories]


def _vqa_lines(seeds: Sequence[int], split: str, per_state: int) -> List[str]:
    lines = []
    for seed in seeds:
        n_steps = int(np.random.default_rng([seed, 77]).integers(0, 25))
        state = advance_along_chain(seed, split, n_steps)
        for pair in make_vqa(state, per_state, seed):
            record = {"seed": seed, "state": state.to_dict(), "question": pair.question, "answer": pair.answer}
            lines.append(json.dumps(record, sort_keys=True))
    return lines


def gen_dataset(config: DataConfig, out_dir: str, seed: int = 0, workers: int = 1,
                config_hash: str = "") -> dict:
    """
    Детерминированная генерация набора данных.

    Одинаковые (config, seed) дают побайтно одинаковые файлы и манифест
    независимо от числа процессов.

    Returns:
        Содержимое manifest.json
    """
    logger.log_operation("Генерация данных", f"Директория: {out_dir}, seed={seed}, процессов: {workers}")
    FileManager.ensure_dir(out_dir)
    vocab = Vocabulary()
    vocab.save(os.path.join(out_dir, "vocab.json"))

    jobs = []
    for pool, count in (("pretrain", config.pretrain_chains),
                        ("demo", config.demo_chains),
                        ("eval", config.eval_chains)):
        for i in range(count):
            jobs.append((pool, pool_seed(pool, i, seed), POOL_SPLITS[pool],
                         config.chain_length, config.max_steps_per_task))

    counts: Dict[str, int] = {"pretrain": 0, "demo": 0, "eval": 0}
    ppm_left = config.dump_ppm
    if workers > 1:
        with Pool(workers) as pool_executor:
            results = list(tqdm(pool_executor.imap(_chain_job, jobs, chunksize=8),
                                total=len(jobs), desc="Демонстрации"))
    else:
        results = [_chain_job(job) for job in tqdm(jobs, desc="Демонстрации")]

    for pool, chain_seed, records in results:
        for i, raw in enumerate(records):
            path = os.path.join(out_dir, "trajectories", pool, f"{chain_seed:09d}_{i}.traj")
            FileManager.write_bytes(path, raw)
            counts[pool] += 1
            if ppm_left > 0:
                trajectory = decode_trajectory(raw, path)
                FileManager.write_ppm(
                    os.path.join(out_dir, "images", f"{pool}_{chain_seed:09d}_{i}.ppm"),
                    trajectory.frames[0].image,
                )
                ppm_left -= 1

    vqa_seeds = [pool_seed("vqa", i, seed) for i in range(config.vqa_train_states + config.vqa_eval_states)]
    splits = {
        "train": (vqa_seeds[:config.vqa_train_states], "train"),
        "eval": (vqa_seeds[config.vqa_train_states:], "eval_seen"),
    }
    for name, (seeds, split) in splits.items():
        lines = _vqa_lines(seeds, split, config.vqa_per_state)
        path = os.path.join(out_dir, "vqa", f"{name}.jsonl")
        FileManager.write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")
        counts[f"vqa_{name}"] = len(lines)
        logger.log_file_operation("Запись VQA", path, f"{len(lines)} пар")

    files = {
        os.path.relpath(p, out_dir).replace(os.sep, "/"): FileManager.sha256_file(p)
        for p in FileManager.find_files(out_dir, [".traj", ".jsonl", ".ppm"])
    }
    manifest = {
        "code_version": __version__,
        "config": asdict(config),
        "config_hash": config_hash,
        "counts": counts,
        "files": files,
        "palette": [{"code": i, "name": name, "rgb": list(rgb)} for i, (name, rgb) in enumerate(PALETTE)],
        "seed": seed,
        "seed_bases": SEED_BASES,
        "splits": POOL_SPLITS,
        "vocab": vocab.to_dict(),
    }
    FileManager.write_json(os.path.join(out_dir, "manifest.json"), manifest)
    logger.info(f"Генерация завершена: {counts}")
    return manifest


# ----------------------------------------------------------------------
# Загрузка
# ----------------------------------------------------------------------

def read_vqa(path: str) -> List[VqaRecord]:
    records = []
    raw = FileManager.read_bytes(path).decode("utf-8")
    for line_no, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
            records.append(VqaRecord(EnvState.from_dict(payload["state"]), payload["question"],
                                     payload["answer"], int(payload["seed"])))
        except (json.JSONDecodeError, KeyError) as e:
            raise ArtifactError(path, f"Повреждённая строка {line_no} ({e})") from e
    return records


def _pool_files(data_dir: str, pool: str) -> List[str]:
    directory = os.path.join(data_dir, "trajectories", pool)
    if not os.path.isdir(directory):
        return []
    return FileManager.find_files(directory, [".traj"])


def load_dataset(data_dir: str, pools: Sequence[str] = ("pretrain", "demo", "eval", "vqa"),
                 verify: bool = False) -> DatasetBundle:
    """
    Загрузка набора данных. Демонстрации обучающих пулов сразу
    переводятся в компактные массивы кодов.

    Raises:
        ArtifactError: нет манифеста, словаря или повреждён файл
    """
    logger.log_operation("Загрузка данных", data_dir)
    manifest = FileManager.read_json(os.path.join(data_dir, "manifest.json"))
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.json"))
    bundle = DatasetBundle(manifest=manifest, vocab=vocab)

    for pool in ("pretrain", "demo"):
        if pool in pools:
            episodes = [to_episode_arrays(read_trajectory(p, verify), vocab)
                        for p in tqdm(_pool_files(data_dir, pool), desc=f"Загрузка {pool}", leave=False)]
            setattr(bundle, pool, episodes)
    if "eval" in pools:
        bundle.eval = [read_trajectory(p, verify) for p in _pool_files(data_dir, "eval")]
    if "vqa" in pools:
        bundle.vqa_train = read_vqa(os.path.join(data_dir, "vqa", "train.jsonl"))
        bundle.vqa_eval = read_vqa(os.path.join(data_dir, "vqa", "eval.jsonl"))

    logger.info(
        f"Загружено: pretrain={len(bundle.pretrain)}, demo={len(bundle.demo)}, eval={len(bundle.eval)}, "
        f"vqa_train={len(bundle.vqa_train)}, vqa_eval={len(bundle.vqa_eval)}"
    )
    return bundle


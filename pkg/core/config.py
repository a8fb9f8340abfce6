"""
Модуль для работы с конфигурацией запуска
"""
import copy
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Any, Dict, List, Mapping, Optional

from core import __version__
from core.blockworld import SPLITS
from core.codecs import Vocabulary
from core.dataset import DataConfig
from core.errors import ArtifactError, ConfigError
from core.model import ModelConfig
from core.seqlayout import Packer
from core.training import TASK_ORDER, LossWeights, StagePlan
from utils.file_utils import FileManager
from utils.logger import logger

RUN_DIR_ENV = "UPVLA_RUN_DIR"
DEFAULT_RUN_DIR = os.path.join("runs", "default")

# не влияют на результаты и в хэш не входят
_UNHASHED_KEYS = ("run_dir", "workers")


class ConfigManager:
    """
    Менеджер конфигурации запуска: TOML поверх значений по умолчанию,
    затем переопределения из командной строки.

    Args:
        config_file: Путь к TOML-файлу (None - только значения по умолчанию)
        overrides: Переопределения по точечным ключам ("tune.steps": 10)
    """

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None):
        self.config_file = config_file
        self.overrides = dict(overrides or {})
        self.config = self.load()

    def load(self) -> Dict[str, Any]:
        config_data = self._get_default_config()
        if self.config_file:
            if not os.path.exists(self.config_file):
                raise ArtifactError(self.config_file, "Файл конфигурации не найден")
            try:
                with open(self.config_file, "rb") as f:
                    file_data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(os.path.basename(self.config_file), f"некорректный TOML ({e})") from e
            self._merge(config_data, file_data, "")
            logger.log_file_operation("Загрузка конфигурации", self.config_file)
        for dotted, value in self.overrides.items():
            self._set(config_data, dotted, value)
        self._validate_semantics(config_data)
        return config_data

    @staticmethod
    def _get_default_config() -> Dict[str, Any]:
        return {
            "seed": 0,
            "run_dir": "",
            "workers": 1,
            "data": {
                "dir": "",
                "pretrain_chains": 100,
                "demo_chains": 1000,
                "eval_chains": 20,
                "vqa_train_states": 1000,
                "vqa_eval_states": 100,
                "vqa_per_state": 5,
                "chain_length": 5,
                "max_steps_per_task": 64,
                "dump_ppm": 8,
            },
            "model": {
                "n_layers": 2,
                "d_model": 128,
                "n_heads": 4,
                "ffn_mult": 4,
                "max_len": 192,
                "action_horizon": 4,
                "action_hidden": 128,
                "init_std": 0.02,
            },
            "pretrain": {
                "steps": 3000,
                "batch_size": 16,
                "lr": 3e-4,
                "warmup_steps": 100,
                "checkpoint_every": 500,
                "mix": {"mmu": 0.5, "pre": 0.5, "act": 0.0},
            },
            "tune": {
                "steps": 5000,
                "batch_size": 16,
                "lr": 3e-4,
                "warmup_steps": 100,
                "checkpoint_every": 500,
                "mix": {"mmu": 0.2, "pre": 0.0, "act": 0.8},
            },
            "loss": {
                "mmu": 1.0,
                "pre": 1.0,
                "act": 1.0,
                "supervise_question": False,
            },
            "ablation": {
                "no_mmu": False,
                "no_pretrain": False,
                "no_prediction": False,
                "no_mmu_condition": False,
            },
            "eval": {
                "split": "eval_unseen_bg",
                "n_chains": 100,
                "n_single": 200,
                "chain_length": 5,
                "max_steps_per_task": 64,
                "replan_every": 4,
                "max_new_tokens": 24,
                "pred_dumps": 8,
            },
            "logging": {
                "enabled": True,
                "directory": "logs",
                "level": "INFO",
                "record_wall_time": True,
            },
        }

    # ------------------------------------------------------------------
    # Слияние и проверка схемы
    # ------------------------------------------------------------------

    @staticmethod
    def _check_type(key: str, default: Any, value: Any) -> Any:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(key, f"ожидалось bool, получено {type(value).__name__}")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(key, f"ожидалось int, получено {type(value).__name__}")
            return value
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(key, f"ожидалось float, получено {type(value).__name__}")
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(key, f"ожидалось str, получено {type(value).__name__}")
            return value
        raise ConfigError(key, "неподдерживаемый тип значения")

    @classmethod
    def _merge(cls, target: Dict[str, Any], source: Mapping[str, Any], prefix: str) -> None:
        for name, value in source.items():
            key = f"{prefix}{name}"
            if name not in target:
                raise ConfigError(key, "неизвестный ключ")
            if isinstance(target[name], dict):
                if not isinstance(value, dict):
                    raise ConfigError(key, "ожидалась секция")
                cls._merge(target[name], value, key + ".")
            else:
                if isinstance(value, dict):
                    raise ConfigError(key, "ожидалось значение, получена секция")
                target[name] = cls._check_type(key, target[name], value)

    @classmethod
    def _set(cls, config_data: Dict[str, Any], dotted: str, value: Any) -> None:
        parts = dotted.split(".")
        node = config_data
        for i, part in enumerate(parts[:-1]):
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(".".join(parts[:i + 1]), "неизвестный ключ")
            node = node[part]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(dotted, "неизвестный ключ")
        node[parts[-1]] = cls._check_type(dotted, node[parts[-1]], value)

    @staticmethod
    def _validate_semantics(config_data: Dict[str, Any]) -> None:
        if config_data["eval"]["split"] not in SPLITS:
            raise ConfigError("eval.split", f"ожидалось одно из {SPLITS}")
        if config_data["workers"] < 1:
            raise ConfigError("workers", "должно быть >= 1")
        for stage in ("pretrain", "tune"):
            mix = config_data[stage]["mix"]
            if abs(sum(mix.values()) - 1.0) > 1e-6:
                raise ConfigError(f"{stage}.mix", f"сумма долей {sum(mix.values())} != 1")
        if config_data["pretrain"]["mix"]["act"] > 0:
            raise ConfigError("pretrain.mix.act", "на предобучении нет данных действий")
        if config_data["logging"]["level"].upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError("logging.level", "неизвестный уровень")

    # ------------------------------------------------------------------
    # Доступ
    # ------------------------------------------------------------------

    def get(self, key: str, default: Any = None) -> Any:
        node: Any = self.config
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def normalized(self) -> Dict[str, Any]:
        return copy.deepcopy(self.config)

    def config_hash(self) -> str:
        hashed = {k: v for k, v in self.config.items() if k not in _UNHASHED_KEYS}
        canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def save(self, path: str) -> str:
        payload = self.normalized()
        payload["config_hash"] = self.config_hash()
        return FileManager.write_json(path, payload)

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def run_dir(self) -> str:
        return self.config["run_dir"] or os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_DIR

    def data_dir(self) -> str:
        return self.config["data"]["dir"] or os.path.join(self.run_dir(), "data")

    def ablation(self, flag: str) -> bool:
        return bool(self.config["ablation"][flag])

    def data_config(self) -> DataConfig:
        data = {k: v for k, v in self.config["data"].items() if k != "dir"}
        return DataConfig(**data)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.config["model"]).validate()

    def loss_weights(self) -> LossWeights:
        loss = self.config["loss"]
        return LossWeights(mmu=loss["mmu"], pre=loss["pre"], act=loss["act"])

    def mmu_condition(self) -> bool:
        # без данных MMU собственное описание сцены не обучено
        return not (self.ablation("no_mmu_condition") or self.ablation("no_mmu"))

    def packer(self, vocab: Vocabulary) -> Packer:
        return Packer(
            vocab,
            max_len=self.config["model"]["max_len"],
            action_horizon=self.config["model"]["action_horizon"],
            supervise_question=self.config["loss"]["supervise_question"],
            mmu_condition=self.mmu_condition(),
        )

    def stage_plan(self, stage: str) -> StagePlan:
        """
        План этапа с учётом абляций. Доли отключённых задач обнуляются,
        оставшиеся нормируются; этап без задач получает 0 шагов.
        """
        section = self.config[stage]
        mix = dict(section["mix"])
        if self.ablation("no_mmu"):
            mix["mmu"] = 0.0
        if self.ablation("no_prediction"):
            mix["pre"] = 0.0
        total = sum(mix.values())
        steps = section["steps"]
        if stage == "pretrain" and self.ablation("no_pretrain"):
            steps = 0
        if total <= 0:
            steps = 0
            mix = {task: 0.0 for task in TASK_ORDER}
        else:
            mix = {task: mix.get(task, 0.0) / total for task in TASK_ORDER}
        return StagePlan(
            stage=stage,
            mix=mix,
            steps=steps,
            batch_size=section["batch_size"],
            lr=section["lr"],
            warmup_steps=section["warmup_steps"],
            checkpoint_every=section["checkpoint_every"],
        )

    def artifact_meta(self) -> Dict[str, Any]:
        return {"config_hash": self.config_hash(), "code_version": __version__, "seed": self.seed}

    @classmethod
    def schema_lines(cls) -> List[str]:
        lines: List[str] = []

        def walk(node: Dict[str, Any], prefix: str) -> None:
            for name, value in node.items():
                key = f"{prefix}{name}"
                if isinstance(value, dict):
                    walk(value, key + ".")
                else:
                    lines.append(f"  {key} = {json.dumps(value)}  ({type(value).__name__})")

        walk(cls._get_default_config(), "")
        return lines

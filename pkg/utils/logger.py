"""
Журнал операций UP-VLA: генерация данных, обучение, оценка
"""

import logging
import math
import os
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Mapping, Optional

from core import __version__

LOGGER_NAME = "UpVla"
LOG_FORMAT = "[%(asctime)s] [%(levelname)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
MAX_LOG_BYTES = 10 * 1024 * 1024
LOG_BACKUPS = 5


class AppLogger:
    """
    Единый журнал процесса.

    До вызова configure() молчит: библиотечный код и тесты ничего не пишут.
    После настройки пишет всё в файл сеанса (с ротацией) и сообщения от
    заданного уровня в консоль.
    """

    _instance: Optional["AppLogger"] = None

    def __new__(cls):
        if cls._instance is None:
            instance = super().__new__(cls)
            instance._logger = logging.getLogger(LOGGER_NAME)
            instance._logger.setLevel(logging.DEBUG)
            instance._logger.propagate = False
            instance._active = False
            instance.log_file = None
            cls._instance = instance
        return cls._instance

    def configure(self, enabled: bool = True, log_path: str = "logs", level: str = "INFO"):
        """
        Args:
            enabled: Писать ли журнал вообще
            log_path: Директория файлов журнала
            level: Минимальный уровень для консоли (DEBUG, INFO, ...)
        """
        self._close_handlers()
        if not enabled:
            return
        console_level = logging.getLevelName(str(level).upper())
        if not isinstance(console_level, int):
            console_level = logging.INFO
        try:
            os.makedirs(log_path, exist_ok=True)
            self.log_file = os.path.join(log_path, f"upvla_{datetime.now():%Y-%m-%d_%H-%M-%S}.log")
            file_handler = RotatingFileHandler(self.log_file, maxBytes=MAX_LOG_BYTES,
                                               backupCount=LOG_BACKUPS, encoding="utf-8")
        except OSError as e:
            print(f"⚠️ Журнал отключён, не удалось открыть {log_path}: {e}")
            return

        formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)
        file_handler.setLevel(logging.DEBUG)
        console_handler = logging.StreamHandler()
        console_handler.setLevel(console_level)
        for handler in (file_handler, console_handler):
            handler.setFormatter(formatter)
            self._logger.addHandler(handler)
        self._active = True
        self._session_header()

    def _close_handlers(self):
        for handler in list(self._logger.handlers):
            handler.close()
            self._logger.removeHandler(handler)
        self._active = False
        self.log_file = None

    def _session_header(self):
        self.info("=" * 70)
        self.info(f"UP-VLA {__version__}: новый сеанс, pid {os.getpid()}")
        self.info(f"Файл журнала: {self.log_file}")
        self.info("=" * 70)

    def _log(self, level: int, message: str):
        if self._active:
            self._logger.log(level, message)

    def debug(self, message: str):
        self._log(logging.DEBUG, message)

    def info(self, message: str):
        self._log(logging.INFO, message)

    def warning(self, message: str):
        self._log(logging.WARNING, message)

    def error(self, message: str):
        self._log(logging.ERROR, message)

    def log_operation(self, operation: str, details: str = ""):
        self.info(f"[ОПЕРАЦИЯ] {operation}: {details}" if details else f"[ОПЕРАЦИЯ] {operation}")

    def log_exception(self, operation: str, exception: Exception):
        self.error(f"[ИСКЛЮЧЕНИЕ] {operation}: {type(exception).__name__}: {exception}")

    def log_file_operation(self, operation: str, filepath: str, status: str = "успешно"):
        """
        Args:
            operation: Что сделано с файлом (чтение, запись, ...)
            filepath: Путь; в INFO попадает только имя, полный путь в DEBUG
            status: Итог операции
        """
        self.info(f"[ФАЙЛ] {operation} | {os.path.basename(str(filepath))} | {status}")
        self.debug(f"  └─ {filepath}")

    def log_metrics(self, step: int, values: Mapping[str, Optional[float]]):
        """Метрики шага обучения одной строкой; отсутствующие значения пишутся как '-'."""
        parts = []
        for name, value in values.items():
            if value is None or (isinstance(value, float) and math.isnan(value)):
                parts.append(f"{name}=-")
            else:
                parts.append(f"{name}={value:.6g}")
        self.debug(f"[МЕТРИКИ] шаг {step}: {' '.join(parts)}")


logger = AppLogger()

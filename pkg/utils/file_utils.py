import hashlib
import json
import os
from typing import Any, Iterable, List

import numpy as np

from core.errors import ArtifactError
from utils.logger import logger


class FileManager:
    """
    Менеджер для работы с файлами артефактов
    """

    ARTIFACT_EXTENSIONS = [
        ".json",
        ".csv",
        ".ckpt",
        ".traj",
        ".jsonl",
        ".ppm",
    ]

    @classmethod
    def find_files(cls, directory: str, extensions: Iterable[str] = None) -> List[str]:
        """
        Рекурсивный поиск файлов с заданными расширениями.
        Порядок результата детерминирован (сортировка по пути).
        """
        extensions = list(extensions or cls.ARTIFACT_EXTENSIONS)
        logger.log_operation("Поиск артефактов", f"Директория: {directory}")
        found_files: List[str] = []

        if not os.path.isdir(directory):
            raise ArtifactError(directory, "Директория не найдена")

        file_count_by_ext = {}
        for root, dirs, files in os.walk(directory):
            dirs.sort()
            for file in sorted(files):
                if any(file.endswith(ext) for ext in extensions):
                    found_files.append(os.path.join(root, file))
                    ext = os.path.splitext(file)[1]
                    file_count_by_ext[ext] = file_count_by_ext.get(ext, 0) + 1

        logger.info(f"Поиск завершён: найдено {len(found_files)} файл(ов)")
        for ext, count in sorted(file_count_by_ext.items()):
            logger.debug(f"  {ext}: {count} файл(ов)")
        return found_files

    @staticmethod
    def ensure_dir(path: str) -> str:
        try:
            os.makedirs(path, exist_ok=True)
        except OSError as e:
            raise ArtifactError(path, f"Не удалось создать директорию ({e})") from e
        return path

    @staticmethod
    def read_json(file_path: str) -> Any:
        if not os.path.exists(file_path):
            raise ArtifactError(file_path)
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                content = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.log_exception(f"Чтение {file_path}", e)
            raise ArtifactError(file_path, f"Повреждённый JSON ({e})") from e
        logger.log_file_operation("Чтение JSON", file_path)
        return content

    @staticmethod
    def write_json(file_path: str, payload: Any) -> str:
        """
        Атомарная запись JSON: сначала во временный файл, затем замена.
        Ключи сортируются, чтобы одинаковые данные давали одинаковые байты.
        """
        directory = os.path.dirname(file_path)
        if directory:
            FileManager.ensure_dir(directory)
        tmp_path = file_path + ".tmp"
        try:
            with open(tmp_path, "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
                f.write("\n")
            os.replace(tmp_path, file_path)
        except OSError as e:
            logger.log_exception(f"Запись {file_path}", e)
            raise ArtifactError(file_path, f"Ошибка записи ({e})") from e
        logger.log_file_operation("Запись JSON", file_path)
        return file_path

    @staticmethod
    def write_bytes(file_path: str, payload: bytes) -> str:
        directory = os.path.dirname(file_path)
        if directory:
            FileManager.ensure_dir(directory)
        try:
            with open(file_path, "wb") as f:
                f.write(payload)
        except OSError as e:
            raise ArtifactError(file_path, f"Ошибка записи ({e})") from e
        return file_path

    @staticmethod
    def read_bytes(file_path: str) -> bytes:
        try:
            with open(file_path, "rb") as f:
                return f.read()
        except FileNotFoundError as e:
            raise ArtifactError(file_path) from e
        except OSError as e:
            raise ArtifactError(file_path, f"Ошибка чтения ({e})") from e

    @staticmethod
    def sha256_file(file_path: str) -> str:
        digest = hashlib.sha256()
        try:
            with open(file_path, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    digest.update(chunk)
        except FileNotFoundError as e:
            raise ArtifactError(file_path) from e
        return digest.hexdigest()

    @staticmethod
    def write_ppm(file_path: str, image: np.ndarray) -> str:
        """
        Запись RGB-изображения в бинарный PPM (P6).

        Args:
            file_path: Путь к файлу
            image: Массив uint8 формы (H, W, 3)
        """
        image = np.ascontiguousarray(image, dtype=np.uint8)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ArtifactError(file_path, f"Ожидалось RGB-изображение, получено {image.shape}")
        height, width = image.shape[:2]
        header = f"P6\n{width} {height}\n255\n".encode("ascii")
        FileManager.write_bytes(file_path, header + image.tobytes())
        logger.log_file_operation("Запись PPM", file_path)
        return file_path

    @staticmethod
    def read_ppm(file_path: str) -> np.ndarray:
        raw = FileManager.read_bytes(file_path)
        # заголовок: 4 поля через пробельные символы, затем ровно один разделитель
        fields, pos = [], 0
        while len(fields) < 4:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ArtifactError(file_path, "Обрезанный заголовок PPM")
            fields.append(raw[start:pos])
        if fields[0] != b"P6":
            raise ArtifactError(file_path, "Не P6 PPM")
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        if maxval != 255:
            raise ArtifactError(file_path, f"Неподдерживаемый maxval {maxval}")
        pixels = raw[pos + 1: pos + 1 + width * height * 3]
        if len(pixels) != width * height * 3:
            raise ArtifactError(file_path, "Обрезанные данные PPM")
        return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()

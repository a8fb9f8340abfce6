"""
Иерархия исключений UP-VLA.

Ошибки делятся на два семейства:
- UserError: ошибка пользователя (конфиг, отсутствующий артефакт), код выхода 1;
- InvariantError: нарушение внутреннего инварианта, код выхода 2.
"""


class UpVlaError(Exception):
    """Базовое исключение проекта"""

    exit_code = 2


class UserError(UpVlaError):
    exit_code = 1


class InvariantError(UpVlaError):
    exit_code = 2


class ConfigError(UserError):
    """Нарушение схемы конфигурации. Всегда называет ключ."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"Ошибка конфигурации [{key}]: {message}")


class ArtifactError(UserError):
    """Отсутствующий или повреждённый файл. Всегда называет путь."""

    def __init__(self, path, message: str = "файл не найден"):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


class ShapeError(InvariantError, ValueError):
    pass


class CodecShapeError(ShapeError):
    pass


class RankError(InvariantError, ValueError):
    pass


class DegenerateRowError(InvariantError, ValueError):
    pass


class EmptySelectionError(InvariantError, ValueError):
    pass


class VocabularyError(InvariantError, KeyError):
    def __init__(self, word: str):
        self.word = word
        super().__init__(f"Слово вне словаря: {word!r}")

    def __str__(self) -> str:
        return self.args[0]


class VocabularyIndexError(InvariantError, IndexError):
    pass


class CodecDomainError(InvariantError, ValueError):
    pass


class LayoutError(InvariantError, ValueError):
    pass


class InfeasibleTaskError(InvariantError, ValueError):
    pass


class TrainingDivergedError(InvariantError, FloatingPointError):
    pass


class SelftestFailure(InvariantError):
    pass


class EmptyEvaluationError(UserError, ValueError):
    """Оценка без единой цепочки: нечего усреднять."""

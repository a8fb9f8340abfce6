import pytest

from utils.logger import AppLogger, logger


@pytest.fixture
def session_log(tmp_path):
    logger.configure(enabled=True, log_path=str(tmp_path / "logs"), level="WARNING")
    yield logger
    logger.configure(enabled=False)


def read_log(path):
    for handler in logger._logger.handlers:
        handler.flush()
    with open(path, encoding="utf-8") as f:
        return f.read()


def test_logger_is_a_singleton():
    assert AppLogger() is logger


def test_session_file_receives_all_levels(session_log):
    session_log.log_operation("Проверка", "детали")
    session_log.log_metrics(3, {"total_loss": 0.5, "pre_loss": float("nan"), "act_loss": None})
    session_log.log_exception("Проверка", ValueError("плохо"))
    text = read_log(session_log.log_file)
    assert "[ОПЕРАЦИЯ] Проверка: детали" in text
    assert "[МЕТРИКИ] шаг 3: total_loss=0.5 pre_loss=- act_loss=-" in text
    assert "[ИСКЛЮЧЕНИЕ] Проверка: ValueError: плохо" in text


def test_disabled_logger_writes_nothing(tmp_path):
    logger.configure(enabled=False, log_path=str(tmp_path / "logs"))
    logger.info("тишина")
    assert logger.log_file is None
    assert not (tmp_path / "logs").exists()

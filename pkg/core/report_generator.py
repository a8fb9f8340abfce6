"""
Модуль для генерации сводного отчёта по запускам (DOCX и CSV)
"""

import csv
import io
import os
from datetime import datetime
from typing import List, Optional, Sequence

from docx import Document
from docx.enum.text import WD_ALIGN_PARAGRAPH
from docx.shared import Cm, Pt

from core.errors import ArtifactError
from utils.file_utils import FileManager
from utils.logger import logger

CSV_COLUMNS = (
    "variant", "split", "n_seeds", "avg_len_mean", "avg_len_std", "delta_vs_full",
    "rate_1", "rate_2", "rate_3", "rate_4", "rate_5",
    "vqa_accuracy_mean", "pred_token_accuracy_mean",
)

TABLE_HEADER = ("Вариант", "Сплит", "Сидов", "Avg.Len", "Δ к full", "Задачи 1..5")


def _fmt(value: Optional[float], digits: int = 3) -> str:
    if value is None:
        return ""
    return f"{value:.{digits}f}"


class ReportGenerator:
    """
    Генератор сводных таблиц абляций
    """

    @staticmethod
    def csv_rows(rows: Sequence) -> List[List[str]]:
        out = []
        for row in rows:
            rates = list(row.rates_mean) + [None] * max(0, 5 - len(row.rates_mean))
            out.append([
                row.variant, row.split, str(row.n_seeds),
                _fmt(row.avg_len_mean, 4), _fmt(row.avg_len_std, 4), _fmt(row.delta_vs_full, 4),
                *[_fmt(r, 4) for r in rates[:5]],
                _fmt(row.vqa_accuracy_mean, 4), _fmt(row.pred_token_accuracy_mean, 4),
            ])
        return out

    @staticmethod
    def write_csv(rows: Sequence, output_path: str) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(ReportGenerator.csv_rows(rows))
        FileManager.write_bytes(output_path, buffer.getvalue().encode("utf-8"))
        logger.log_file_operation("Сохранение CSV", output_path)
        return output_path

    @staticmethod
    def generate(rows: Sequence, output_path: str, run_dirs: Sequence[str],
                 title: str = "Сравнение вариантов UP-VLA", config_hash: Optional[str] = None) -> str:
        """
        Генерация DOCX: заголовок, список запусков и таблица результатов.

        Args:
            rows: Строки сводной таблицы
            output_path: Путь для сохранения документа
            run_dirs: Директории запусков, вошедших в отчёт
            config_hash: Хэш конфигурации отчёта (пишется под заголовком)

        Returns:
            Путь к документу
        """
        logger.info("=" * 70)
        logger.log_operation("Начало генерации отчёта", f"строк: {len(rows)}, запусков: {len(run_dirs)}")

        try:
            doc = Document()
            ReportGenerator._add_heading(doc, title)
            ReportGenerator._add_text(doc, f"Сформировано: {datetime.now().strftime('%Y-%m-%d %H:%M')}")
            if config_hash:
                ReportGenerator._add_text(doc, f"Хэш конфигурации: {config_hash}")
            ReportGenerator._add_text(doc, "Запуски:")
            for run_dir in run_dirs:
                ReportGenerator._add_text(doc, f"• {os.path.basename(os.path.normpath(run_dir))}", indent=True)
            ReportGenerator._add_table(doc, rows)
            doc.save(output_path)
        except OSError as e:
            logger.log_exception("Генерация отчёта", e)
            raise ArtifactError(output_path, f"Не удалось сохранить отчёт ({e})") from e

        logger.log_file_operation("Сохранение документа", output_path, "успешно")
        logger.info("=" * 70)
        return output_path

    @staticmethod
    def _add_heading(doc, text: str):
        heading = doc.add_paragraph()
        heading.alignment = WD_ALIGN_PARAGRAPH.CENTER
        heading.paragraph_format.space_after = Pt(12)
        run = heading.add_run(text)
        run.font.name = "Times New Roman"
        run.font.size = Pt(14)
        run.bold = True

    @staticmethod
    def _add_text(doc, text: str, indent: bool = False):
        para = doc.add_paragraph()
        para.alignment = WD_ALIGN_PARAGRAPH.LEFT
        para.paragraph_format.left_indent = Cm(1.25) if indent else Cm(0)
        para.paragraph_format.space_after = Pt(0)
        run = para.add_run(text)
        run.font.name = "Times New Roman"
        run.font.size = Pt(12)

    @staticmethod
    def _add_table(doc, rows: Sequence):
        table = doc.add_table(rows=1, cols=len(TABLE_HEADER))
        table.style = "Table Grid"
        for cell, name in zip(table.rows[0].cells, TABLE_HEADER):
            cell.text = name
            for run in cell.paragraphs[0].runs:
                run.bold = True
                run.font.size = Pt(10)
        for row in rows:
            cells = table.add_row().cells
            values = (
                row.variant,
                row.split,
                str(row.n_seeds),
                f"{row.avg_len_mean:.2f} ± {row.avg_len_std:.2f}",
                _fmt(row.delta_vs_full, 2),
                " / ".join(_fmt(r, 2) for r in row.rates_mean),
            )
            for cell, value in zip(cells, values):
                cell.text = value
                for run in cell.paragraphs[0].runs:
                    run.font.size = Pt(10)


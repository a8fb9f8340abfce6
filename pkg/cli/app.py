"""
Командная строка UP-VLA: генерация данных, два этапа обучения, оценка и отчёт
"""

import argparse
import os
import sys
from typing import Optional, Sequence

from core.blockworld import SPLITS
from core.config import ConfigManager
from core.dataset import gen_dataset, load_dataset, pool_seed
from core.errors import ArtifactError, InvariantError, SelftestFailure, UpVlaError, UserError
from core.evalharness import (
    EvalReport, ExpertPolicy, ModelAnswerer, ModelPolicy, ModelPredictor, RandomPolicy, avg_len,
    eval_chains, eval_pred, eval_single_task, eval_vqa, pred_triples, report,
)
from core.model import init_params, load_checkpoint
from core.selftest import run_all
from core.training import build_datasets, checkpoint_path, run_stage
from utils.file_utils import FileManager
from utils.logger import logger

COMMANDS = ("gen-data", "pretrain", "tune", "eval-chain", "eval-vqa", "eval-pred", "report", "selftest")

# индексы сидов оценки цепочек не пересекаются с сохранёнными демонстрациями пула eval
EVAL_CHAIN_OFFSET = 100_000


def build_parser() -> argparse.ArgumentParser:
    schema = "\n".join(ConfigManager.schema_lines())
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="UP-VLA: объединённая модель понимания, предсказания и действий в Blockworld",
        epilog=f"Схема конфигурации (ключ = значение по умолчанию):\n{schema}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=COMMANDS, help="Подкоманда")
    parser.add_argument("--config", default=None, help="TOML-файл конфигурации")
    parser.add_argument("--run-dir", default=None, help="Директория запуска (иначе $UPVLA_RUN_DIR)")
    parser.add_argument("--workers", type=int, default=None, help="Число процессов")
    parser.add_argument("--seed", type=int, default=None, help="Сид запуска")
    parser.add_argument("--no-mmu", action="store_true", help="Без данных MMU на обоих этапах")
    parser.add_argument("--no-pretrain", action="store_true", help="Пропустить этап предобучения")
    parser.add_argument("--no-prediction", action="store_true", help="Без предсказания будущего кадра")
    parser.add_argument("--no-mmu-condition", action="store_true", help="ACT без описания сцены и наблюдения")
    parser.add_argument("--replan-every", type=int, default=None, help="Действий из чанка до перепланирования")
    parser.add_argument("--split", choices=SPLITS, default=None, help="Сплит оценки")
    parser.add_argument("--n-chains", type=int, default=None, help="Число цепочек оценки")
    parser.add_argument("--policy", choices=("model", "expert", "random"), default="model",
                        help="Политика для eval-chain")
    parser.add_argument("--runs", nargs="+", default=None, help="Директории запусков для report")
    parser.add_argument("--out", default=None, help="Директория отчёта")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.run_dir is not None:
        overrides["run_dir"] = args.run_dir
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag in ("no_mmu", "no_pretrain", "no_prediction", "no_mmu_condition"):
        if getattr(args, flag):
            overrides[f"ablation.{flag}"] = True
    if args.replan_every is not None:
        overrides["eval.replan_every"] = args.replan_every
    if args.split is not None:
        overrides["eval.split"] = args.split
    if args.n_chains is not None:
        overrides["eval.n_chains"] = args.n_chains
    return overrides


class CommandRunner:
    """
    Исполнитель подкоманд. Каждая подкоманда записывает нормализованный
    конфиг в директорию запуска и встраивает его хэш в свои артефакты.
    """

    def __init__(self, config: ConfigManager):
        self.config = config
        self.run_dir = FileManager.ensure_dir(config.run_dir())
        self.meta = config.artifact_meta()

    def run(self, args: argparse.Namespace) -> int:
        handler = {
            "gen-data": self.gen_data,
            "pretrain": self.pretrain,
            "tune": self.tune,
            "eval-chain": self.eval_chain,
            "eval-vqa": self.eval_vqa,
            "eval-pred": self.eval_pred,
            "report": self.report,
            "selftest": self.selftest,
        }[args.command]
        logger.log_operation(f"Команда {args.command}", f"запуск: {self.run_dir}, хэш: {self.meta['config_hash']}")
        if args.command not in ("report", "selftest"):
            self.config.save(os.path.join(self.run_dir, "config.normalized.json"))
        return handler(args)

    # ------------------------------------------------------------------

    def gen_data(self, args) -> int:
        manifest = gen_dataset(
            self.config.data_config(),
            self.config.data_dir(),
            seed=self.config.seed,
            workers=self.config.get("workers"),
            config_hash=self.meta["config_hash"],
        )
        print(f"✅ Данные: {manifest['counts']} -> {self.config.data_dir()}")
        return 0

    def _train(self, stage: str) -> int:
        pools = ("pretrain", "vqa") if stage == "pretrain" else ("demo", "vqa")
        bundle = load_dataset(self.config.data_dir(), pools)
        model_config = self.config.model_config(bundle.vocab.size)
        packer = self.config.packer(bundle.vocab)
        plan = self.config.stage_plan(stage)
        if plan.steps == 0:
            logger.warning(f"Этап {stage} пропущен: нет шагов или задач в составе")
            print(f"⏭️ Этап {stage} пропущен")
            return 0

        if stage == "tune" and self.config.stage_plan("pretrain").steps > 0:
            source = checkpoint_path(self.run_dir, "pretrain", "final")
            params, _, _ = load_checkpoint(source)
        else:
            params = init_params(model_config, self.config.seed)

        datasets = build_datasets(stage, bundle, packer, predict_future=not self.config.ablation("no_prediction"))
        result = run_stage(
            plan, params, datasets, model_config, self.run_dir,
            weights=self.config.loss_weights(),
            seed=self.config.seed,
            meta=self.meta,
            record_wall_time=self.config.get("logging.record_wall_time"),
        )
        last = result.rows[-1] if result.rows else {}
        print(f"✅ Этап {stage}: {plan.steps} шагов, последняя потеря {last.get('total_loss', float('nan')):.4f}")
        return 0

    def pretrain(self, args) -> int:
        return self._train("pretrain")

    def tune(self, args) -> int:
        return self._train("tune")

    def _load_model(self):
        bundle_vocab = load_dataset(self.config.data_dir(), pools=()).vocab
        for stage in ("tune", "pretrain"):
            path = checkpoint_path(self.run_dir, stage, "final")
            if os.path.exists(path):
                params, _, _ = load_checkpoint(path)
                return params, self.config.model_config(bundle_vocab.size), self.config.packer(bundle_vocab)
        raise ArtifactError(checkpoint_path(self.run_dir, "tune", "final"))

    def _write_report(self, name: str, eval_report: EvalReport) -> str:
        payload = {**eval_report.to_dict(), **self.meta}
        path = os.path.join(self.run_dir, "eval", name)
        FileManager.write_json(path, payload)
        return path

    def eval_chain(self, args) -> int:
        split = self.config.get("eval.split")
        n_chains = self.config.get("eval.n_chains")
        horizon = self.config.get("model.action_horizon")
        if args.policy == "model":
            params, model_config, packer = self._load_model()
            policy = ModelPolicy(params, model_config, packer, self.config.get("eval.max_new_tokens"))
        elif args.policy == "expert":
            policy = ExpertPolicy()
        else:
            policy = RandomPolicy(self.config.seed, horizon)

        seeds = [pool_seed("eval", EVAL_CHAIN_OFFSET + i, self.config.seed) for i in range(n_chains)]
        replan = self.config.get("eval.replan_every") or None
        max_steps = self.config.get("eval.max_steps_per_task")
        workers = self.config.get("workers")
        results = eval_chains(policy, seeds, split, self.config.get("eval.chain_length"), max_steps, replan, workers)
        summary = avg_len(results)

        single_seeds = [pool_seed("eval", 2 * EVAL_CHAIN_OFFSET + i, self.config.seed)
                        for i in range(self.config.get("eval.n_single"))]
        single = eval_single_task(policy, single_seeds, split, max_steps, replan, workers)

        eval_report = EvalReport(kind="chain", split=split, config_hash=self.meta["config_hash"], seeds=seeds,
                                 rates=summary.rates, avg_len=summary.avg_len, single_task_success=single)
        path = self._write_report(f"eval_chain_{split}.json", eval_report)
        rates = " ".join(f"{r:.2f}" for r in summary.rates)
        print(f"✅ {split}: Avg.Len = {summary.avg_len:.3f} ({rates}), одна задача: {single:.3f} -> {path}")
        return 0

    def eval_vqa(self, args) -> int:
        params, model_config, packer = self._load_model()
        bundle = load_dataset(self.config.data_dir(), pools=("vqa",))
        answerer = ModelAnswerer(params, model_config, packer, self.config.get("eval.max_new_tokens"))
        accuracy = eval_vqa(answerer, [(r.image, r.question, r.answer) for r in bundle.vqa_eval])
        eval_report = EvalReport(kind="vqa", split="eval_seen", config_hash=self.meta["config_hash"],
                                 seeds=sorted({r.seed for r in bundle.vqa_eval}), vqa_accuracy=accuracy)
        path = self._write_report("eval_vqa.json", eval_report)
        print(f"✅ VQA: точность {accuracy:.3f} -> {path}")
        return 0

    def eval_pred(self, args) -> int:
        params, model_config, packer = self._load_model()
        bundle = load_dataset(self.config.data_dir(), pools=("eval",))
        triples = pred_triples(bundle.eval, model_config.action_horizon)
        accuracy = eval_pred(ModelPredictor(params, model_config, packer), triples,
                             dump_dir=os.path.join(self.run_dir, "eval", "pred_dumps"),
                             max_dumps=self.config.get("eval.pred_dumps"))
        eval_report = EvalReport(kind="pred", split="eval_seen", config_hash=self.meta["config_hash"],
                                 seeds=sorted({t.seed for t in bundle.eval}), pred_token_accuracy=accuracy)
        path = self._write_report("eval_pred.json", eval_report)
        print(f"✅ Предсказание кадра: точность по токенам {accuracy:.3f} -> {path}")
        return 0

    def report(self, args) -> int:
        runs = args.runs or [self.run_dir]
        out_dir = args.out or os.path.join(self.run_dir, "report")
        rows = report(runs, out_dir, config_hash=self.meta["config_hash"])
        for row in rows:
            delta = "" if row.delta_vs_full is None else f" (Δ {row.delta_vs_full:+.3f})"
            print(f"  {row.variant:<28} {row.split:<18} {row.avg_len_mean:.3f} ± {row.avg_len_std:.3f}{delta}")
        print(f"✅ Отчёт -> {out_dir}")
        return 0

    def selftest(self, args) -> int:
        results = run_all(self.config.seed)
        for result in results:
            print(f"{'✅' if result.passed else '❌'} {result.name}: {result.detail}")
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise SelftestFailure(f"Не пройдены проверки: {', '.join(failed)}")
        return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Точка входа. Коды выхода: 0 - успех, 1 - ошибка пользователя,
    2 - нарушение внутреннего инварианта или непредвиденное исключение.
    """
    args = build_parser().parse_args(argv)
    try:
        config = ConfigManager(args.config, overrides_from_args(args))
        logger.configure(
            enabled=config.get("logging.enabled"),
            log_path=config.get("logging.directory"),
            level=config.get("logging.level"),
        )
        return CommandRunner(config).run(args)
    except UserError as e:
        logger.log_exception(f"Команда {args.command}", e)
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except UpVlaError as e:
        logger.log_exception(f"Команда {args.command}", e)
        print(f"❌ Внутренняя ошибка: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.log_exception(f"Команда {args.command}", e)
        print(f"❌ Непредвиденная ошибка: {type(e).__name__}: {e}", file=sys.stderr)
        return InvariantError.exit_code

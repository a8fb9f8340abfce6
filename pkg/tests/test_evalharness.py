import csv
import json
import os

import numpy as np
import pytest

from core.blockworld import ActionCommand, TaskSpec, render, reset, run_expert_chain, sample_chain
from core.errors import ArtifactError, EmptyEvaluationError, InvariantError, UserError
from core.evalharness import (
    ChainResult, ExpertPolicy, ModelPolicy, RandomPolicy, avg_len, build_report, eval_chains,
    eval_pred, eval_single_task, eval_vqa, pred_triples, report, rollout_chain, variant_label,
)
from core.model import init_params
from utils.file_utils import FileManager


def test_expert_completes_all_chains():
    for split in ("eval_seen", "eval_unseen_bg", "eval_unseen_color"):
        results = eval_chains(ExpertPolicy(), range(10), split, k=5)
        summary = avg_len(results)
        assert summary.avg_len == 5.0
        assert summary.rates == [1.0] * 5


def test_random_policy_rarely_succeeds():
    summary = avg_len(eval_chains(RandomPolicy(seed=0, horizon=4), range(100), "eval_seen", k=5))
    assert summary.avg_len < 0.2


def test_parallel_evaluation_matches_serial():
    policy = RandomPolicy(seed=3, horizon=4)
    serial = eval_chains(policy, range(6), "eval_seen", k=5, workers=1)
    parallel = eval_chains(policy, range(6), "eval_seen", k=5, workers=2)
    assert serial == parallel


def test_chain_flags_must_form_a_prefix():
    with pytest.raises(InvariantError):
        ChainResult((True, False, True, False, False))
    assert ChainResult((True, True, False, False, False)).completed == 2


def test_avg_len_arithmetic():
    results = [
        ChainResult((True, True, False, False, False)),
        ChainResult((True, False, False, False, False)),
        ChainResult((False, False, False, False, False)),
    ]
    summary = avg_len(results)
    assert summary.rates == pytest.approx([2 / 3, 1 / 3, 0.0, 0.0, 0.0])
    assert summary.avg_len == pytest.approx(1.0)
    assert summary.avg_len == pytest.approx(sum(summary.rates))


def test_avg_len_hand_enumerated_chains():
    results = [
        ChainResult((True, True, False, False, False)),
        ChainResult((True, False, False, False, False)),
        ChainResult((True, True, True, True, True)),
    ]
    summary = avg_len(results)
    assert summary.rates == pytest.approx([1.0, 2 / 3, 1 / 3, 1 / 3, 1 / 3])
    assert summary.avg_len == pytest.approx(8 / 3)


def test_avg_len_of_nothing_is_an_error():
    with pytest.raises(EmptyEvaluationError) as exc:
        avg_len([])
    assert isinstance(exc.value, UserError)


class StuckPolicy:
    def __init__(self):
        self.calls = 0

    def act(self, state, task):
        self.calls += 1
        return [ActionCommand(0.0, 0.0, 0)] * 4


class SilentPolicy:
    def act(self, state, task):
        return []


def test_failed_first_task_ends_the_episode():
    chain = sample_chain(0, 5, "eval_seen")
    result = rollout_chain(StuckPolicy(), chain, 0, "eval_seen", max_steps_per_task=5)
    assert result.flags == (False,) * 5
    assert result.steps_used == (5,)
    assert rollout_chain(SilentPolicy(), chain, 0, "eval_seen").flags == (False,) * 5


def test_replanning_queries_policy_more_often():
    chain = [TaskSpec("press_button")]
    sparse, dense = StuckPolicy(), StuckPolicy()
    rollout_chain(sparse, chain, 4, "eval_seen", max_steps_per_task=16)
    rollout_chain(dense, chain, 4, "eval_seen", max_steps_per_task=16, replan_every=1)
    assert (sparse.calls, dense.calls) == (4, 16)


def test_single_task_success_of_expert():
    assert eval_single_task(ExpertPolicy(), range(5), "eval_unseen_bg") == 1.0


def test_model_policy_returns_bounded_chunk(packer, tiny_config):
    policy = ModelPolicy(init_params(tiny_config, 0), tiny_config, packer, max_new_tokens=3)
    state = reset(0, "eval_seen")
    actions = policy.act(state, sample_chain(0, 5, "eval_seen")[0])
    assert len(actions) == 4
    assert all(abs(a.dx) <= 1 and abs(a.dy) <= 1 and a.grip in (0, 1) for a in actions)


def test_eval_vqa_scores_exact_matches():
    image = render(reset(0))
    pairs = [(image, "is there a red block ?", "yes"), (image, "what is the gripper holding ?", "nothing")]
    assert eval_vqa(lambda img, q: "yes", pairs) == 0.5
    assert eval_vqa(lambda img, q: dict((p[1], p[2]) for p in pairs)[q], pairs) == 1.0


def test_eval_pred_with_oracle(tmp_path):
    trajectories = run_expert_chain(0, "eval_seen", k=1)
    triples = pred_triples(trajectories, 4)
    assert len(triples) == len(trajectories[0].frames)
    lookup = {(t[0], t[1].tobytes()): t[2] for t in triples}
    accuracy = eval_pred(lambda instr, cur: lookup[(instr, cur.tobytes())], triples,
                         dump_dir=str(tmp_path), max_dumps=1)
    assert accuracy == 1.0
    assert sorted(os.listdir(str(tmp_path))) == [
        "pred_000_current.ppm", "pred_000_predicted.ppm", "pred_000_target.ppm"]
    orange = np.full(64, 15, dtype=np.uint8)
    assert eval_pred(lambda instr, cur: orange, triples[:1]) == 0.0


def write_run(run_dir, ablation, avg, rates, split="eval_seen"):
    flags = {"no_mmu": False, "no_pretrain": False, "no_prediction": False, "no_mmu_condition": False}
    flags.update(ablation)
    FileManager.write_json(os.path.join(run_dir, "config.normalized.json"), {"ablation": flags})
    FileManager.write_json(os.path.join(run_dir, "eval", f"eval_chain_{split}.json"),
                           {"split": split, "avg_len": avg, "rates": rates})


def test_variant_labels():
    assert variant_label({}) == "full"
    assert variant_label({"no_pretrain": True, "no_mmu": True}) == "no-mmu+no-pretrain"


def test_report_aggregates_runs(tmp_path):
    runs = [str(tmp_path / name) for name in ("full_a", "full_b", "nopre")]
    write_run(runs[0], {}, 2.0, [0.8, 0.6, 0.3, 0.2, 0.1])
    write_run(runs[1], {}, 2.0, [0.8, 0.6, 0.3, 0.2, 0.1])
    write_run(runs[2], {"no_pretrain": True}, 1.5, [0.7, 0.4, 0.2, 0.1, 0.1])
    out = str(tmp_path / "report")
    rows = report(runs, out, config_hash="abc123")

    by_variant = {row.variant: row for row in rows}
    assert by_variant["full"].n_seeds == 2
    assert by_variant["full"].avg_len_std == 0.0
    assert by_variant["full"].delta_vs_full == 0.0
    assert by_variant["no-pretrain"].delta_vs_full == pytest.approx(-0.5)

    for name in ("comparison.json", "comparison.csv", "comparison.docx"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "comparison.csv"), encoding="utf-8") as f:
        table = list(csv.DictReader(f))
    assert {r["variant"] for r in table} == {"full", "no-pretrain"}
    with open(os.path.join(out, "comparison.json"), encoding="utf-8") as f:
        comparison = json.load(f)
    assert len(comparison["rows"]) == 2
    assert comparison["config_hash"] == "abc123"
    assert set(comparison["run_config_hashes"]) == set(runs)


def test_report_sample_std(tmp_path):
    runs = [str(tmp_path / f"seed{i}") for i in range(3)]
    for run, value in zip(runs, (1.0, 2.0, 3.0)):
        write_run(run, {}, value, [value / 5] * 5)
    (row,) = build_report(runs)
    assert row.avg_len_mean == pytest.approx(2.0)
    assert row.avg_len_std == pytest.approx(1.0)


def test_report_requires_chain_results(tmp_path):
    run = str(tmp_path / "empty")
    FileManager.write_json(os.path.join(run, "config.normalized.json"), {"ablation": {}})
    with pytest.raises(ArtifactError):
        build_report([run])

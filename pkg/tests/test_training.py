import os

import numpy as np
import pytest

from core.blockworld import DESCRIBE_PROMPT, run_expert_chain
from core.codecs import Vocabulary, encode_image, tokenize_text
from core.dataset import load_dataset
from core.errors import ConfigError, TrainingDivergedError
from core.model import ModelConfig, forward, generate_text, init_params, load_checkpoint, predict_future_tokens
from core.ndcore import (
    AdamState, Tensor, adam_step, backward, bce_with_logits, cross_entropy, mse, no_grad, warmup_lr,
)
from core.selftest import tiny_model_batch
from core.seqlayout import Packer, chunk_actions, collate
from core.training import (
    LossWeights, StagePlan, action_mse, allocate_counts, build_datasets, checkpoint_path, compute_losses,
    mmu_token_accuracy, pre_token_accuracy, read_metrics, run_stage, sample_batch, weighted_total,
)
from utils.file_utils import FileManager

ACTION_HEAD = ("map_query", "map_wq", "map_wk", "map_wv", "map_wo", "act_w1", "act_b1", "act_w2", "act_b2")


@pytest.fixture(scope="module")
def bundle(tiny_data_dir):
    return load_dataset(tiny_data_dir)


def tune_plan(steps=4, checkpoint_every=2, batch_size=4):
    return StagePlan("tune", {"mmu": 0.25, "pre": 0.0, "act": 0.75}, steps,
                     batch_size=batch_size, lr=1e-3, warmup_steps=2, checkpoint_every=checkpoint_every)


def test_weighted_total_sums_components():
    components = {"mmu": Tensor(0.5), "pre": Tensor(0.25), "act": Tensor(0.25)}
    assert weighted_total(components, LossWeights()).item() == pytest.approx(1.0)
    assert weighted_total(components, LossWeights(act=2.0)).item() == pytest.approx(1.25)
    assert weighted_total({"mmu": None}, LossWeights()).item() == 0.0


def test_negative_weight_is_rejected():
    with pytest.raises(ConfigError) as exc:
        LossWeights(pre=-1.0)
    assert exc.value.key == "loss.pre"


def test_zero_action_weight_leaves_action_head_untouched():
    config, batch = tiny_model_batch(seed=0)
    params = init_params(config, 0)
    params.zero_grad()
    losses = compute_losses(batch, forward(batch, params, config), LossWeights(act=0.0))
    assert losses.components["act"] == 0.0
    backward(losses.total)
    grads = params.grads()
    for name in ACTION_HEAD:
        assert not grads[name].any(), name
    assert grads["head_w"].any()


def test_pure_mmu_batch_reports_zero_for_other_tasks():
    config, batch = tiny_model_batch(seed=0, tasks=("mmu",))
    params = init_params(config, 0)
    params.zero_grad()
    losses = compute_losses(batch, forward(batch, params, config), LossWeights())
    assert losses.components["pre"] == 0.0 and losses.value("pre") == 0.0
    assert losses.components["act"] == 0.0 and losses.value("act") == 0.0
    assert losses.total.item() == pytest.approx(losses.components["mmu"])
    backward(losses.total)
    grads = params.grads()
    for name in ACTION_HEAD:
        assert not grads[name].any(), name


def test_total_is_weighted_sum_of_components(float64):
    config, batch = tiny_model_batch(seed=3)
    params = init_params(config, 0)
    weights = LossWeights(mmu=0.5, pre=2.0, act=1.5)
    outputs = forward(batch, params, config)
    losses = compute_losses(batch, outputs, weights)

    mmu = cross_entropy(outputs.lm_logits, batch.lm_targets, batch.lm_loss_mask).item()
    pre = cross_entropy(outputs.lm_logits, batch.pre_targets, batch.pre_loss_mask).item()
    rows = batch.act_has_targets
    a_end = outputs.actions.a_end_logits.data[rows]
    grip = batch.grip_targets[rows].reshape(a_end.shape)
    act = (mse(Tensor(outputs.actions.a_pos.data[rows]), batch.action_targets[rows]).item()
           + bce_with_logits(Tensor(a_end), grip).item())

    assert losses.components["mmu"] == pytest.approx(mmu, abs=1e-9)
    assert losses.components["pre"] == pytest.approx(pre, abs=1e-9)
    assert losses.components["act"] == pytest.approx(act, abs=1e-9)
    assert abs(losses.total.item() - (0.5 * mmu + 2.0 * pre + 1.5 * act)) < 1e-6


@pytest.mark.parametrize("mix,batch_size,expected", [
    ({"act": 0.8, "mmu": 0.2}, 10, {"mmu": 2, "pre": 0, "act": 8}),
    ({"mmu": 0.5, "pre": 0.5}, 16, {"mmu": 8, "pre": 8, "act": 0}),
    ({"mmu": 1 / 3, "pre": 1 / 3, "act": 1 / 3}, 10, {"mmu": 4, "pre": 3, "act": 3}),
    ({"mmu": 0.2, "act": 0.8}, 1, {"mmu": 0, "pre": 0, "act": 1}),
])
def test_allocate_counts(mix, batch_size, expected):
    assert allocate_counts(mix, batch_size) == expected


def test_stage_plan_validation():
    with pytest.raises(ConfigError):
        StagePlan("tune", {"mmu": 0.5, "act": 0.4}, 10)
    with pytest.raises(ConfigError):
        StagePlan("pretrain", {"mmu": 0.5, "act": 0.5}, 10)
    with pytest.raises(ConfigError):
        StagePlan("warmup", {"mmu": 1.0}, 10)


def test_sample_batch_is_deterministic(bundle, packer):
    datasets = build_datasets("tune", bundle, packer)
    plan = tune_plan(batch_size=8)
    _, first = sample_batch(datasets, plan, step=3, seed=0)
    _, again = sample_batch(datasets, plan, step=3, seed=0)
    _, other = sample_batch(datasets, plan, step=4, seed=0)
    assert first == again
    assert first != other
    assert [task for task, _ in first] == ["mmu"] * 2 + ["act"] * 6


def test_sample_batch_requires_data(packer):
    with pytest.raises(ConfigError):
        sample_batch({"mmu": []}, tune_plan(), step=0)


def test_run_stage_writes_metrics_and_checkpoints(bundle, packer, tiny_config, tmp_path):
    datasets = build_datasets("tune", bundle, packer)
    result = run_stage(tune_plan(), init_params(tiny_config, 0), datasets, tiny_config, str(tmp_path),
                       meta={"config_hash": "abc"}, record_wall_time=False)
    rows = read_metrics(os.path.join(str(tmp_path), "metrics_tune.csv"))
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert all(r["n_mmu"] == "1" and r["n_act"] == "3" and r["wall_ms"] == "0" for r in rows)
    assert all(0.0 <= float(r["pre_acc"]) <= 1.0 and 0.0 <= float(r["mmu_acc"]) <= 1.0 for r in rows)
    assert all(float(r["pre_loss"]) > 0.0 and float(r["act_mse"]) >= 0.0 for r in rows)
    assert result.checkpoint_path == checkpoint_path(str(tmp_path), "tune", "final")
    _, optimizer, meta = load_checkpoint(result.checkpoint_path)
    assert optimizer.step == 4 and meta["step"] == 4 and meta["config_hash"] == "abc"
    with open(os.path.join(str(tmp_path), "metrics_tune.csv"), encoding="utf-8") as f:
        assert f.readline() == "# config_hash=abc\n"


def test_resume_reproduces_uninterrupted_run(bundle, packer, tiny_config, tmp_path):
    datasets = build_datasets("tune", bundle, packer)
    straight, interrupted = str(tmp_path / "straight"), str(tmp_path / "interrupted")
    run_stage(tune_plan(), init_params(tiny_config, 0), datasets, tiny_config, straight, record_wall_time=False)

    partial = run_stage(tune_plan(), init_params(tiny_config, 0), datasets, tiny_config, interrupted,
                        record_wall_time=False, stop_after=2)
    assert partial.checkpoint_path is None
    resumed = run_stage(tune_plan(), init_params(tiny_config, 99), datasets, tiny_config, interrupted,
                        record_wall_time=False)
    assert [row["step"] for row in resumed.rows] == [2, 3]

    for name in ("metrics_tune.csv", os.path.join("checkpoints", "tune_final.ckpt")):
        assert FileManager.sha256_file(os.path.join(straight, name)) == \
            FileManager.sha256_file(os.path.join(interrupted, name))


def test_divergence_is_reported(bundle, packer, tiny_config, tmp_path):
    params = init_params(tiny_config, 0)
    params["head_b"].data[:] = np.nan
    with pytest.raises(TrainingDivergedError):
        run_stage(tune_plan(), params, build_datasets("tune", bundle, packer), tiny_config, str(tmp_path))
    assert os.path.exists(os.path.join(str(tmp_path), "diverged_tune_step0.json"))


def test_loss_decreases_on_a_fixed_batch():
    config, batch = tiny_model_batch(seed=1)
    params = init_params(config, 0)
    optimizer = AdamState()
    history = []
    for _ in range(40):
        params.zero_grad()
        losses = compute_losses(batch, forward(batch, params, config), LossWeights())
        history.append(losses.total.item())
        backward(losses.total)
        adam_step(params, params.grads(), optimizer, lr=1e-2)
    assert history[-1] < 0.8 * history[0]


@pytest.mark.slow
def test_overfits_future_frame_tokens():
    config, batch = tiny_model_batch(seed=2)
    params = init_params(config, 0)
    optimizer = AdamState()
    history = []
    for _ in range(400):
        params.zero_grad()
        losses = compute_losses(batch, forward(batch, params, config), LossWeights(mmu=0.0, act=0.0))
        history.append(losses.components["pre"])
        backward(losses.total)
        adam_step(params, params.grads(), optimizer, lr=1e-2)
    assert history[-1] < 0.25 * history[0]


def overfit_samples(packer, vocab, n_samples=32):
    """Смешанный фиксированный набор: MMU-описание, PRE и ACT с первого кадра каждой демонстрации."""
    samples, seed = [], 0
    while len(samples) < n_samples:
        trajectory = run_expert_chain(seed, "train", k=1)[0]
        codes = [encode_image(frame.image) for frame in trajectory.frames]
        actions = np.array([a.as_array() for a in trajectory.actions])
        future = codes[min(packer.action_horizon, len(codes) - 1)]
        instruction = tokenize_text(trajectory.task.instruction, vocab)
        description = tokenize_text(trajectory.scene_description, vocab)
        image = trajectory.frames[0].image
        samples += [
            ("mmu", packer.pack_mmu(image, tokenize_text(DESCRIBE_PROMPT, vocab), description),
             (image, description)),
            ("pre", packer.pack_pre(instruction, codes[0], future), future),
            ("act", packer.pack_act(image, description, instruction, codes[0], future,
                                    chunk_actions(actions, 0, packer.action_horizon)), None),
        ]
        seed += 1
    return samples[:n_samples]


@pytest.fixture(scope="module")
def overfit_run():
    vocab = Vocabulary()
    packer = Packer(vocab, max_len=192, action_horizon=4)
    samples = overfit_samples(packer, vocab)
    batch = collate([packed for _, packed, _ in samples])
    config = ModelConfig(n_layers=2, d_model=64, n_heads=4, ffn_mult=4, max_len=192,
                         vocab_size=vocab.size, action_horizon=4, action_hidden=64)
    params = init_params(config, 0)
    optimizer = AdamState()
    scores = {}
    for step in range(2000):
        params.zero_grad()
        outputs = forward(batch, params, config)
        scores = {
            "mmu_acc": mmu_token_accuracy(batch, outputs),
            "pre_acc": pre_token_accuracy(batch, outputs, vocab),
            "act_mse": action_mse(batch, outputs),
            "step": step,
        }
        if scores["mmu_acc"] >= 0.995 and scores["pre_acc"] >= 0.995 and scores["act_mse"] <= 5e-4:
            break
        losses = compute_losses(batch, outputs, LossWeights())
        backward(losses.total)
        adam_step(params, params.grads(), optimizer, lr=warmup_lr(step, 3e-3, 50))
    return {"vocab": vocab, "packer": packer, "samples": samples, "batch": batch,
            "config": config, "params": params, "scores": scores}


@pytest.mark.slow
def test_fixed_mixed_set_is_memorized(overfit_run):
    scores = overfit_run["scores"]
    assert scores["mmu_acc"] >= 0.99, scores
    assert scores["pre_acc"] >= 0.99, scores
    assert scores["act_mse"] <= 1e-3, scores


@pytest.mark.slow
def test_memorized_future_frames_are_predicted(overfit_run):
    run = overfit_run
    pre = [(i, future) for i, (task, _, future) in enumerate(run["samples"]) if task == "pre"]
    with no_grad():
        outputs = forward(run["batch"], run["params"], run["config"], compute_actions=False)
    matches = [
        predict_future_tokens(outputs.lm_logits, run["samples"][i][1], run["vocab"], row=i) == future
        for i, future in pre
    ]
    assert np.mean(matches) >= 0.99


@pytest.mark.slow
def test_memorized_descriptions_are_generated(overfit_run):
    run = overfit_run
    vocab, packer = run["vocab"], run["packer"]
    prompts = [extra for task, _, extra in run["samples"] if task == "mmu"]
    exact = 0
    for image, description in prompts:
        prefix = packer.pack_mmu(image, tokenize_text(DESCRIBE_PROMPT, vocab), prompt_only=True)
        generated = generate_text(prefix, run["params"], run["config"], packer, max_new=24)
        exact += generated == list(description)
    assert exact >= len(prompts) - 2

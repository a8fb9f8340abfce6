"""
Самопроверка: градиенты против конечных разностей, векторная маска
против поэлементной, кодек изображений на отрисованных сценах.
"""

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from core.blockworld import reset, render, run_expert_chain
from core.codecs import Vocabulary, decode_tokens, encode_image, tokenize_text
from core.model import ModelConfig, forward, init_params
from core.ndcore import (
    Tensor, cross_entropy, finite_difference_check, gelu, layer_norm, masked_softmax, matmul,
    precision, tensor_sum,
)
from core.seqlayout import (
    SEGMENT_KINDS, Packer, Segment, build_mask, build_mask_reference, chunk_actions, collate,
)
from core.training import LossWeights, compute_losses
from utils.logger import logger

GRAD_TOLERANCE = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _grad_case(name: str, fn: Callable[[], Tensor], tensors, max_entries=None) -> CheckResult:
    err = finite_difference_check(fn, tensors, max_entries=max_entries)
    return CheckResult(f"grad:{name}", err < GRAD_TOLERANCE, f"max rel err {err:.2e}")


def check_gradients(seed: int = 0) -> List[CheckResult]:
    """Проверка градиентов в режиме float64."""
    results = []
    with precision(np.float64):
        rng = np.random.default_rng(seed)
        a, b = _leaf(rng, 4, 5), _leaf(rng, 5, 3)
        results.append(_grad_case("matmul", lambda: tensor_sum(matmul(a, b) * matmul(a, b)), [a, b]))

        x = _leaf(rng, 16)
        results.append(_grad_case("gelu", lambda: tensor_sum(gelu(x) * gelu(x)), [x]))

        logits = _leaf(rng, 2, 5, 5)
        mask = np.tril(np.ones((5, 5), dtype=bool))
        weights = rng.normal(size=(2, 5, 5))
        results.append(_grad_case(
            "masked_softmax", lambda: tensor_sum(masked_softmax(logits, mask) * Tensor(weights)), [logits]))

        h, g, bias = _leaf(rng, 3, 8), _leaf(rng, 8), _leaf(rng, 8)
        proj = rng.normal(size=(3, 8))
        results.append(_grad_case(
            "layer_norm", lambda: tensor_sum(layer_norm(h, g, bias) * Tensor(proj)), [h, g, bias]))

        z = _leaf(rng, 4, 7)
        targets = rng.integers(0, 7, size=4)
        keep = np.array([True, False, True, True])
        results.append(_grad_case("cross_entropy", lambda: cross_entropy(z, targets, keep), [z]))

        results.append(check_model_gradients(seed))
    return results


def tiny_model_batch(seed: int = 0, mmu_condition: bool = True, n_layers: int = 1,
                     tasks: Sequence[str] = ("mmu", "pre", "act")):
    """
    Крошечная модель и пакет для проверок.

    Args:
        seed: Сид цепочки эксперта, из первого кадра которой строятся примеры
        mmu_condition: Подставлять ли описание сцены в раскладку ACT
        n_layers: Число блоков трансформера
        tasks: Какие задачи попадут в пакет (по одному примеру на задачу)
    """
    vocab = Vocabulary()
    packer = Packer(vocab, max_len=192, action_horizon=4, mmu_condition=mmu_condition)
    trajectory = run_expert_chain(seed, "train", k=1)[0]
    codes = [encode_image(frame.image) for frame in trajectory.frames]
    actions = np.array([a.as_array() for a in trajectory.actions])
    instruction = tokenize_text(trajectory.task.instruction, vocab)
    description = tokenize_text(trajectory.scene_description, vocab)
    future = codes[min(4, len(codes) - 1)]
    builders = {
        "mmu": lambda: packer.pack_mmu(trajectory.frames[0].image,
                                       tokenize_text("describe this image", vocab), description),
        "pre": lambda: packer.pack_pre(instruction, codes[0], future),
        "act": lambda: packer.pack_act(trajectory.frames[0].image, description, instruction, codes[0],
                                       future, chunk_actions(actions, 0, 4)),
    }
    samples = [builders[task]() for task in tasks]
    config = ModelConfig(n_layers=n_layers, d_model=8, n_heads=2, ffn_mult=2, max_len=192,
                         vocab_size=vocab.size, action_horizon=4, action_hidden=8, init_std=0.5)
    return config, collate(samples)


def check_model_gradients(seed: int = 0, entries_per_tensor: int = 4) -> CheckResult:
    """Градиенты двухслойной модели по всем параметрам на пакете из трёх задач."""
    config, batch = tiny_model_batch(seed, n_layers=2)
    params = init_params(config, seed)

    def loss() -> Tensor:
        return compute_losses(batch, forward(batch, params, config), LossWeights()).total

    tensors = [params[name] for name in params]
    return _grad_case("model", loss, tensors, max_entries=entries_per_tensor)


def random_segments(rng: np.random.Generator, max_len: int = 48) -> List[Segment]:
    segments, used = [], 0
    while used < max_len:
        kind = SEGMENT_KINDS[int(rng.integers(len(SEGMENT_KINDS)))]
        length = int(rng.integers(0, 8))
        if used + length > max_len:
            break
        segments.append(Segment(kind, length))
        used += length
        if rng.random() < 0.1:
            break
    return segments


def check_masks(n: int = 1000, seed: int = 0, max_len: int = 48) -> CheckResult:
    rng = np.random.default_rng(seed)
    for i in range(n):
        segments = random_segments(rng, max_len)
        if not np.array_equal(build_mask(segments, max_len), build_mask_reference(segments, max_len)):
            return CheckResult("mask", False, f"раскладка {i}: {segments}")
    return CheckResult("mask", True, f"{n} раскладок")


def check_codec(n: int = 1000, seed: int = 0) -> CheckResult:
    splits = ("train", "eval_seen", "eval_unseen_bg", "eval_unseen_color")
    for i in range(n):
        image = render(reset(seed + i, splits[i % len(splits)]))
        if not np.array_equal(decode_tokens(encode_image(image)), image):
            return CheckResult("codec", False, f"сцена {i}")
    return CheckResult("codec", True, f"{n} сцен")


def run_all(seed: int = 0) -> List[CheckResult]:
    results = check_gradients(seed) + [check_masks(seed=seed), check_codec(seed=seed)]
    for result in results:
        status = "OK" if result.passed else "ОШИБКА"
        logger.info(f"[SELFTEST] {result.name}: {status} ({result.detail})")
    return results

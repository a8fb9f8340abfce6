"""
Раскладка последовательностей трёх задач (MMU, PRE, ACT) и гибридная
маска внимания: причинная для текста и служебных токенов, двунаправленная
внутри блоков изображений и слотов действий.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.blockworld import ActionCommand
from core.codecs import N_PATCHES, Vocabulary
from core.errors import CodecShapeError, LayoutError
from utils.file_utils import FileManager

SPECIAL = "special"
CONT_IMAGE = "cont_image"
TEXT = "text"
DISC_IMAGE = "disc_image"
ACTION_QUERY = "action_query"

SEGMENT_KINDS = (SPECIAL, CONT_IMAGE, TEXT, DISC_IMAGE, ACTION_QUERY)
BIDIRECTIONAL_KINDS = frozenset({CONT_IMAGE, DISC_IMAGE, ACTION_QUERY})

# тег 0 зарезервирован за PAD
SEGMENT_TAGS = {kind: i + 1 for i, kind in enumerate(SEGMENT_KINDS)}
TAG_NAMES = {0: "pad", **{v: k for k, v in SEGMENT_TAGS.items()}}

# id-заглушка на позициях непрерывного вложения
INJECT_ID = -1


@dataclass(frozen=True)
class Segment:
    kind: str
    length: int

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise LayoutError(f"Неизвестный тип сегмента: {self.kind}")
        if self.length < 0:
            raise LayoutError(f"Отрицательная длина сегмента: {self.length}")

    @property
    def attend_policy(self) -> str:
        return "block_bidirectional" if self.kind in BIDIRECTIONAL_KINDS else "causal"


def _position_segments(segments: Sequence[Segment], total_len: int) -> Tuple[np.ndarray, np.ndarray]:
    used = sum(s.length for s in segments)
    if used > total_len:
        raise LayoutError(f"Раскладка длины {used} не помещается в {total_len}")
    seg_index = np.full(total_len, -1, dtype=np.int64)
    bidirectional = np.zeros(total_len, dtype=bool)
    start = 0
    for i, segment in enumerate(segments):
        seg_index[start:start + segment.length] = i
        bidirectional[start:start + segment.length] = segment.kind in BIDIRECTIONAL_KINDS
        start += segment.length
    return seg_index, bidirectional


def segment_tags(segments: Sequence[Segment], total_len: int) -> np.ndarray:
    tags = np.zeros(total_len, dtype=np.uint8)
    start = 0
    for segment in segments:
        tags[start:start + segment.length] = SEGMENT_TAGS[segment.kind]
        start += segment.length
    return tags


def build_mask(segments: Sequence[Segment], total_len: int) -> np.ndarray:
    """
    Маска внимания [L, L]: mask[q, k] истинно, если запрос q видит ключ k.

    Видимость: k <= q, либо q и k в одном двунаправленном сегменте.
    Строки и столбцы PAD полностью ложны.
    """
    seg_index, bidirectional = _position_segments(segments, total_len)
    positions = np.arange(total_len)
    causal = positions[None, :] <= positions[:, None]
    same_block = (seg_index[:, None] == seg_index[None, :]) & bidirectional[:, None]
    active = seg_index >= 0
    return (causal | same_block) & active[:, None] & active[None, :]


def build_mask_reference(segments: Sequence[Segment], total_len: int) -> np.ndarray:
    """Поэлементная версия build_mask для проверок."""
    owner = []
    for i, segment in enumerate(segments):
        owner.extend([i] * segment.length)
    if len(owner) > total_len:
        raise LayoutError(f"Раскладка длины {len(owner)} не помещается в {total_len}")
    mask = np.zeros((total_len, total_len), dtype=bool)
    for q in range(len(owner)):
        for k in range(len(owner)):
            if k <= q:
                mask[q, k] = True
            elif owner[q] == owner[k] and segments[owner[q]].kind in BIDIRECTIONAL_KINDS:
                mask[q, k] = True
    return mask


@dataclass
class PackedSequence:
    """
    Упакованная последовательность одной задачи.

    Цели LM хранятся в предсказывающей позиции: lm_targets[p] - токен
    позиции p + 1. Цели предсказания кадра хранятся в самих позициях
    блока v (выход позиции i предсказывает код заплатки i будущего кадра).
    """

    task: str
    token_ids: np.ndarray
    segments: Tuple[Segment, ...]
    segment_tags: np.ndarray
    attention_mask: np.ndarray
    lm_targets: np.ndarray
    lm_loss_mask: np.ndarray
    pre_targets: np.ndarray
    pre_loss_mask: np.ndarray
    inject_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    image: Optional[np.ndarray] = None
    v_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    action_slots: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    action_targets: Optional[np.ndarray] = None
    grip_targets: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return int(sum(s.length for s in self.segments))

    @property
    def max_len(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def continuous_injection(self) -> List[Tuple[int, int]]:
        """Пары (позиция, индекс заплатки)."""
        return [(int(p), i) for i, p in enumerate(self.inject_positions)]


@dataclass
class PackedBatch:
    """Пакет упакованных последовательностей одинаковой длины."""

    samples: List[PackedSequence]
    tasks: List[str]
    token_ids: np.ndarray
    attention_mask: np.ndarray
    query_active: np.ndarray
    lm_targets: np.ndarray
    lm_loss_mask: np.ndarray
    pre_targets: np.ndarray
    pre_loss_mask: np.ndarray
    images: Optional[np.ndarray]
    inject_batch: np.ndarray
    inject_pos: np.ndarray
    act_batch: np.ndarray
    action_slots: np.ndarray
    action_targets: np.ndarray
    grip_targets: np.ndarray
    act_has_targets: np.ndarray


class Packer:
    """
    Сборщик последовательностей трёх задач.

    Args:
        vocab: Единый словарь
        max_len: Длина упакованной последовательности
        action_horizon: Число слотов действий (длина чанка)
        supervise_question: Учитывать токены вопроса в потере MMU
        mmu_condition: Добавлять в ACT наблюдение и описание сцены
    """

    def __init__(self, vocab: Vocabulary, max_len: int = 192, action_horizon: int = 4,
                 supervise_question: bool = False, mmu_condition: bool = True):
        if action_horizon < 1:
            raise LayoutError(f"Горизонт действий должен быть >= 1, получено {action_horizon}")
        self.vocab = vocab
        self.max_len = int(max_len)
        self.action_horizon = int(action_horizon)
        self.supervise_question = supervise_question
        self.mmu_condition = mmu_condition

    def _assemble(self, task: str, pieces: Sequence[Tuple[str, Sequence[int]]]) -> PackedSequence:
        segments = tuple(Segment(kind, len(ids)) for kind, ids in pieces)
        total = sum(s.length for s in segments)
        if total > self.max_len:
            raise LayoutError(f"Последовательность {task} длины {total} превышает max_len={self.max_len}")
        token_ids = np.full(self.max_len, self.vocab.PAD, dtype=np.int64)
        if total:
            token_ids[:total] = np.concatenate([np.asarray(ids, dtype=np.int64) for _, ids in pieces])
        empty = np.zeros(self.max_len, dtype=bool)
        return PackedSequence(
            task=task,
            token_ids=token_ids,
            segments=segments,
            segment_tags=segment_tags(segments, self.max_len),
            attention_mask=build_mask(segments, self.max_len),
            lm_targets=np.zeros(self.max_len, dtype=np.int64),
            lm_loss_mask=empty.copy(),
            pre_targets=np.zeros(self.max_len, dtype=np.int64),
            pre_loss_mask=empty.copy(),
        )

    @staticmethod
    def _segment_start(packed: PackedSequence, index: int) -> int:
        return int(sum(s.length for s in packed.segments[:index]))

    def _check_codes(self, codes, name: str) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.shape != (N_PATCHES,):
            raise CodecShapeError(f"{name}: ожидалось {N_PATCHES} кодов, получено {codes.shape}")
        return codes

    def pack_mmu(self, image: np.ndarray, question_ids: Sequence[int],
                 answer_ids: Sequence[int] = (), prompt_only: bool = False) -> PackedSequence:
        """
        [BOS, MMU, SOI_U, u x 64, EOI_U, вопрос, ответ, EOS].

        prompt_only собирает префикс без ответа и EOS для генерации.
        """
        v = self.vocab
        text = list(question_ids) if prompt_only else list(question_ids) + list(answer_ids)
        pieces = [
            (SPECIAL, [v.BOS, v.MMU, v.SOI_U]),
            (CONT_IMAGE, [INJECT_ID] * N_PATCHES),
            (SPECIAL, [v.EOI_U]),
            (TEXT, text),
        ]
        if not prompt_only:
            pieces.append((SPECIAL, [v.EOS]))
        packed = self._assemble("mmu", pieces)
        packed.image = np.asarray(image, dtype=np.uint8)
        packed.inject_positions = np.arange(3, 3 + N_PATCHES, dtype=np.int64)

        if not prompt_only:
            text_start = self._segment_start(packed, 3)
            n_question = len(question_ids)
            last = text_start + len(text)  # позиция EOS
            first = text_start - 1 if self.supervise_question else text_start + n_question - 1
            predicting = np.arange(first, last)
            packed.lm_targets[predicting] = packed.token_ids[predicting + 1]
            packed.lm_loss_mask[predicting] = True
        return packed

    def pack_pre(self, instruction_ids: Sequence[int], current_codes, future_codes=None) -> PackedSequence:
        """[BOS, PRE, инструкция, SOI_V, v x 64, EOI_V]."""
        v = self.vocab
        current = self._check_codes(current_codes, "current")
        pieces = [
            (SPECIAL, [v.BOS, v.PRE]),
            (TEXT, list(instruction_ids)),
            (SPECIAL, [v.SOI_V]),
            (DISC_IMAGE, v.image_ids(current)),
            (SPECIAL, [v.EOI_V]),
        ]
        packed = self._assemble("pre", pieces)
        start = self._segment_start(packed, 3)
        packed.v_positions = np.arange(start, start + N_PATCHES, dtype=np.int64)
        if future_codes is not None:
            self._set_future(packed, future_codes)
        return packed

    def pack_act(self, image: np.ndarray, description_ids: Sequence[int], instruction_ids: Sequence[int],
                 current_codes, future_codes=None, action_chunk=None) -> PackedSequence:
        """
        С условием MMU:
            [BOS, MMU, SOI_U, u x 64, EOI_U, описание, инструкция, PRE, SOI_V, v x 64, EOI_V, ACT x dt]
        Без условия MMU:
            [BOS, PRE, инструкция, SOI_V, v x 64, EOI_V, ACT x dt]
        """
        v = self.vocab
        current = self._check_codes(current_codes, "current")
        if self.mmu_condition:
            pieces = [
                (SPECIAL, [v.BOS, v.MMU, v.SOI_U]),
                (CONT_IMAGE, [INJECT_ID] * N_PATCHES),
                (SPECIAL, [v.EOI_U]),
                (TEXT, list(description_ids)),
                (TEXT, list(instruction_ids)),
                (SPECIAL, [v.PRE, v.SOI_V]),
            ]
        else:
            pieces = [
                (SPECIAL, [v.BOS, v.PRE]),
                (TEXT, list(instruction_ids)),
                (SPECIAL, [v.SOI_V]),
            ]
        v_index = len(pieces)
        pieces += [
            (DISC_IMAGE, v.image_ids(current)),
            (SPECIAL, [v.EOI_V]),
            (ACTION_QUERY, [v.ACT] * self.action_horizon),
        ]
        packed = self._assemble("act", pieces)
        if self.mmu_condition:
            packed.image = np.asarray(image, dtype=np.uint8)
            packed.inject_positions = np.arange(3, 3 + N_PATCHES, dtype=np.int64)
        v_start = self._segment_start(packed, v_index)
        packed.v_positions = np.arange(v_start, v_start + N_PATCHES, dtype=np.int64)
        slots_start = self._segment_start(packed, len(pieces) - 1)
        packed.action_slots = np.arange(slots_start, slots_start + self.action_horizon, dtype=np.int64)

        if future_codes is not None:
            self._set_future(packed, future_codes)
        if action_chunk is not None:
            chunk = self._chunk_array(action_chunk)
            packed.action_targets = chunk[:, :2].astype(np.float64)
            packed.grip_targets = chunk[:, 2].astype(np.float64)
        return packed

    def _set_future(self, packed: PackedSequence, future_codes) -> None:
        future = self._check_codes(future_codes, "future")
        packed.pre_targets[packed.v_positions] = self.vocab.image_ids(future)
        packed.pre_loss_mask[packed.v_positions] = True

    def _chunk_array(self, action_chunk) -> np.ndarray:
        if len(action_chunk) and isinstance(action_chunk[0], ActionCommand):
            chunk = np.stack([a.as_array() for a in action_chunk])
        else:
            chunk = np.asarray(action_chunk, dtype=np.float32).reshape(-1, 3)
        if chunk.shape != (self.action_horizon, 3):
            raise LayoutError(f"Чанк действий формы {chunk.shape}, ожидалось ({self.action_horizon}, 3)")
        return chunk

    def append_text(self, packed: PackedSequence, token_id: int) -> PackedSequence:
        """Добавление одного токена в конец текстового сегмента префикса генерации."""
        if not packed.segments or packed.segments[-1].kind != TEXT:
            raise LayoutError("append_text: последовательность не оканчивается текстовым сегментом")
        length = packed.length
        if length >= self.max_len:
            raise LayoutError(f"append_text: достигнут max_len={self.max_len}")
        segments = packed.segments[:-1] + (Segment(TEXT, packed.segments[-1].length + 1),)
        token_ids = packed.token_ids.copy()
        token_ids[length] = int(token_id)
        return replace(
            packed,
            token_ids=token_ids,
            segments=segments,
            segment_tags=segment_tags(segments, self.max_len),
            attention_mask=build_mask(segments, self.max_len),
        )


def chunk_actions(actions: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """
    Чанк действий [t, t + horizon); за концом демонстрации дополняется
    (0, 0, последний захват).
    """
    actions = np.asarray(actions, dtype=np.float32).reshape(-1, 3)
    chunk = actions[t:t + horizon]
    if len(chunk) < horizon:
        last_grip = actions[-1, 2] if len(actions) else 0.0
        pad = np.zeros((horizon - len(chunk), 3), dtype=np.float32)
        pad[:, 2] = last_grip
        chunk = np.concatenate([chunk, pad], axis=0)
    return chunk


def collate(samples: Sequence[PackedSequence]) -> PackedBatch:
    """Сборка пакета; все последовательности должны иметь одинаковый max_len."""
    if not samples:
        raise LayoutError("collate: пустой пакет")
    lengths = {s.max_len for s in samples}
    if len(lengths) != 1:
        raise LayoutError(f"collate: разные длины последовательностей {sorted(lengths)}")

    images, inject_batch, inject_pos = [], [], []
    for b, sample in enumerate(samples):
        if sample.image is not None and len(sample.inject_positions):
            images.append(sample.image)
            inject_batch.append(np.full(len(sample.inject_positions), b, dtype=np.int64))
            inject_pos.append(sample.inject_positions)

    act_batch = [b for b, s in enumerate(samples) if len(s.action_slots)]
    horizons = {len(samples[b].action_slots) for b in act_batch}
    if len(horizons) > 1:
        raise LayoutError(f"collate: разные горизонты действий {sorted(horizons)}")
    horizon = horizons.pop() if horizons else 0
    n_act = len(act_batch)
    action_targets = np.zeros((n_act, horizon, 2))
    grip_targets = np.zeros((n_act, horizon))
    has_targets = np.zeros(n_act, dtype=bool)
    for row, b in enumerate(act_batch):
        if samples[b].action_targets is not None:
            action_targets[row] = samples[b].action_targets
            grip_targets[row] = samples[b].grip_targets
            has_targets[row] = True

    tags = np.stack([s.segment_tags for s in samples])
    return PackedBatch(
        samples=list(samples),
        tasks=[s.task for s in samples],
        token_ids=np.stack([s.token_ids for s in samples]),
        attention_mask=np.stack([s.attention_mask for s in samples]),
        query_active=tags != 0,
        lm_targets=np.stack([s.lm_targets for s in samples]),
        lm_loss_mask=np.stack([s.lm_loss_mask for s in samples]),
        pre_targets=np.stack([s.pre_targets for s in samples]),
        pre_loss_mask=np.stack([s.pre_loss_mask for s in samples]),
        images=np.stack(images) if images else None,
        inject_batch=np.concatenate(inject_batch) if inject_batch else np.zeros(0, dtype=np.int64),
        inject_pos=np.concatenate(inject_pos) if inject_pos else np.zeros(0, dtype=np.int64),
        act_batch=np.asarray(act_batch, dtype=np.int64),
        action_slots=(np.stack([samples[b].action_slots for b in act_batch])
                      if act_batch else np.zeros((0, 0), dtype=np.int64)),
        action_targets=action_targets,
        grip_targets=grip_targets,
        act_has_targets=has_targets,
    )


def dump_packed(packed: PackedSequence, path: str) -> str:
    """JSON-дамп последовательности; строки маски записываются битовыми строками."""
    payload = {
        "task": packed.task,
        "token_ids": packed.token_ids.tolist(),
        "segments": [{"kind": s.kind, "length": s.length, "attend": s.attend_policy} for s in packed.segments],
        "segment_tags": [TAG_NAMES[int(t)] for t in packed.segment_tags],
        "attention_mask": ["".join("1" if x else "0" for x in row) for row in packed.attention_mask],
        "lm_targets": packed.lm_targets.tolist(),
        "lm_loss_mask": packed.lm_loss_mask.astype(int).tolist(),
        "pre_targets": packed.pre_targets.tolist(),
        "pre_loss_mask": packed.pre_loss_mask.astype(int).tolist(),
        "continuous_injection": packed.continuous_injection,
        "action_slots": packed.action_slots.tolist(),
    }
    return FileManager.write_json(path, payload)

"""
Декодер-трансформер с пре-нормализацией, голова языковой модели и
голова действий (пулинг внимания по слотам плюс MLP).

Также содержит формат контрольных точек.
"""

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from core.codecs import PATCH_DIM, N_PATCHES, Vocabulary, patch_embed
from core.errors import ArtifactError, ConfigError, LayoutError, ShapeError
from core.ndcore import (
    AdamState, Tensor, add, embedding_lookup, gather_rows, gelu, getitem, layer_norm,
    masked_softmax, matmul, no_grad, reshape, scale, scatter_rows, tanh, transpose,
)
from core.seqlayout import INJECT_ID, PackedBatch, PackedSequence, Packer, collate
from utils.file_utils import FileManager
from utils.logger import logger

CHECKPOINT_MAGIC = b"UPVLACKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 192
    vocab_size: int = 0
    action_horizon: int = 4
    action_hidden: int = 128
    init_std: float = 0.02

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ConfigError("model.n_heads", f"d_model={self.d_model} не делится на n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("model.n_layers", "должно быть >= 1")
        if self.action_horizon < 1:
            raise ConfigError("model.action_horizon", "должно быть >= 1")
        if self.vocab_size < 1:
            raise ConfigError("model.vocab_size", "словарь не задан")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams(Mapping[str, Tensor]):
    """Именованный набор обучаемых тензоров."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors: Dict[str, Tensor] = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._tensors.items()
        }

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return cls({name: Tensor(np.array(a), requires_grad=True) for name, a in arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({name: t.data.copy() for name, t in self._tensors.items()})

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._tensors):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self._tensors[name].data).tobytes())
        return digest.hexdigest()

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Детерминированная инициализация по сиду."""
    config.validate()
    rng = np.random.default_rng([seed, 4242])
    d, std = config.d_model, config.init_std
    hidden = d * config.ffn_mult
    shapes: Dict[str, Tuple[Tuple[int, ...], str]] = {
        "tok_emb": ((config.vocab_size, d), "normal"),
        "pos_emb": ((config.max_len, d), "normal"),
        "act_offset": ((config.action_horizon, d), "normal"),
        "patch_w": ((PATCH_DIM, d), "normal"),
        "patch_b": ((d,), "zeros"),
        "patch_pos": ((N_PATCHES, d), "normal"),
        "lnf_g": ((d,), "ones"),
        "lnf_b": ((d,), "zeros"),
        "head_w": ((d, config.vocab_size), "normal"),
        "head_b": ((config.vocab_size,), "zeros"),
        "map_query": ((config.action_horizon, d), "normal"),
        "map_wq": ((d, d), "normal"),
        "map_wk": ((d, d), "normal"),
        "map_wv": ((d, d), "normal"),
        "map_wo": ((d, d), "normal"),
        "act_w1": ((d, config.action_hidden), "normal"),
        "act_b1": ((config.action_hidden,), "zeros"),
        "act_w2": ((config.action_hidden, 3), "normal"),
        "act_b2": ((3,), "zeros"),
    }
    for i in range(config.n_layers):
        prefix = f"layer{i}."
        shapes.update({
            prefix + "ln1_g": ((d,), "ones"),
            prefix + "ln1_b": ((d,), "zeros"),
            prefix + "attn_wq": ((d, d), "normal"),
            prefix + "attn_wk": ((d, d), "normal"),
            prefix + "attn_wv": ((d, d), "normal"),
            prefix + "attn_wo": ((d, d), "normal"),
            prefix + "attn_bo": ((d,), "zeros"),
            prefix + "ln2_g": ((d,), "ones"),
            prefix + "ln2_b": ((d,), "zeros"),
            prefix + "ffn_w1": ((d, hidden), "normal"),
            prefix + "ffn_b1": ((hidden,), "zeros"),
            prefix + "ffn_w2": ((hidden, d), "normal"),
            prefix + "ffn_b2": ((d,), "zeros"),
        })

    arrays = {}
    for name in sorted(shapes):
        shape, kind = shapes[name]
        if kind == "normal":
            arrays[name] = rng.normal(0.0, std, size=shape)
        elif kind == "ones":
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    params = ModelParams.from_arrays(arrays)
    logger.debug(f"Инициализировано {params.n_parameters()} параметров (seed={seed})")
    return params


@dataclass
class ActionOutput:
    a_pos: Tensor
    a_end_logits: Tensor


@dataclass
class ForwardOutput:
    lm_logits: Tensor
    final_features: Tensor
    actions: Optional[ActionOutput] = None


def _attention(x: Tensor, params: ModelParams, prefix: str, n_heads: int,
               mask: np.ndarray, query_active: np.ndarray) -> Tensor:
    batch, length, d = x.shape
    head_dim = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, n_heads, head_dim)), (0, 2, 1, 3))

    q = heads(matmul(x, params[prefix + "attn_wq"]))
    k = heads(matmul(x, params[prefix + "attn_wk"]))
    v = heads(matmul(x, params[prefix + "attn_wv"]))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    probs = masked_softmax(scores, mask, query_active)
    merged = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (batch, length, d))
    return add(matmul(merged, params[prefix + "attn_wo"]), params[prefix + "attn_bo"])


def _block(x: Tensor, params: ModelParams, index: int, config: ModelConfig,
           mask: np.ndarray, query_active: np.ndarray) -> Tensor:
    prefix = f"layer{index}."
    h = layer_norm(x, params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    x = add(x, _attention(h, params, prefix, config.n_heads, mask, query_active))
    h = layer_norm(x, params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    h = gelu(add(matmul(h, params[prefix + "ffn_w1"]), params[prefix + "ffn_b1"]))
    return add(x, add(matmul(h, params[prefix + "ffn_w2"]), params[prefix + "ffn_b2"]))


def embed_inputs(batch: PackedBatch, params: ModelParams, config: ModelConfig) -> Tensor:
    """
    Входные вложения [B, L, d]: вложения токенов, на позициях блока u
    заменённые вложениями заплаток, плюс смещения слотов действий и
    позиционные вложения.
    """
    ids = np.where(batch.token_ids == INJECT_ID, 0, batch.token_ids)
    x = embedding_lookup(params["tok_emb"], ids)
    _, length, d = x.shape
    if length > params["pos_emb"].shape[0]:
        raise LayoutError(f"Длина {length} превышает max_len={params['pos_emb'].shape[0]}")

    if batch.images is not None and len(batch.inject_pos):
        patches = patch_embed(batch.images, params)
        x = scatter_rows(x, batch.inject_batch, batch.inject_pos,
                         reshape(patches, (len(batch.inject_pos), d)))

    if len(batch.act_batch):
        horizon = batch.action_slots.shape[1]
        rows_b = np.repeat(batch.act_batch, horizon)
        rows_p = batch.action_slots.reshape(-1)
        slots = gather_rows(x, rows_b, rows_p)
        offsets = embedding_lookup(params["act_offset"], np.tile(np.arange(horizon), len(batch.act_batch)))
        x = scatter_rows(x, rows_b, rows_p, add(slots, offsets))

    return add(x, getitem(params["pos_emb"], slice(0, length)))


def forward(batch: PackedBatch, params: ModelParams, config: ModelConfig,
            compute_actions: bool = True) -> ForwardOutput:
    """
    Прямой проход по пакету.

    Returns:
        lm_logits [B, L, V], final_features [B, L, d] и, если в пакете есть
        слоты действий, выход головы действий
    """
    x = embed_inputs(batch, params, config)
    mask = batch.attention_mask[:, None, :, :]
    query_active = batch.query_active[:, None, :]
    for i in range(config.n_layers):
        x = _block(x, params, i, config, mask, query_active)
    final = layer_norm(x, params["lnf_g"], params["lnf_b"])
    logits = add(matmul(final, params["head_w"]), params["head_b"])

    actions = None
    if compute_actions and len(batch.act_batch):
        actions = act_head(final, batch.action_slots, params, batch.act_batch)
    return ForwardOutput(logits, final, actions)


def act_head(final_features: Tensor, action_slots: np.ndarray, params: ModelParams,
             batch_index: Optional[np.ndarray] = None) -> ActionOutput:
    """
    Пулинг внимания с dt обучаемыми запросами по признакам слотов,
    затем MLP: a_pos = tanh(.) в [-1, 1], a_end - логит захвата.

    Args:
        final_features: [B, L, d]
        action_slots: [Ba, dt] позиции слотов
        batch_index: [Ba] номер последовательности для каждой строки
    """
    action_slots = np.asarray(action_slots, dtype=np.int64)
    n_rows, horizon = action_slots.shape
    if horizon != params["map_query"].shape[0]:
        raise ShapeError(f"Слотов действий {horizon}, голова ожидает {params['map_query'].shape[0]}")
    if batch_index is None:
        batch_index = np.arange(n_rows)
    d = final_features.shape[-1]

    features = reshape(
        gather_rows(final_features, np.repeat(batch_index, horizon), action_slots.reshape(-1)),
        (n_rows, horizon, d),
    )
    queries = matmul(params["map_query"], params["map_wq"])
    keys = matmul(features, params["map_wk"])
    values = matmul(features, params["map_wv"])
    scores = scale(matmul(queries, transpose(keys, (0, 2, 1))), 1.0 / math.sqrt(d))
    probs = masked_softmax(scores, np.ones((horizon, horizon), dtype=bool))
    pooled = matmul(matmul(probs, values), params["map_wo"])
    hidden = gelu(add(matmul(pooled, params["act_w1"]), params["act_b1"]))
    out = add(matmul(hidden, params["act_w2"]), params["act_b2"])
    return ActionOutput(
        a_pos=tanh(getitem(out, (slice(None), slice(None), slice(0, 2)))),
        a_end_logits=getitem(out, (slice(None), slice(None), slice(2, 3))),
    )


def predict_future_tokens(lm_logits: Tensor, packed: PackedSequence, vocab: Vocabulary,
                          row: int = 0) -> np.ndarray:
    """Argmax по диапазону кодов изображения в позициях блока v -> 64 кода."""
    if not len(packed.v_positions):
        raise LayoutError(f"Последовательность {packed.task} не содержит блока v")
    logits = lm_logits.data[row][packed.v_positions][:, vocab.image_range.start:vocab.image_range.stop]
    return logits.argmax(axis=-1).astype(np.uint8)


def generate_text(prefix: PackedSequence, params: ModelParams, config: ModelConfig,
                  packer: Packer, max_new: int = 24) -> List[int]:
    """
    Жадная генерация; выбор ограничен словами и EOS. EOS в результат
    не входит.
    """
    vocab = packer.vocab
    allowed = np.zeros(vocab.size, dtype=bool)
    allowed[vocab.text_range.start:vocab.text_range.stop] = True
    allowed[vocab.EOS] = True

    generated: List[int] = []
    packed = prefix
    with no_grad():
        for _ in range(max_new):
            out = forward(collate([packed]), params, config, compute_actions=False)
            logits = np.where(allowed, out.lm_logits.data[0, packed.length - 1], -np.inf)
            token = int(np.argmax(logits))
            if token == vocab.EOS:
                break
            generated.append(token)
            if packed.length >= packer.max_len:
                break
            packed = packer.append_text(packed, token)
    return generated


# ----------------------------------------------------------------------
# Контрольные точки
# ----------------------------------------------------------------------

_LENGTH = struct.Struct("<Q")


def save_checkpoint(path: str, params: ModelParams, meta: Optional[dict] = None,
                    optimizer: Optional[AdamState] = None) -> str:
    """
    Формат: magic, u64 длина заголовка, JSON-заголовок (версия, таблица
    тензоров имя -> форма/тип/смещение, метаданные), сырые данные.
    Запись атомарная.
    """
    arrays: Dict[str, np.ndarray] = {f"param/{n}": a for n, a in params.arrays().items()}
    if optimizer is not None:
        arrays.update({f"adam_m/{n}": a for n, a in optimizer.m.items()})
        arrays.update({f"adam_v/{n}": a for n, a in optimizer.v.items()})

    table, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name])
        raw = data.astype(data.dtype.newbyteorder("<")).tobytes()
        table[name] = {"shape": list(data.shape), "dtype": data.dtype.newbyteorder("<").str,
                       "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)

    header = {
        "version": CHECKPOINT_VERSION,
        "tensors": table,
        "meta": meta or {},
        "adam_step": optimizer.step if optimizer is not None else None,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = CHECKPOINT_MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)

    tmp_path = path + ".tmp"
    FileManager.write_bytes(tmp_path, payload)
    os.replace(tmp_path, path)
    logger.log_file_operation("Сохранение контрольной точки", path)
    return path


def load_checkpoint(path: str) -> Tuple[ModelParams, Optional[AdamState], dict]:
    """
    Raises:
        ArtifactError: файл отсутствует, повреждён или без версии
    """
    raw = FileManager.read_bytes(path)
    start = len(CHECKPOINT_MAGIC)
    if raw[:start] != CHECKPOINT_MAGIC or len(raw) < start + _LENGTH.size:
        raise ArtifactError(path, "Неверная сигнатура контрольной точки")
    (header_len,) = _LENGTH.unpack_from(raw, start)
    body = start + _LENGTH.size
    try:
        header = json.loads(raw[body:body + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(path, f"Повреждённый заголовок контрольной точки ({e})") from e
    if "version" not in header:
        raise ArtifactError(path, "В заголовке контрольной точки нет версии")
    if header["version"] != CHECKPOINT_VERSION:
        raise ArtifactError(path, f"Неподдерживаемая версия контрольной точки {header['version']}")

    payload = raw[body + header_len:]
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, entry in header["tensors"].items():
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise ArtifactError(path, f"Обрезанные данные тензора {name}")
        data = np.frombuffer(payload[entry["offset"]:end], dtype=np.dtype(entry["dtype"]))
        group, _, tensor_name = name.partition("/")
        groups[group][tensor_name] = data.reshape(entry["shape"]).copy()

    params = ModelParams.from_arrays(groups["param"])
    optimizer = None
    if header.get("adam_step") is not None:
        optimizer = AdamState(step=int(header["adam_step"]), m=groups["adam_m"], v=groups["adam_v"])
    logger.log_file_operation("Загрузка контрольной точки", path)
    return params, optimizer, header.get("meta", {})

"""
Кодеки: единый словарь, текстовый токенизатор, дискретный кодек
изображений (код палитры на заплатку) и непрерывное вложение заплаток.
"""

import json
from typing import Iterable, List, Mapping, Sequence

import numpy as np

from core.blockworld import CELL_PX, GRAMMAR_WORDS, GRID, IMAGE_SIZE, PALETTE, PALETTE_RGB, paint_codes
from core.errors import CodecDomainError, CodecShapeError, VocabularyError, VocabularyIndexError
from core.ndcore import Tensor, add, matmul
from utils.file_utils import FileManager

SPECIAL_TOKENS = (
    "<pad>", "<bos>", "<eos>",
    "<|mmu|>", "<|pre|>", "<|t2i|>",
    "<soi_u>", "<eoi_u>", "<soi_v>", "<eoi_v>",
    "<act>",
)

N_PATCHES = GRID * GRID
PATCH_DIM = CELL_PX * CELL_PX * 3

# DiscreteImageTokens: np.ndarray uint8 [64] кодов палитры в растровом порядке
DiscreteImageTokens = np.ndarray


class Vocabulary:
    """
    Единый словарь: служебные токены, затем слова грамматики, затем
    коды изображения. Каждый класс занимает непрерывный диапазон id.
    """

    def __init__(self, words: Sequence[str] = GRAMMAR_WORDS, n_image_codes: int = len(PALETTE)):
        if len(set(words)) != len(words):
            raise ValueError("Слова словаря должны быть уникальны")
        self.words = tuple(words)
        self.n_image_codes = int(n_image_codes)
        self.tokens: List[str] = list(SPECIAL_TOKENS) + list(self.words)
        self.tokens += [f"<img_{code}>" for code in range(self.n_image_codes)]
        self._index = {token: i for i, token in enumerate(self.tokens)}

        n_special = len(SPECIAL_TOKENS)
        self.special_range = range(0, n_special)
        self.text_range = range(n_special, n_special + len(self.words))
        self.image_range = range(self.text_range.stop, self.text_range.stop + self.n_image_codes)

        self.PAD, self.BOS, self.EOS = 0, 1, 2
        self.MMU, self.PRE, self.T2I = 3, 4, 5
        self.SOI_U, self.EOI_U, self.SOI_V, self.EOI_V = 6, 7, 8, 9
        self.ACT = 10

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return self.size

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(token) from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= int(token_id) < self.size:
            raise VocabularyIndexError(f"id {token_id} вне словаря размера {self.size}")
        return self.tokens[int(token_id)]

    def classify(self, token_id: int) -> str:
        token_id = int(token_id)
        if token_id in self.special_range:
            return "special"
        if token_id in self.text_range:
            return "text"
        if token_id in self.image_range:
            return "image"
        raise VocabularyIndexError(f"id {token_id} вне словаря размера {self.size}")

    def image_ids(self, codes) -> np.ndarray:
        """Коды палитры -> id словаря."""
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.n_image_codes):
            raise CodecDomainError(f"Код изображения вне [0, {self.n_image_codes})")
        return codes + self.image_range.start

    def codes_of(self, ids) -> np.ndarray:
        """id словаря -> коды палитры."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < self.image_range.start or ids.max() >= self.image_range.stop):
            raise VocabularyIndexError("id не принадлежит диапазону изображения")
        return (ids - self.image_range.start).astype(np.uint8)

    def to_dict(self) -> dict:
        return {
            "special": list(SPECIAL_TOKENS),
            "words": list(self.words),
            "n_image_codes": self.n_image_codes,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "Vocabulary":
        if tuple(payload["special"]) != SPECIAL_TOKENS:
            raise VocabularyError("<special>")
        return cls(tuple(payload["words"]), int(payload["n_image_codes"]))

    def save(self, path: str) -> str:
        return FileManager.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        return cls.from_dict(FileManager.read_json(path))

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def tokenize_text(text: str, vocab: Vocabulary) -> List[int]:
    """Разбиение по пробелам; каждое слово обязано быть в словаре."""
    ids = []
    for word in text.split():
        if word not in vocab.words:
            raise VocabularyError(word)
        ids.append(vocab.id_of(word))
    return ids


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for token_id in ids:
        if int(token_id) not in vocab.text_range:
            raise VocabularyIndexError(f"id {token_id} не является словом")
        words.append(vocab.tokens[int(token_id)])
    return " ".join(words)


_PALETTE_PACKED = (
    PALETTE_RGB[:, 0].astype(np.int64) << 16
    | PALETTE_RGB[:, 1].astype(np.int64) << 8
    | PALETTE_RGB[:, 2].astype(np.int64)
)


def _patches(image: np.ndarray) -> np.ndarray:
    """[32, 32, 3] -> [64, 16, 3], заплатки в растровом порядке."""
    return (
        image.reshape(GRID, CELL_PX, GRID, CELL_PX, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(N_PATCHES, CELL_PX * CELL_PX, 3)
    )


def encode_image(image: np.ndarray) -> DiscreteImageTokens:
    """
    Изображение -> 64 кода палитры.

    Raises:
        CodecShapeError: форма не (32, 32, 3)
        CodecDomainError: пиксель вне палитры или неоднородная заплатка
    """
    image = np.asarray(image)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise CodecShapeError(f"Ожидалось изображение {(IMAGE_SIZE, IMAGE_SIZE, 3)}, получено {image.shape}")
    patches = _patches(image.astype(np.int64))
    first = patches[:, 0, :]
    uniform = (patches == first[:, None, :]).all(axis=(1, 2))
    if not uniform.all():
        raise CodecDomainError(f"Заплатка {int(np.argmin(uniform))} неоднородна")
    packed = first[:, 0] << 16 | first[:, 1] << 8 | first[:, 2]
    match = packed[:, None] == _PALETTE_PACKED[None, :]
    known = match.any(axis=1)
    if not known.all():
        raise CodecDomainError(f"Цвет заплатки {int(np.argmin(known))} вне палитры")
    return match.argmax(axis=1).astype(np.uint8)


def decode_tokens(codes) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.shape != (N_PATCHES,):
        raise CodecShapeError(f"Ожидалось {N_PATCHES} кодов, получено {codes.shape}")
    if codes.min() < 0 or codes.max() >= len(PALETTE):
        raise CodecDomainError("Код вне палитры")
    return paint_codes(codes)


def patch_vectors(images: np.ndarray) -> np.ndarray:
    """[..., 32, 32, 3] uint8 -> [..., 64, 48] в [0, 1]."""
    images = np.asarray(images)
    if images.shape[-3:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise CodecShapeError(f"Ожидалось изображение {(IMAGE_SIZE, IMAGE_SIZE, 3)}, получено {images.shape}")
    lead = images.shape[:-3]
    flat = images.reshape((-1, GRID, CELL_PX, GRID, CELL_PX, 3)).transpose(0, 1, 3, 2, 4, 5)
    return flat.reshape(lead + (N_PATCHES, PATCH_DIM)) / 255.0


def patch_embed(images: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    """
    Непрерывное вложение заплаток: линейная проекция плюс позиционное
    вложение заплатки. Одиночное изображение даёт [64, d], пакет - [K, 64, d].
    """
    vectors = Tensor(patch_vectors(images))
    projected = add(matmul(vectors, params["patch_w"]), params["patch_b"])
    return add(projected, params["patch_pos"])

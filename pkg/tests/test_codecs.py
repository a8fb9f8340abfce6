import numpy as np
import pytest

from core.blockworld import GRAMMAR_WORDS, PALETTE, paint_codes, render, reset
from core.codecs import (
    N_PATCHES, SPECIAL_TOKENS, Vocabulary, decode_tokens, detokenize, encode_image, patch_embed,
    tokenize_text,
)
from core.errors import CodecDomainError, CodecShapeError, VocabularyError, VocabularyIndexError
from core.ndcore import Tensor


def test_vocabulary_ranges_are_contiguous_and_disjoint(vocab):
    assert vocab.size == len(SPECIAL_TOKENS) + len(GRAMMAR_WORDS) + len(PALETTE)
    assert vocab.special_range.stop == vocab.text_range.start
    assert vocab.text_range.stop == vocab.image_range.start
    assert vocab.image_range.stop == vocab.size
    assert vocab.classify(vocab.ACT) == "special"
    assert vocab.classify(vocab.id_of("red")) == "text"
    assert vocab.classify(vocab.image_range.start) == "image"
    assert vocab.token_of(vocab.id_of("zone")) == "zone"
    with pytest.raises(VocabularyIndexError):
        vocab.classify(vocab.size)
    with pytest.raises(IndexError):
        vocab.token_of(-1)


def test_tokenize_instruction(vocab):
    ids = tokenize_text("move red block to left zone", vocab)
    assert len(ids) == 6
    assert all(i in vocab.text_range for i in ids)
    assert detokenize(ids, vocab) == "move red block to left zone"


def test_unknown_word_is_rejected(vocab):
    with pytest.raises(VocabularyError) as exc:
        tokenize_text("move magenta block", vocab)
    assert exc.value.word == "magenta"
    with pytest.raises(KeyError):
        tokenize_text("hello", vocab)


def test_detokenize_rejects_image_ids(vocab):
    with pytest.raises(VocabularyIndexError):
        detokenize([vocab.image_range.start], vocab)


def test_image_ids_round_trip(vocab):
    codes = np.arange(N_PATCHES) % len(PALETTE)
    ids = vocab.image_ids(codes)
    assert all(i in vocab.image_range for i in ids)
    assert np.array_equal(vocab.codes_of(ids), codes)
    with pytest.raises(VocabularyIndexError):
        vocab.codes_of([vocab.BOS])


def test_vocabulary_save_and_load(vocab, tmp_path):
    path = vocab.save(str(tmp_path / "vocab.json"))
    assert Vocabulary.load(path).fingerprint() == vocab.fingerprint()


@pytest.mark.parametrize("split", ["train", "eval_seen", "eval_unseen_bg", "eval_unseen_color"])
def test_rendered_scenes_survive_codec(split):
    for seed in range(10):
        image = render(reset(seed, split))
        codes = encode_image(image)
        assert codes.shape == (N_PATCHES,) and codes.dtype == np.uint8
        assert np.array_equal(decode_tokens(codes), image)


def test_first_patch_code():
    codes = np.zeros(N_PATCHES, dtype=np.uint8)
    codes[0] = 3
    assert encode_image(paint_codes(codes))[0] == 3


def test_non_palette_colour_is_rejected():
    image = render(reset(0))
    image[0:4, 0:4] = (1, 2, 3)
    with pytest.raises(CodecDomainError):
        encode_image(image)


def test_non_uniform_patch_is_rejected():
    image = render(reset(0))
    image[0, 0] = PALETTE[10][1]
    image[1, 1] = PALETTE[11][1]
    with pytest.raises(CodecDomainError):
        encode_image(image)


def test_wrong_shape_is_rejected():
    with pytest.raises(CodecShapeError):
        encode_image(np.zeros((16, 16, 3), dtype=np.uint8))
    with pytest.raises(CodecShapeError):
        decode_tokens(np.zeros(10, dtype=np.uint8))


def test_patch_embed_is_local():
    rng = np.random.default_rng(0)
    params = {
        "patch_w": Tensor(rng.normal(size=(48, 8))),
        "patch_b": Tensor(rng.normal(size=8)),
        "patch_pos": Tensor(rng.normal(size=(N_PATCHES, 8))),
    }
    codes = np.zeros(N_PATCHES, dtype=np.uint8)
    a = paint_codes(codes)
    codes[9] = 12
    b = paint_codes(codes)
    ea, eb = patch_embed(a, params).data, patch_embed(b, params).data
    assert ea.shape == (N_PATCHES, 8)
    changed = np.where(~np.isclose(ea, eb).all(axis=1))[0]
    assert changed.tolist() == [9]
    assert patch_embed(np.stack([a, b]), params).shape == (2, N_PATCHES, 8)

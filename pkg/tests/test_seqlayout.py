import json

import numpy as np
import pytest

from core.blockworld import render, reset
from core.codecs import encode_image, tokenize_text
from core.errors import CodecShapeError, LayoutError
from core.selftest import random_segments
from core.seqlayout import (
    ACTION_QUERY, CONT_IMAGE, DISC_IMAGE, INJECT_ID, SEGMENT_TAGS, SPECIAL, TEXT, Packer, Segment,
    build_mask, build_mask_reference, chunk_actions, collate, dump_packed,
)


@pytest.fixture
def scene(vocab):
    state = reset(1, "train")
    image = render(state)
    return {
        "image": image,
        "codes": encode_image(image),
        "instruction": tokenize_text("move red block to left zone", vocab),
        "description": tokenize_text("red upleft , button off", vocab),
    }


def test_vectorized_mask_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(300):
        segments = random_segments(rng, 40)
        assert np.array_equal(build_mask(segments, 40), build_mask_reference(segments, 40))


def test_text_is_causal_and_image_block_is_bidirectional():
    mask = build_mask([Segment(TEXT, 3), Segment(DISC_IMAGE, 2), Segment(SPECIAL, 1)], 8)
    assert np.array_equal(mask[:3, :3], np.tril(np.ones((3, 3), dtype=bool)))
    assert mask[3, 4] and mask[4, 3]
    assert not mask[0, 3]
    assert mask[5, :6].all() and not mask[4, 5]
    assert not mask[6].any() and not mask[:, 7].any()


def test_layout_overflow():
    with pytest.raises(LayoutError):
        build_mask([Segment(TEXT, 5)], 4)
    with pytest.raises(LayoutError):
        Segment("video", 1)


def test_mmu_layout_and_loss_mask(packer, vocab, scene):
    question = tokenize_text("what color is the block in the left zone ?", vocab)
    answer = tokenize_text("green", vocab)
    packed = packer.pack_mmu(scene["image"], question, answer)
    assert packed.length == 3 + 64 + 1 + len(question) + 1 + 1
    assert packed.token_ids[:3].tolist() == [vocab.BOS, vocab.MMU, vocab.SOI_U]
    assert (packed.token_ids[3:67] == INJECT_ID).all()
    assert packed.inject_positions.tolist() == list(range(3, 67))
    assert (packed.segment_tags[3:67] == SEGMENT_TAGS[CONT_IMAGE]).all()
    assert (packed.segment_tags[packed.length:] == 0).all()

    predicting = np.where(packed.lm_loss_mask)[0]
    assert len(predicting) == 2
    assert packed.lm_targets[predicting].tolist() == [answer[0], vocab.EOS]
    assert not packed.pre_loss_mask.any()


def test_mmu_question_supervision(vocab, scene):
    question = tokenize_text("what is the gripper holding ?", vocab)
    answer = tokenize_text("nothing", vocab)
    packed = Packer(vocab, supervise_question=True).pack_mmu(scene["image"], question, answer)
    assert int(packed.lm_loss_mask.sum()) == len(question) + len(answer) + 1


def test_pad_rows_and_columns_are_masked(packer, vocab, scene):
    packed = packer.pack_mmu(scene["image"], tokenize_text("describe this image", vocab), scene["description"])
    length = packed.length
    assert not packed.attention_mask[length:].any()
    assert not packed.attention_mask[:, length:].any()
    assert packed.attention_mask[3:67, 3:67].all()


def test_pre_layout(packer, vocab, scene):
    future = scene["codes"].copy()
    future[5] = 10
    packed = packer.pack_pre(scene["instruction"], scene["codes"], future)
    assert packed.token_ids[:2].tolist() == [vocab.BOS, vocab.PRE]
    v = packed.v_positions
    assert len(v) == 64
    assert np.array_equal(packed.token_ids[v], vocab.image_ids(scene["codes"]))
    assert np.array_equal(packed.pre_targets[v], vocab.image_ids(future))
    assert int(packed.pre_loss_mask.sum()) == 64
    assert not packed.lm_loss_mask.any()
    instruction_positions = np.arange(2, 2 + len(scene["instruction"]))
    assert not packed.attention_mask[np.ix_(instruction_positions, v)].any()
    assert packed.attention_mask[np.ix_(v, v)].all()


def test_act_layout_with_scene_conditioning(packer, vocab, scene):
    chunk = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 1], [0, 0, 1]], dtype=np.float32)
    packed = packer.pack_act(scene["image"], scene["description"], scene["instruction"],
                             scene["codes"], scene["codes"], chunk)
    n_text = len(scene["description"]) + len(scene["instruction"])
    assert packed.length == 3 + 64 + 1 + n_text + 2 + 64 + 1 + 4
    slots = packed.action_slots
    assert slots.tolist() == list(range(packed.length - 4, packed.length))
    assert (packed.token_ids[slots] == vocab.ACT).all()
    assert (packed.segment_tags[slots] == SEGMENT_TAGS[ACTION_QUERY]).all()
    assert packed.attention_mask[np.ix_(slots, np.arange(packed.length))].all()
    assert not packed.attention_mask[np.ix_(packed.v_positions, slots)].any()
    assert np.array_equal(packed.action_targets, chunk[:, :2])
    assert packed.grip_targets.tolist() == [0, 0, 1, 1]
    assert packed.token_ids[packed.v_positions[0] - 2] == vocab.PRE


def test_act_layout_without_scene_conditioning(vocab, scene):
    packed = Packer(vocab, mmu_condition=False).pack_act(
        scene["image"], scene["description"], scene["instruction"], scene["codes"])
    assert packed.token_ids[:2].tolist() == [vocab.BOS, vocab.PRE]
    assert len(packed.inject_positions) == 0
    assert packed.image is None
    assert packed.length == 2 + len(scene["instruction"]) + 1 + 64 + 1 + 4


def test_act_overflow_and_bad_codes(vocab, scene):
    with pytest.raises(LayoutError):
        Packer(vocab, max_len=100).pack_act(scene["image"], scene["description"], scene["instruction"], scene["codes"])
    with pytest.raises(CodecShapeError):
        Packer(vocab).pack_pre(scene["instruction"], scene["codes"][:10])


def test_chunk_actions_pads_with_last_grip():
    actions = np.array([[1, 0, 0], [0, 1, 1]], dtype=np.float32)
    chunk = chunk_actions(actions, 1, 4)
    assert chunk.tolist() == [[0, 1, 1], [0, 0, 1], [0, 0, 1], [0, 0, 1]]


def test_append_text_extends_prompt(packer, vocab, scene):
    prompt = packer.pack_mmu(scene["image"], tokenize_text("describe this image", vocab), prompt_only=True)
    extended = packer.append_text(prompt, vocab.id_of("red"))
    assert extended.length == prompt.length + 1
    assert extended.token_ids[prompt.length] == vocab.id_of("red")
    assert extended.attention_mask[prompt.length, :prompt.length + 1].all()
    with pytest.raises(LayoutError):
        packer.append_text(packer.pack_pre(scene["instruction"], scene["codes"]), vocab.id_of("red"))


def test_collate_mixed_batch(packer, vocab, scene):
    samples = [
        packer.pack_mmu(scene["image"], tokenize_text("describe this image", vocab), scene["description"]),
        packer.pack_pre(scene["instruction"], scene["codes"], scene["codes"]),
        packer.pack_act(scene["image"], scene["description"], scene["instruction"], scene["codes"],
                        scene["codes"], chunk_actions(np.zeros((1, 3)), 0, 4)),
    ]
    batch = collate(samples)
    assert batch.token_ids.shape == (3, 192)
    assert batch.tasks == ["mmu", "pre", "act"]
    assert batch.images.shape == (2, 32, 32, 3)
    assert batch.inject_batch.tolist() == [0] * 64 + [2] * 64
    assert batch.act_batch.tolist() == [2]
    assert batch.action_slots.shape == (1, 4)
    assert batch.act_has_targets.tolist() == [True]
    assert not batch.query_active[1, samples[1].length:].any()


def test_collate_rejects_mixed_lengths(vocab, scene):
    a = Packer(vocab, max_len=192).pack_pre(scene["instruction"], scene["codes"])
    b = Packer(vocab, max_len=160).pack_pre(scene["instruction"], scene["codes"])
    with pytest.raises(LayoutError):
        collate([a, b])
    with pytest.raises(LayoutError):
        collate([])


def test_dump_packed(packer, vocab, scene, tmp_path):
    packed = packer.pack_pre(scene["instruction"], scene["codes"], scene["codes"])
    path = dump_packed(packed, str(tmp_path / "pre.json"))
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    assert payload["task"] == "pre"
    assert len(payload["attention_mask"]) == 192
    assert payload["attention_mask"][0].startswith("10")
    assert payload["segment_tags"][-1] == "pad"

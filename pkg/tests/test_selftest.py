import pytest

from core.selftest import GRAD_TOLERANCE, check_codec, check_gradients, check_masks


def test_gradient_checks_use_64bit_tolerance():
    assert GRAD_TOLERANCE == 1e-6
    results = check_gradients(seed=0)
    assert [r.name for r in results] == [
        "grad:matmul", "grad:gelu", "grad:masked_softmax", "grad:layer_norm", "grad:cross_entropy", "grad:model",
    ]
    for result in results:
        assert result.passed, f"{result.name}: {result.detail}"


def test_codec_check_round_trips_thousand_frames():
    result = check_codec()
    assert result.passed
    assert result.detail == "1000 сцен"


@pytest.mark.parametrize("seed", [0, 1])
def test_mask_check_agrees_with_reference(seed):
    result = check_masks(n=200, seed=seed)
    assert result.passed, result.detail

import numpy as np
import pytest

from transferlab.compression import FixedPointFormat, quantise_model
from transferlab.model import (
    Architecture,
    Checkpoint,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    Layer,
    dumps,
    forward,
    init_checkpoint,
    lenet5,
    load,
    loads,
    parse_architecture,
    predict,
    save,
    weight_values,
)


@pytest.fixture(scope="module")
def ckpt():
    return init_checkpoint(lenet5(), seed=1)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(size=(7, 1, 28, 28)).astype(np.float32)


def test_lenet5_parameter_count():
    by_hand = (20 * 25 + 20) + (50 * 20 * 25 + 50) + (800 * 500 + 500) + (500 * 10 + 10)
    assert by_hand == 431_080
    assert lenet5().n_params() == 431_080


def test_lenet5_layer_shapes():
    assert lenet5().shapes() == [
        (1, 28, 28), (20, 24, 24), (20, 12, 12), (50, 8, 8), (50, 4, 4), (50, 4, 4), (800,), (500,), (500,), (10,)
    ]


def test_padded_lenet5_is_larger():
    assert lenet5(32).shapes()[6] == (1250,)


def test_output_shape_on_batch_of_seven(ckpt, images):
    assert forward(ckpt, images).shape == (7, 10)


def test_zero_params_give_zero_logits():
    zero = init_checkpoint(lenet5(), seed=0)
    zero = zero.replace(params={k: np.zeros_like(v) for k, v in zero.params.items()})
    assert (forward(zero, np.zeros((2, 1, 28, 28), np.float32)) == 0).all()


def test_composition_must_type_check():
    with pytest.raises(ValueError, match="flat input"):
        Architecture((Layer("conv", 4, 3), Layer("dense", 10)), (1, 8, 8))
    with pytest.raises(ValueError, match="even"):
        Architecture((Layer("conv", 4, 2), Layer("maxpool2")), (1, 8, 8))


def test_architecture_text_round_trip():
    arch = lenet5()
    assert parse_architecture(arch.to_text()) == arch


def test_architecture_file_with_comments():
    text = "# small net\nname tiny\ninput 3 8 8\nconv 4 3   # 6x6\nmaxpool2\nrelu\nflatten\ndense 5\n"
    arch = parse_architecture(text)
    assert arch.name == "tiny" and arch.output_shape == (5,)
    assert arch.n_params() == 4 * 3 * 9 + 4 + 36 * 5 + 5


@pytest.mark.parametrize("bad", ["input 1 8 8\nbogus 3\n", "conv 4 3\n", "input 1 8 8\n", "input 1 8 8\nconv x 3\n"])
def test_bad_architecture_files(bad):
    with pytest.raises(ValueError):
        parse_architecture(bad)


def test_shape_mismatch_in_forward(ckpt):
    from transferlab.autodiff import ShapeError

    with pytest.raises(ShapeError):
        forward(ckpt, np.zeros((2, 1, 32, 32), np.float32))


def test_all_ones_mask_is_identity(ckpt, images):
    masked = ckpt.replace(masks={n: np.ones_like(ckpt.params[n]) for n in ckpt.architecture.weight_names()})
    assert forward(masked, images).tobytes() == forward(ckpt, images).tobytes()


def test_zero_mask_on_final_dense_gives_bias(ckpt, images):
    last = ckpt.architecture.weight_names()[-1]
    bias = last.replace("weight", "bias")
    params = {k: v.copy() for k, v in ckpt.params.items()}
    params[bias] = np.arange(10, dtype=np.float32)
    c = ckpt.replace(params=params, masks={last: np.zeros_like(ckpt.params[last])})
    np.testing.assert_array_equal(forward(c, images), np.tile(np.arange(10, dtype=np.float32), (7, 1)))


def test_masked_forward_equals_premultiplied_weights(ckpt, images):
    rng = np.random.default_rng(3)
    masks = {n: (rng.uniform(size=ckpt.params[n].shape) < 0.4).astype(np.float32) for n in ckpt.architecture.weight_names()}
    masked = ckpt.replace(masks=masks)
    pre = ckpt.replace(params={k: v * masks[k] if k in masks else v for k, v in ckpt.params.items()})
    assert forward(masked, images).tobytes() == forward(pre, images).tobytes()


def test_mask_validation(ckpt):
    name = ckpt.architecture.weight_names()[0]
    with pytest.raises(ValueError, match="0/1"):
        ckpt.replace(masks={name: np.full(ckpt.params[name].shape, 0.5)})
    with pytest.raises(ValueError, match="shape"):
        ckpt.replace(masks={name: np.ones((2, 2))})
    with pytest.raises(ValueError, match="unknown"):
        ckpt.replace(masks={"1.bias": np.ones(20)})


def test_seeded_init_is_reproducible():
    a, b = init_checkpoint(lenet5(), seed=5), init_checkpoint(lenet5(), seed=5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = init_checkpoint(lenet5(), seed=6)
    assert not np.array_equal(a.params["0.weight"], c.params["0.weight"])
    assert a.metadata["seed"] == "5" and a.metadata["init_constant"] == "6"


def test_init_bounds_and_zero_biases(ckpt):
    w = ckpt.params["6.weight"]
    assert np.abs(w).max() <= np.sqrt(6 / (800 + 500))
    assert not ckpt.params["6.bias"].any()


def _equal(a: Checkpoint, b: Checkpoint) -> bool:
    return (
        a.architecture == b.architecture
        and a.metadata == b.metadata
        and a.activation_format == b.activation_format
        and a.weight_formats == b.weight_formats
        and set(a.params) == set(b.params)
        and all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        and set(a.masks) == set(b.masks)
        and all(a.masks[k].tobytes() == b.masks[k].tobytes() for k in a.masks)
    )


def test_round_trip_plain(tmp_path, ckpt):
    path = save(ckpt, tmp_path / "c.ckpt")
    assert path.read_bytes()[:4] == b"CALB"
    assert _equal(load(path), ckpt)


def test_round_trip_masks_formats_and_metadata(tmp_path, ckpt):
    rng = np.random.default_rng(9)
    masks = {n: (rng.uniform(size=ckpt.params[n].shape) < 0.3).astype(np.float32) for n in ckpt.architecture.weight_names()}
    fmt = FixedPointFormat.for_bitwidth(8)
    q = quantise_model(ckpt.replace(masks=masks, metadata={"note": "ünïcode", "epochs": "3"}), fmt, fmt)
    back = loads(dumps(q))
    assert _equal(back, q)
    assert dumps(back) == dumps(q)


def test_wrong_magic():
    data = bytearray(dumps(init_checkpoint(lenet5())))
    data[:4] = b"XXXX"
    with pytest.raises(CheckpointMagicError):
        loads(bytes(data))


def test_version_mismatch():
    data = bytearray(dumps(init_checkpoint(lenet5())))
    data[4] = 99
    with pytest.raises(CheckpointVersionError):
        loads(bytes(data))


def test_flipped_payload_byte_fails_checksum():
    data = bytearray(dumps(init_checkpoint(lenet5())))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CheckpointChecksumError):
        loads(bytes(data))


@pytest.mark.parametrize("keep", [2, 10, 1000])
def test_truncation(keep):
    data = dumps(init_checkpoint(lenet5()))
    with pytest.raises((CheckpointTruncatedError, CheckpointMagicError)):
        loads(data[:keep])


def test_errors_are_distinct():
    kinds = {CheckpointMagicError, CheckpointVersionError, CheckpointChecksumError, CheckpointTruncatedError}
    assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)


def test_off_grid_quantised_file_is_rejected(ckpt):
    fmt = FixedPointFormat.for_bitwidth(4)
    bad = ckpt.replace(weight_formats={n: fmt for n in ckpt.params})  # master weights not re-quantised
    with pytest.raises(CheckpointError, match="grid"):
        loads(dumps(bad))


def test_weight_values_excludes_biases(ckpt):
    assert weight_values(ckpt).size == sum(ckpt.params[n].size for n in ckpt.architecture.weight_names())


def test_predict_is_argmax(ckpt, images):
    np.testing.assert_array_equal(predict(ckpt, images), forward(ckpt, images).argmax(axis=1))


def test_record_activations_excludes_logits(ckpt, images):
    logits, acts = forward(ckpt, images, record_activations=True)
    assert [a.shape[1:] for a in acts] == [(20, 24, 24), (20, 12, 12), (50, 8, 8), (50, 4, 4), (50, 4, 4), (500,), (500,)]


def test_activation_quantisation_applies_to_hidden_layers(ckpt, images):
    fmt = FixedPointFormat.for_bitwidth(4)
    q = ckpt.replace(activation_format=fmt)
    _, acts = forward(q, images, record_activations=True)
    for a in acts:
        assert a.max() <= fmt.max_value and a.min() >= fmt.min_value
        np.testing.assert_array_equal(a * 8, np.round(a * 8))


def test_batched_forward_matches_single_pass(ckpt, images):
    # BLAS blocking depends on the batch size, so agreement is to float32 rounding only
    np.testing.assert_allclose(forward(ckpt, images, batch_size=3), forward(ckpt, images, batch_size=500), rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(forward(ckpt, images, batch_size=3), forward(ckpt, images, batch_size=3))

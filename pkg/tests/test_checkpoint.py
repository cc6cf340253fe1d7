import numpy as np
import pytest

from deformer.checkpoint import (decode_checkpoint, encode_checkpoint, load_checkpoint,
                                 read_fingerprint, save_checkpoint)
from deformer.decomposed import DeformerModel, transfer_weights
from deformer.encoder import EncoderWeights
from deformer.errors import FormatError, StaleArtifactError


def test_full_round_trip(weights, tmp_path):
    fp = save_checkpoint(weights, tmp_path / "w.dfwt")
    loaded = load_checkpoint(tmp_path / "w.dfwt")
    assert isinstance(loaded, EncoderWeights) and loaded.config == weights.config
    assert fp == loaded.fingerprint == read_fingerprint(tmp_path / "w.dfwt")
    for name, t in weights.params.items():
        np.testing.assert_array_equal(loaded.params[name].data,
                                      t.data.astype(np.float32).astype(np.float64))
    assert encode_checkpoint(loaded) == (tmp_path / "w.dfwt").read_bytes()


def test_decomposed_keeps_k(weights, tmp_path):
    save_checkpoint(transfer_weights(weights, 1), tmp_path / "s.dfwt")
    loaded = load_checkpoint(tmp_path / "s.dfwt")
    assert isinstance(loaded, DeformerModel) and loaded.k == 1


def test_bad_magic_and_version(weights):
    raw = bytearray(encode_checkpoint(weights))
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + bytes(raw[4:]))
    raw[4] = 7
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(raw))


def test_truncated_and_trailing(weights):
    raw = encode_checkpoint(weights)
    with pytest.raises(FormatError):
        decode_checkpoint(raw[:-4])
    with pytest.raises(FormatError):
        decode_checkpoint(raw + b"\0\0\0\0")
    with pytest.raises(FormatError):
        decode_checkpoint(raw[:20])


def test_tampered_values(weights):
    raw = bytearray(encode_checkpoint(weights))
    raw[-1] ^= 0x01
    with pytest.raises(StaleArtifactError):
        decode_checkpoint(bytes(raw))


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"hello")
    with pytest.raises(FormatError):
        read_fingerprint(tmp_path / "x")

import struct

import numpy as np
import pytest

from attrsae.domain import SaeModel, SparseCode, TrainConfig
from attrsae.formats import (
    BadMagic,
    ConfigParseError,
    FormatError,
    TruncatedPayload,
    UnsupportedVersion,
    checkpoint_to_bytes,
    config_from_text,
    config_to_text,
    import_npy,
    load_checkpoint,
    read_codes,
    read_dictionary,
    read_embeddings,
    save_checkpoint,
    write_codes,
    write_dictionary,
    write_embeddings,
)
from attrsae.synth import gen_dictionary


def f32_model(rng, d=5, m=7):
    p = lambda *s: rng.normal(size=s).astype(np.float32)  # noqa: E731
    return SaeModel(p(m, d), p(m), p(d, m), p(d))


# embeddings


def test_embeddings_roundtrip_bit_exact(tmp_path, rng):
    X = rng.normal(size=(3, 4)).astype(np.float32)
    write_embeddings(tmp_path / "x.atse", X)
    Y = read_embeddings(tmp_path / "x.atse")
    assert Y.dtype == np.float32
    assert Y.tobytes() == X.tobytes()
    assert (tmp_path / "x.atse").stat().st_size == 21 + 3 * 4 * 4


def test_embeddings_bad_magic(tmp_path):
    path = tmp_path / "x.atse"
    write_embeddings(path, np.zeros((2, 2), np.float32))
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(BadMagic):
        read_embeddings(path)


def test_embeddings_truncated(tmp_path):
    path = tmp_path / "x.atse"
    write_embeddings(path, np.ones((10, 3), np.float32))
    path.write_bytes(path.read_bytes()[: -3 * 4])  # nine rows left
    with pytest.raises(TruncatedPayload):
        read_embeddings(path)


def test_embeddings_unsupported_version(tmp_path):
    path = tmp_path / "x.atse"
    write_embeddings(path, np.ones((1, 2), np.float32))
    buf = bytearray(path.read_bytes())
    buf[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(buf))
    with pytest.raises(UnsupportedVersion):
        read_embeddings(path)


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "nope.atse")


def test_import_npy(tmp_path, rng):
    X = rng.normal(size=(6, 3))
    np.save(tmp_path / "x.npy", X)
    import_npy(tmp_path / "x.npy", tmp_path / "x.atse")
    np.testing.assert_array_equal(read_embeddings(tmp_path / "x.atse"), X.astype(np.float32))


def test_write_leaves_no_temp_files(tmp_path):
    write_embeddings(tmp_path / "x.atse", np.zeros((1, 1)))
    assert [p.name for p in tmp_path.iterdir()] == ["x.atse"]


# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    model = f32_model(rng)
    cfg = TrainConfig(k=3, k_aux=5, alpha=0.25, learning_rate=1e-3, batch_size=16,
                      total_steps=7, dead_window=11, seed=9, normalize_decoder=True,
                      masked_aux=False, m=7)
    save_checkpoint(tmp_path / "m.atsm", model, cfg)
    loaded, cfg2 = load_checkpoint(tmp_path / "m.atsm")
    assert loaded == model
    assert cfg2 == cfg
    assert checkpoint_to_bytes(loaded, cfg2) == (tmp_path / "m.atsm").read_bytes()


def test_default_config_echo():
    cfg = config_from_text(config_to_text(TrainConfig()))
    assert (cfg.k, cfg.k_aux, cfg.alpha) == (128, 256, 0.1)
    assert cfg == TrainConfig()


def test_config_floats_roundtrip_exactly():
    cfg = TrainConfig(alpha=0.1 + 0.2, learning_rate=1 / 3)
    assert config_from_text(config_to_text(cfg)) == cfg


@pytest.mark.parametrize("text", ["k=abc\n", "nonsense\n", "colour=blue\n", "masked_aux=yes\n", "k=0\n"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigParseError):
        config_from_text(text)


def test_checkpoint_truncated(tmp_path, rng):
    path = tmp_path / "m.atsm"
    save_checkpoint(path, f32_model(rng), TrainConfig(k=2, k_aux=2))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(TruncatedPayload):
        load_checkpoint(path)


# codes and dictionaries


def test_codes_roundtrip(tmp_path):
    codes = [SparseCode([1, 4], [0.5, 2.25], 6), SparseCode.empty(6), SparseCode([0], [3.0], 6)]
    write_codes(tmp_path / "c.atsc", codes, 6)
    back, m = read_codes(tmp_path / "c.atsc")
    assert m == 6
    assert back == codes


def test_codes_trailing_bytes(tmp_path):
    path = tmp_path / "c.atsc"
    write_codes(path, [SparseCode.empty(3)], 3)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        read_codes(path)


def test_dictionary_roundtrip(tmp_path):
    D = gen_dictionary(12, 5, skew=1.2, seed=4)
    write_dictionary(tmp_path / "d.atsd", D)
    assert read_dictionary(tmp_path / "d.atsd") == D

import numpy as np
import pytest

from avglm import checkpoint
from avglm.checkpoint import MAGIC, CheckpointMeta
from avglm.errors import CheckpointFormatError
from avglm.model import AveragingLM, ModelConfig


def model_and_meta():
    model = AveragingLM.initialize(ModelConfig(9, 4, 2, 0.25, 6), 3)
    meta = CheckpointMeta(seed=3, epoch=7, valid_ppl=12.5, vocab_hash="f00d", extra={"note": "x"})
    return model, meta


def test_round_trip_is_byte_exact(tmp_path):
    model, meta = model_and_meta()
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model, meta)
    loaded, loaded_meta = checkpoint.load(path)
    assert loaded.config == model.config
    assert loaded_meta == meta
    for (na, a), (nb, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb and a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()
    assert checkpoint.to_bytes(loaded, loaded_meta) == path.read_bytes()


def test_float64_round_trip():
    model, meta = model_and_meta()
    wide = model.astype(np.float64)
    loaded, _ = checkpoint.from_bytes(checkpoint.to_bytes(wide, meta))
    assert loaded.dtype == np.float64


def test_header_is_readable_text():
    model, meta = model_and_meta()
    data = checkpoint.to_bytes(model, meta)
    header, offset = checkpoint.read_header(data)
    assert data.startswith(MAGIC)
    assert header["epoch"] == 7 and header["config"]["dim"] == 4
    names = [t["name"] for t in header["tensors"]]
    assert names[0] == "embedding" and names[-1] == "softmax.bias"
    assert offset == data.index(b"\n", len(MAGIC)) + 1


def test_untrained_meta_defaults():
    model, _ = model_and_meta()
    _, meta = checkpoint.from_bytes(checkpoint.to_bytes(model, CheckpointMeta()))
    assert meta.epoch == 0 and meta.valid_ppl is None


@pytest.mark.parametrize(
    "mutate,offset",
    [
        (lambda d: b"XX" + bytes(d[2:]), 0),
        (lambda d: bytes(d[:-3]), None),
        (lambda d: bytes(d) + b"\x00", None),
    ],
)
def test_corrupt_files_report_offset(mutate, offset):
    model, meta = model_and_meta()
    data = checkpoint.to_bytes(model, meta)
    with pytest.raises(CheckpointFormatError) as info:
        checkpoint.from_bytes(mutate(data))
    assert info.value.offset is not None
    assert "offset" in str(info.value)
    if offset is not None:
        assert info.value.offset == offset


def test_bad_json_header():
    with pytest.raises(CheckpointFormatError) as info:
        checkpoint.from_bytes(MAGIC + b"{not json\n")
    assert info.value.offset == len(MAGIC)


def test_unterminated_header():
    with pytest.raises(CheckpointFormatError):
        checkpoint.from_bytes(MAGIC + b'{"format_version": 1')


def test_wrong_version():
    model, meta = model_and_meta()
    data = checkpoint.to_bytes(model, meta).replace(b'"format_version":1', b'"format_version":9')
    with pytest.raises(CheckpointFormatError, match="version"):
        checkpoint.from_bytes(data)


def test_shape_mismatch_with_config():
    model, meta = model_and_meta()
    data = checkpoint.to_bytes(model, meta).replace(b'"dim":4', b'"dim":5')
    with pytest.raises(CheckpointFormatError, match="shape"):
        checkpoint.from_bytes(data)

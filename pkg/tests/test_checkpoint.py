import numpy as np
import pytest

from orseq.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from orseq.data import Vocabulary


def _ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        config={"hidden": 4, "oracle": "word-noise"},
        arrays={"a": rng.normal(size=(2, 3)), "b": np.array([1e-300, -0.0, 1 / 3]), "c": np.array(2.5)},
        state={"epoch": 3},
        src_vocab=Vocabulary(["x", "y"]),
        tgt_vocab=Vocabulary(["ü", "z"]),
    )


def test_roundtrip_is_bit_exact(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "m.ckpt", ck)
    got = load_checkpoint(tmp_path / "m.ckpt")
    assert got.config == ck.config and got.state == ck.state
    assert got.src_vocab == ck.src_vocab and got.tgt_vocab == ck.tgt_vocab
    for k, v in ck.arrays.items():
        assert got.arrays[k].shape == v.shape
        assert got.arrays[k].tobytes() == v.tobytes()


def test_same_content_same_bytes(tmp_path):
    save_checkpoint(tmp_path / "a", _ckpt())
    save_checkpoint(tmp_path / "b", _ckpt())
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda t: "garbage\n" + t,
        lambda t: t.replace("\nend\n", "\n"),
        lambda t: t.replace("array a 2x3", "array a 2x4"),
        lambda t: t.replace("state ", "bogus "),
    ],
)
def test_corrupt_files_rejected(tmp_path, mutate):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, _ckpt())
    p.write_text(mutate(p.read_text(encoding="utf-8")), encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")

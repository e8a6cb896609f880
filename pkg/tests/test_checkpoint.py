import struct

import numpy as np
import pytest

from supernas.checkpoint import CheckpointError, decode_state, encode_state, load_checkpoint, save_checkpoint
from supernas.data import synth_dataset
from supernas.space import enhance_candidates
from supernas.supernet import init_supernet, progressive_split
from supernas.training import SupernetTrainer, TrainConfig, TrainerState

CFG = TrainConfig(iterations=4, samples_per_step=2, batch_size=8, warmup_iterations=3, augment=True)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(0, 10, 5, (3, 8, 8))


def same_params(a, b):
    for (n1, t1, _), (n2, t2, _) in zip(a.named_tensors(), b.named_tensors()):
        assert n1 == n2 and np.array_equal(t1.data, t2.data), n1
    for (n1, x), (n2, y) in zip(a.named_buffers(), b.named_buffers()):
        assert n1 == n2 and np.array_equal(x, y), n1


@pytest.mark.parametrize("cut", [1, 3, 5])
def test_resume_equals_uninterrupted(tmp_path, toy_space, data, cut):
    """Interrupt after ``cut`` updates (mid warm-up, at the boundary, mid main phase)."""
    space = enhance_candidates(toy_space)
    full = SupernetTrainer.fresh(init_supernet(space, 0), data.train, CFG)
    full.run()

    part = SupernetTrainer.fresh(init_supernet(space, 0), data.train, CFG)
    part.run(max_steps=cut)
    save_checkpoint(part.snapshot(), tmp_path / "mid.ckpt")
    resumed = SupernetTrainer(load_checkpoint(tmp_path / "mid.ckpt"), data.train)
    resumed.run()

    same_params(full.state.params, resumed.state.params)
    assert encode_state(full.snapshot()) == encode_state(resumed.snapshot())


def test_round_trip_is_byte_identical(tmp_path, toy_space, data):
    params = progressive_split(init_supernet(enhance_candidates(toy_space), 1))
    trainer = SupernetTrainer.fresh(params, data.train, CFG)
    trainer.run(max_steps=2)
    state = trainer.snapshot()
    state.history = [{"stage": 1, "lr_init": 0.01}]
    blob = encode_state(state)
    back = decode_state(blob)
    assert encode_state(back) == blob
    same_params(state.params, back.params)
    assert back.params.stage == 2 and back.history == state.history
    assert [[g.member_options for g in gs] for gs in back.params.layers] == \
        [[g.member_options for g in gs] for gs in params.layers]
    save_checkpoint(state, tmp_path / "a.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == blob
    assert not (tmp_path / "a.ckpt.tmp").exists()


@pytest.fixture
def blob(toy_space):
    return encode_state(TrainerState(init_supernet(toy_space, 0), TrainConfig()))


def test_flipped_byte_is_refused(blob):
    for pos in (30, len(blob) // 2, len(blob) - 40):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(CheckpointError, match="checksum"):
            decode_state(bytes(bad))


def test_truncation_and_bad_magic_are_refused(blob):
    with pytest.raises(CheckpointError):
        decode_state(blob[:-1])
    with pytest.raises(CheckpointError, match="magic"):
        decode_state(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        decode_state(b"")


def test_unknown_version_is_refused(blob):
    import hashlib

    body = bytearray(blob[:-32])
    struct.pack_into("<I", body, 8, 99)
    with pytest.raises(CheckpointError, match="version 99"):
        decode_state(bytes(body) + hashlib.sha256(bytes(body)).digest())


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")

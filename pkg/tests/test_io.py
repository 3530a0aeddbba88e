import numpy as np
import pytest
import torch

from ns3d.checkpoint import (
    TokenDataset,
    load_checkpoint,
    load_tokens,
    restore_model,
    restore_rng,
    save_checkpoint,
    save_tokens,
)
from ns3d.errors import CheckpointError
from ns3d.tokenizer import CrossScaleTokenizer, TokenizerConfig

TINY = TokenizerConfig(
    latent_len=8,
    dim=8,
    num_heads=2,
    scale_lengths=(1, 4),
    vocab_size=16,
    num_freqs=2,
    encoder_self_layers=1,
    decoder_self_layers=1,
)


def tiny_tokens(n=3):
    rng = np.random.default_rng(0)
    return TokenDataset(
        vocab_size=16,
        scale_lengths=(1, 4),
        shape_ids=[f"s{i}" for i in range(n)],
        class_ids=rng.integers(0, 6, n),
        cond_params=rng.uniform(-1, 1, (n, 8)),
        indices=[
            rng.integers(0, 16, (n, 1)).astype(np.int32),
            rng.integers(0, 16, (n, 4)).astype(np.int32),
        ],
    )


class TestCheckpoint:
    def test_roundtrip_bit_identical_forward(self, tmp_path):
        model = CrossScaleTokenizer(TINY)
        path = str(tmp_path / "m.ns3d")
        save_checkpoint(path, model, {"kind": "tokenizer"})
        feats, p = torch.randn(1, 16, 6), torch.randn(1, 5, 3)
        with torch.no_grad():
            before = model(feats, p)[0]
        fresh = CrossScaleTokenizer(TINY)
        header, arrays = load_checkpoint(path)
        restore_model(fresh, arrays)
        with torch.no_grad():
            after = fresh(feats, p)[0]
        assert torch.equal(before, after)
        assert header["config"]["kind"] == "tokenizer"

    def test_rng_state_roundtrip(self, tmp_path):
        model = CrossScaleTokenizer(TINY)
        path = str(tmp_path / "m.ns3d")
        torch.manual_seed(123)
        save_checkpoint(path, model, {})
        expected = torch.randn(4)
        header, _ = load_checkpoint(path)
        torch.manual_seed(999)
        restore_rng(header)
        assert torch.equal(torch.randn(4), expected)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "nope.ns3d"))

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ns3d"
        path.write_bytes(b"NSTK" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_truncated_payload_rejected(self, tmp_path):
        model = CrossScaleTokenizer(TINY)
        path = tmp_path / "m.ns3d"
        save_checkpoint(str(path), model, {})
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_key_mismatch_rejected(self, tmp_path):
        model = CrossScaleTokenizer(TINY)
        path = str(tmp_path / "m.ns3d")
        save_checkpoint(path, model, {})
        _, arrays = load_checkpoint(path)
        other = CrossScaleTokenizer(
            TokenizerConfig(
                latent_len=8,
                dim=8,
                num_heads=2,
                scale_lengths=(1, 2, 4),
                vocab_size=16,
                num_freqs=2,
                encoder_self_layers=1,
                decoder_self_layers=1,
            )
        )
        with pytest.raises(CheckpointError):
            restore_model(other, arrays)


class TestTokenFiles:
    def test_roundtrip(self, tmp_path):
        ds = tiny_tokens()
        path = str(tmp_path / "t.nstk")
        save_tokens(path, ds)
        back = load_tokens(path)
        assert back.vocab_size == 16
        assert back.shape_ids == ds.shape_ids
        assert np.array_equal(back.class_ids, ds.class_ids)
        for a, b in zip(back.indices, ds.indices):
            assert np.array_equal(a, b)

    def test_checkpoint_magic_rejected_as_tokens(self, tmp_path):
        model = CrossScaleTokenizer(TINY)
        path = str(tmp_path / "m.ns3d")
        save_checkpoint(path, model, {})
        with pytest.raises(CheckpointError):
            load_tokens(path)

    def test_vocab_mismatch(self, tmp_path):
        path = str(tmp_path / "t.nstk")
        save_tokens(path, tiny_tokens())
        with pytest.raises(CheckpointError):
            load_tokens(path, expect_vocab=1024)

    def test_prefix_schedule_accepted(self, tmp_path):
        path = str(tmp_path / "t.nstk")
        save_tokens(path, tiny_tokens())
        back = load_tokens(path, expect_scales=(1, 4, 16, 64))
        assert back.scale_lengths == (1, 4)

    def test_non_prefix_schedule_rejected(self, tmp_path):
        path = str(tmp_path / "t.nstk")
        save_tokens(path, tiny_tokens())
        with pytest.raises(CheckpointError):
            load_tokens(path, expect_scales=(1, 8, 16))

    def test_out_of_vocab_index_rejected(self):
        ds = tiny_tokens()
        bad = [arr.copy() for arr in ds.indices]
        bad[1][0, 0] = 99
        with pytest.raises(CheckpointError):
            TokenDataset(
                vocab_size=16,
                scale_lengths=(1, 4),
                shape_ids=ds.shape_ids,
                class_ids=ds.class_ids,
                cond_params=ds.cond_params,
                indices=bad,
            )

    def test_sample_gathers_per_shape_rows(self):
        ds = tiny_tokens()
        row = ds.sample(1)
        assert [len(r) for r in row] == [1, 4]
        assert np.array_equal(row[0], ds.indices[0][1])

import struct

import numpy as np
import pytest
from test_model import random_ensemble, tiny

from fwens import checkpoint
from fwens.errors import DataError
from fwens.model import EnsembleTransformer, ModelConfig


def assert_bitwise(a, b):
    pa, pb = a.parameters(), b.parameters()
    assert pa.keys() == pb.keys()
    for k in pa:
        assert pa[k].data.dtype == pb[k].data.dtype
        assert pa[k].data.tobytes() == pb[k].data.tobytes(), k


class TestRoundTrip:
    def test_base(self, tmp_path):
        model = tiny()
        checkpoint.save(model, tmp_path / "m.fwb")
        assert_bitwise(model, checkpoint.load(tmp_path / "m.fwb"))

    def test_merged_ensemble(self):
        _, ens = random_ensemble(M=3)
        ens.merge_adapters()
        back, _ = checkpoint.from_bytes(checkpoint.to_bytes(ens))
        assert_bitwise(ens, back)
        assert back.config == ens.config

    def test_float32_and_extra(self):
        model = EnsembleTransformer(ModelConfig(vocab_size=11, d_model=8, n_heads=2, n_layers=1, M=2))
        back, extra = checkpoint.from_bytes(checkpoint.to_bytes(model, {"stage": "finetune"}))
        assert_bitwise(model, back)
        assert extra == {"stage": "finetune"}

    def test_forward_identical(self, rng):
        _, ens = random_ensemble(M=2)
        ens.merge_adapters()
        back, _ = checkpoint.from_bytes(checkpoint.to_bytes(ens))
        ids = rng.integers(0, 20, size=(2, 6))
        np.testing.assert_array_equal(back.forward(ids).data, ens.forward(ids).data)

    def test_bytes_deterministic(self):
        assert checkpoint.to_bytes(tiny(seed=4)) == checkpoint.to_bytes(tiny(seed=4))


class TestRejection:
    def blob(self):
        return checkpoint.to_bytes(tiny())

    def test_magic(self):
        assert self.blob()[:4] == b"FWEB"
        with pytest.raises(DataError, match="magic"):
            checkpoint.from_bytes(b"XXXX" + self.blob()[4:])

    def test_unknown_version(self):
        blob = bytearray(self.blob())
        struct.pack_into("<I", blob, 4, checkpoint.VERSION + 1)
        with pytest.raises(DataError, match="version"):
            checkpoint.from_bytes(bytes(blob))

    def test_truncated_tensor(self):
        with pytest.raises(DataError, match="truncated"):
            checkpoint.from_bytes(self.blob()[:-8])

    def test_truncated_header(self):
        with pytest.raises(DataError):
            checkpoint.from_bytes(self.blob()[:20])

    def test_corrupt_header(self):
        blob = bytearray(self.blob())
        blob[16] = 0xFF
        with pytest.raises(DataError):
            checkpoint.from_bytes(bytes(blob))

"""Binary format tests: lossless round-trips, truncation handling, resume fidelity."""

import struct

import numpy as np
import pytest

from voxanom.density import DensityTrainConfig, fit_density
from voxanom.ssl import SslConfig, train_descriptor
from voxanom.synth import GenConfig, gen_dataset
from voxanom.views import AugmentConfig
from voxanom.volio import (
    FormatError,
    config_digest,
    load_checkpoint,
    load_volume,
    save_checkpoint,
    save_volume,
)

TINY_AUG = AugmentConfig(crop_min=(12, 12, 12), crop_max=(20, 20, 20), view_size=(16, 16, 16),
                         min_overlap_voxels=64, mask_block=4, mask_fraction=0.2)
TINY_SSL = SslConfig(d_out=6, base_channels=4, depth=2, pairs_per_step=2, positions_per_pair=32,
                     steps=4, warmup_steps=2, snapshot_every=2, seed=11, aug=TINY_AUG)
TINY_GEN = GenConfig(extents=(48, 48, 48), min_patch=(16, 16, 16), seed=21)


@pytest.fixture(scope="module")
def tiny_ckpt():
    train, _ = gen_dataset(TINY_GEN, 2, 1)
    return train, train_descriptor(train, TINY_SSL)


class TestVolumeFormat:
    def test_f32_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).random((9, 7, 5)).astype(np.float32)
        p = str(tmp_path / "v.svol")
        save_volume(p, arr)
        out = load_volume(p)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, arr)

    def test_u8_mask_roundtrip(self, tmp_path):
        arr = (np.random.default_rng(1).random((4, 6, 8)) < 0.3).astype(np.uint8)
        p = str(tmp_path / "m.svol")
        save_volume(p, arr)
        np.testing.assert_array_equal(load_volume(p), arr)

    def test_deterministic_bytes(self, tmp_path):
        arr = np.random.default_rng(2).random((5, 5, 5)).astype(np.float32)
        p1, p2 = str(tmp_path / "a.svol"), str(tmp_path / "b.svol")
        save_volume(p1, arr)
        save_volume(p2, arr)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_truncated_file_is_parse_error(self, tmp_path):
        arr = np.zeros((4, 4, 4), dtype=np.float32)
        p = str(tmp_path / "t.svol")
        save_volume(p, arr)
        blob = open(p, "rb").read()
        open(p, "wb").write(blob[:-7])
        with pytest.raises(FormatError, match="truncated|payload"):
            load_volume(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = str(tmp_path / "x.svol")
        open(p, "wb").write(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="not an SVOL"):
            load_volume(p)

    def test_future_version_rejected(self, tmp_path):
        arr = np.zeros((2, 2, 2), dtype=np.float32)
        p = str(tmp_path / "f.svol")
        save_volume(p, arr)
        blob = bytearray(open(p, "rb").read())
        blob[4:8] = struct.pack("<I", 99)
        open(p, "wb").write(bytes(blob))
        with pytest.raises(FormatError, match="newer"):
            load_volume(p)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="dtype"):
            save_volume(str(tmp_path / "d.svol"), np.zeros((2, 2, 2), dtype=np.float64))


class TestCheckpointFormat:
    def test_encoder_roundtrip_bitwise(self, tmp_path, tiny_ckpt):
        _, ckpt = tiny_ckpt
        p = str(tmp_path / "desc.sckp")
        save_checkpoint(p, ckpt, config_digest(ckpt.cfg))
        back = load_checkpoint(p)
        assert back.kind == "descriptor"
        assert back.cfg == ckpt.cfg
        assert back.step == ckpt.step
        assert back.history == ckpt.history
        assert back.rng_state == ckpt.rng_state
        for name in ckpt.state:
            np.testing.assert_array_equal(back.state[name], ckpt.state[name])
        for name in ckpt.projector_state:
            np.testing.assert_array_equal(back.projector_state[name], ckpt.projector_state[name])
        assert back.opt_state["t"] == ckpt.opt_state["t"]
        for name in ckpt.opt_state["m"]:
            np.testing.assert_array_equal(back.opt_state["m"][name], ckpt.opt_state["m"][name])

    def test_density_roundtrip(self, tmp_path, tiny_ckpt):
        train, desc = tiny_ckpt
        cfg = DensityTrainConfig(kind="gaussian", condition="none", patch=(16, 16, 16),
                                 steps=5, warmup_steps=1, cache_crops=4, batch_crops=2, seed=1)
        dens = fit_density(desc, None, train, cfg)
        p = str(tmp_path / "dens.sckp")
        save_checkpoint(p, dens, config_digest(cfg))
        back = load_checkpoint(p)
        assert back.kind == "gaussian" and back.condition == "none"
        assert back.cfg == cfg
        for name in dens.state:
            np.testing.assert_array_equal(back.state[name], dens.state[name])

    def test_digest_mismatch_warns(self, tmp_path, tiny_ckpt):
        _, ckpt = tiny_ckpt
        p = str(tmp_path / "d.sckp")
        save_checkpoint(p, ckpt, config_digest(ckpt.cfg))
        import dataclasses

        other = dataclasses.replace(ckpt.cfg, steps=999)
        with pytest.warns(UserWarning, match="digest"):
            load_checkpoint(p, expect_digest=config_digest(other))

    def test_truncated_checkpoint_is_parse_error(self, tmp_path, tiny_ckpt):
        _, ckpt = tiny_ckpt
        p = str(tmp_path / "t.sckp")
        save_checkpoint(p, ckpt)
        blob = open(p, "rb").read()
        open(p, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(p)

    def test_future_version_rejected(self, tmp_path, tiny_ckpt):
        _, ckpt = tiny_ckpt
        p = str(tmp_path / "v.sckp")
        save_checkpoint(p, ckpt)
        blob = bytearray(open(p, "rb").read())
        blob[4:8] = struct.pack("<I", 2)
        open(p, "wb").write(bytes(blob))
        with pytest.raises(FormatError, match="newer"):
            load_checkpoint(p)

    def test_resume_from_saved_checkpoint_matches_uninterrupted(self, tmp_path, tiny_ckpt):
        train, _ = tiny_ckpt
        import dataclasses

        cfg = dataclasses.replace(TINY_SSL, steps=6)
        half = train_descriptor(train, cfg, until_step=3)
        p = str(tmp_path / "half.sckp")
        save_checkpoint(p, half)
        resumed = train_descriptor(train, cfg, resume=load_checkpoint(p))
        full = train_descriptor(train, cfg)
        assert resumed.history == full.history
        for name in full.state:
            np.testing.assert_array_equal(resumed.state[name], full.state[name])

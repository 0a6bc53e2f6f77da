import numpy as np
import pytest

from vidsr import model_io as mio
from vidsr.fuse import fuse_network
from vidsr.network import BackboneConfig, build_backbone, named_params, sr_forward
from vidsr.prompt import make_prompt
from vidsr.tensor import Tensor4


def toy_net(branches=3, seed=0):
    return build_backbone(BackboneConfig(channels=4, blocks=1,
                                         branches=branches, scale=2), seed=seed)


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        net = toy_net()
        prompts = [make_prompt(i, 4) for i in range(3)]
        for p in prompts:
            p.values = p.values + np.float32(0.01) * (p.chunk_id + 1)
        path = tmp_path / "model.rcam"
        mio.save_model(path, net, prompts,
                       chunks={"count": 3, "boundaries": [[0, 2], [2, 4], [4, 6]]},
                       train_config={"iters": 7, "seed": 3})
        net2, prompts2, header = mio.load_model(path)
        for (na, a), (nb, b) in zip(named_params(net), named_params(net2)):
            assert na == nb
            assert a.tobytes() == b.tobytes()
        for p, q in zip(prompts, prompts2):
            assert p.chunk_id == q.chunk_id
            assert p.values.tobytes() == q.values.tobytes()
        assert header["chunks"]["count"] == 3
        assert header["train_config"]["iters"] == 7

    def test_loaded_net_runs_without_extra_config(self, tmp_path):
        net = toy_net(seed=5)
        path = tmp_path / "m.rcam"
        mio.save_model(path, net)
        net2, _, _ = mio.load_model(path)
        x = Tensor4.from_array(np.random.default_rng(0).random((1, 3, 6, 6)))
        a = sr_forward(net, x)
        b = sr_forward(net2, x)
        assert a.data.tobytes() == b.data.tobytes()

    def test_payload_bitflip_fails_crc(self, tmp_path):
        path = tmp_path / "m.rcam"
        mio.save_model(path, toy_net())
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0x40  # inside the payload, ahead of the trailing CRC
        path.write_bytes(bytes(raw))
        with pytest.raises(mio.CrcMismatch):
            mio.load_container(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.rcam"
        mio.save_model(path, toy_net())
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(mio.BadMagic):
            mio.load_container(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.rcam"
        mio.save_model(path, toy_net())
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(mio.UnsupportedVersion):
            mio.load_container(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.rcam"
        mio.save_model(path, toy_net())
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(mio.TruncatedPayload):
            mio.load_container(path)

    def test_fused_header_records_single_branch_topology(self, tmp_path):
        net = toy_net(branches=3)
        fused = fuse_network(net)
        path = tmp_path / "fused.rcam"
        mio.save_model(path, fused)
        _, _, header = mio.load_model(path)
        assert header["arch"]["kind"] == "fused"
        assert header["arch"]["branches"] == 1
        assert header["arch"]["merge"] == "sum"

    def test_prompt_payload_bytes(self, tmp_path):
        path = tmp_path / "m.rcam"
        mio.save_model(path, toy_net(), [make_prompt(0, 4), make_prompt(1, 4)])
        _, _, header = mio.load_model(path)
        assert mio.prompt_payload_bytes(header) == [4 * 4 * 3 * 4] * 2


class TestPpm:
    def test_black_white_round_trip(self, tmp_path):
        for val in (0.0, 1.0):
            frame = np.full((3, 5, 7), val, np.float32)
            p = tmp_path / f"f{val}.ppm"
            mio.write_ppm(p, frame)
            back = mio.read_ppm(p)
            np.testing.assert_array_equal(back, frame)

    def test_half_rounds_away_from_zero(self):
        assert mio.float_to_byte(np.array([0.5]))[0] == 128

    def test_all_byte_values_round_trip(self, tmp_path):
        # one frame containing every representable 8-bit value
        vals = np.arange(256, dtype=np.float32) / 255.0
        frame = np.tile(vals.reshape(1, 16, 16), (3, 1, 1))
        p = tmp_path / "bytes.ppm"
        mio.write_ppm(p, frame)
        back = mio.read_ppm(p)
        np.testing.assert_array_equal(back, frame)
        mio.write_ppm(p, back)
        again = mio.read_ppm(p)
        assert again.tobytes() == back.tobytes()

    def test_store_round_trip_and_contiguity(self, tmp_path):
        rng = np.random.default_rng(1)
        frames = [rng.random((3, 4, 6)).astype(np.float32) for _ in range(3)]
        mio.write_frames(tmp_path / "v", frames)
        back = mio.read_frames(tmp_path / "v")
        assert len(back) == 3
        for orig, rt in zip(frames, back):
            np.testing.assert_array_equal(mio.float_to_byte(rt),
                                          mio.float_to_byte(orig))

    def test_malformed_header_rejected(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P5\n2 2\n255\n\0\0\0\0")
        with pytest.raises(mio.FrameError):
            mio.read_ppm(p)

    def test_dim_inconsistency_rejected(self, tmp_path):
        d = tmp_path / "v"
        d.mkdir()
        mio.write_ppm(mio.frame_path(d, 0), np.zeros((3, 4, 4), np.float32))
        mio.write_ppm(mio.frame_path(d, 1), np.zeros((3, 4, 5), np.float32))
        with pytest.raises(mio.FrameError):
            mio.read_frames(d)

    def test_gap_in_indices_rejected(self, tmp_path):
        d = tmp_path / "v"
        d.mkdir()
        mio.write_ppm(mio.frame_path(d, 0), np.zeros((3, 4, 4), np.float32))
        mio.write_ppm(mio.frame_path(d, 2), np.zeros((3, 4, 4), np.float32))
        with pytest.raises(mio.FrameError):
            mio.read_frames(d)


class TestSyntheticVideo:
    def test_same_seed_identical(self):
        cfg = mio.SynthConfig(frames=6, height=32, width=32, seed=9)
        a = mio.generate_synthetic_video(cfg)
        b = mio.generate_synthetic_video(cfg)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_translation_shows_up_as_correlation_peak(self):
        cfg = mio.SynthConfig(frames=6, height=32, width=32, shift=(2, 3), seed=4)
        frames = mio.generate_synthetic_video(cfg)
        a, b = frames[0], frames[1]
        best = None
        for dy in range(32):
            for dx in range(32):
                score = float((np.roll(a, (dy, dx), axis=(1, 2)) * b).sum())
                if best is None or score > best[0]:
                    best = (score, dy, dx)
        assert (best[1], best[2]) == (2, 3)

    def test_scene_change_spikes_difference_energy(self):
        cfg = mio.SynthConfig(frames=10, height=48, width=48, shift=(1, 1),
                              seed=5)
        frames = mio.generate_synthetic_video(cfg)
        energies = [float(((frames[t + 1] - frames[t]) ** 2).mean())
                    for t in range(9)]
        cut = 10 // 2 - 1  # transition between frames 4 and 5
        others = [e for i, e in enumerate(energies) if i != cut]
        assert energies[cut] > 2 * max(others)

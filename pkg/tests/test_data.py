import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mimo_seer.data import (
    DataFormatError,
    Dataset,
    Sprite,
    SpriteWorldConfig,
    generate_sprites,
    read_idx,
    read_vseq,
    render_sequence,
    split,
    sprite_bitmap,
    write_vseq,
)


def write_idx_images(path, images):
    n, h, w = images.shape
    path.write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + np.asarray(labels, np.uint8).tobytes())


@pytest.fixture
def small_cfg():
    return SpriteWorldConfig(num_sequences=6, seq_len=8, seed=3)


class TestSpriteWorldConfig:
    def test_sprite_larger_than_canvas(self):
        with pytest.raises(ValueError):
            SpriteWorldConfig(height=8, width=8, sprite_size=9)

    @pytest.mark.parametrize("bad", [dict(seq_len=1), dict(speed_min=-1.0), dict(speed_min=2.0, speed_max=1.0),
                                     dict(kind="triangle"), dict(num_sequences=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            SpriteWorldConfig(**bad)

    def test_round_trip_and_digest(self, small_cfg):
        assert SpriteWorldConfig.from_dict(small_cfg.to_dict()) == small_cfg
        assert small_cfg.digest() == SpriteWorldConfig.from_dict(small_cfg.to_dict()).digest()
        assert small_cfg.digest() != SpriteWorldConfig(num_sequences=7, seq_len=8, seed=3).digest()


class TestGenerate:
    def test_static_world(self):
        ds = generate_sprites(SpriteWorldConfig(num_sequences=3, seq_len=5, speed_min=0.0, speed_max=0.0))
        for seq in ds.sequences:
            assert all(np.array_equal(seq[0], f) for f in seq)

    def test_deterministic(self, small_cfg):
        a, b = generate_sprites(small_cfg), generate_sprites(small_cfg)
        assert a.sequences.tobytes() == b.sequences.tobytes()
        assert a.provenance["config_hash"] == small_cfg.digest()

    def test_subset_regenerates_independently(self, small_cfg):
        from dataclasses import replace

        full = generate_sprites(small_cfg)
        head = generate_sprites(replace(small_cfg, num_sequences=2))
        assert full.sequences[:2].tobytes() == head.sequences.tobytes()

    def test_square_moves_one_pixel_right(self):
        sprite = Sprite(sprite_bitmap("square", 3), (2.0, 5.0), (1.0, 0.0))
        seq = render_sequence([sprite], 12, 16, 6, bounce=True)
        for t in range(5):
            np.testing.assert_array_equal(seq[t + 1, 0], np.roll(seq[t, 0], 1, axis=1))

    def test_bounce_reflects(self):
        sprite = Sprite(sprite_bitmap("square", 2), (5.0, 0.0), (1.0, 0.0))
        seq = render_sequence([sprite], 4, 8, 6, bounce=True)
        cols = [int(np.argmax(seq[t, 0].sum(axis=0) > 0)) for t in range(6)]
        assert cols == [5, 6, 6, 5, 4, 3]

    def test_overlap_uses_max(self):
        a = Sprite(sprite_bitmap("square", 3), (1.0, 1.0), (0.0, 0.0))
        b = Sprite(sprite_bitmap("square", 3) * 0.5, (2.0, 2.0), (0.0, 0.0))
        frame = render_sequence([a, b], 8, 8, 1, bounce=True)[0, 0]
        assert frame.max() == 1.0 and frame[4, 4] == 0.5 and frame[2, 2] == 1.0

    @given(st.sampled_from(["disk", "square", "cross"]), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
    def test_pixels_in_unit_range_and_mass_conserved(self, kind, count, seed):
        cfg = SpriteWorldConfig(num_sequences=2, seq_len=6, num_sprites=count, kind=kind, seed=seed)
        seqs = generate_sprites(cfg).sequences
        assert seqs.min() >= 0.0 and seqs.max() <= 1.0
        if count == 1:
            mass = seqs.sum(axis=(2, 3, 4))
            np.testing.assert_allclose(mass, np.broadcast_to(mass[:, :1], mass.shape), rtol=1e-6)

    def test_digit_kind(self, tmp_path):
        imgs = np.zeros((2, 6, 6), np.uint8)
        imgs[:, 1:5, 2:4] = 255
        write_idx_images(tmp_path / "img", imgs)
        bank = read_idx(tmp_path / "img")
        cfg = SpriteWorldConfig(kind="digit_from_idx", sprite_size=6, num_sequences=2, seq_len=3)
        ds = generate_sprites(cfg, bank)
        assert ds.sequences.max() == 1.0

    def test_digit_kind_needs_bank(self):
        with pytest.raises(ValueError):
            generate_sprites(SpriteWorldConfig(kind="digit_from_idx", num_sequences=1))


class TestIdx:
    def test_reads_two_images(self, tmp_path):
        imgs = np.zeros((2, 28, 28), np.uint8)
        imgs[0, 0, 0] = 255
        write_idx_images(tmp_path / "img", imgs)
        out = read_idx(tmp_path / "img")
        assert out.shape == (2, 28, 28)
        assert out[0, 0, 0] == 1.0 and out[0, 0, 1] == 0.0

    def test_labels(self, tmp_path):
        write_idx_images(tmp_path / "img", np.zeros((3, 4, 4)))
        write_idx_labels(tmp_path / "lab", [7, 1, 2])
        imgs, labels = read_idx(tmp_path / "img", tmp_path / "lab")
        np.testing.assert_array_equal(labels, [7, 1, 2])

    def test_count_mismatch(self, tmp_path):
        write_idx_images(tmp_path / "img", np.zeros((3, 4, 4)))
        write_idx_labels(tmp_path / "lab", [7, 1])
        with pytest.raises(DataFormatError):
            read_idx(tmp_path / "img", tmp_path / "lab")

    def test_truncated(self, tmp_path):
        write_idx_images(tmp_path / "img", np.zeros((2, 28, 28)))
        raw = (tmp_path / "img").read_bytes()
        (tmp_path / "img").write_bytes(raw[:-10])
        with pytest.raises(DataFormatError, match="payload"):
            read_idx(tmp_path / "img")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x00000801, 1, 2, 2) + bytes(4))
        with pytest.raises(DataFormatError, match="magic"):
            read_idx(tmp_path / "img")

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataFormatError, match="nope.idx"):
            read_idx(tmp_path / "nope.idx")


class TestVseq:
    def test_round_trip(self, tmp_path, small_cfg):
        ds = generate_sprites(small_cfg)
        write_vseq(ds, tmp_path / "d.vseq")
        back = read_vseq(tmp_path / "d.vseq")
        assert back.sequences.dtype == np.float32
        assert back.sequences.tobytes() == ds.sequences.tobytes()

    def test_header_and_payload_size(self, tmp_path):
        ds = Dataset(np.zeros((100, 20, 1, 64, 64), np.float32))
        write_vseq(ds, tmp_path / "d.vseq")
        raw = (tmp_path / "d.vseq").read_bytes()
        assert raw[:4] == b"VSEQ" and raw[4] == 1
        assert struct.unpack("<5I", raw[5:25]) == (100, 20, 1, 64, 64)
        assert len(raw) - 25 == 100 * 20 * 1 * 64 * 64 * 4

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.vseq").write_bytes(b"")
        with pytest.raises(DataFormatError):
            read_vseq(tmp_path / "e.vseq")

    def test_bad_magic_and_version(self, tmp_path):
        ds = Dataset(np.zeros((1, 2, 1, 2, 2), np.float32))
        write_vseq(ds, tmp_path / "d.vseq")
        raw = bytearray((tmp_path / "d.vseq").read_bytes())
        (tmp_path / "m.vseq").write_bytes(b"XSEQ" + bytes(raw[4:]))
        with pytest.raises(DataFormatError, match="magic"):
            read_vseq(tmp_path / "m.vseq")
        raw[4] = 2
        (tmp_path / "v.vseq").write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="version"):
            read_vseq(tmp_path / "v.vseq")

    def test_size_mismatch(self, tmp_path):
        write_vseq(Dataset(np.zeros((1, 2, 1, 2, 2), np.float32)), tmp_path / "d.vseq")
        raw = (tmp_path / "d.vseq").read_bytes()
        (tmp_path / "t.vseq").write_bytes(raw + bytes(4))
        with pytest.raises(DataFormatError):
            read_vseq(tmp_path / "t.vseq")

    def test_out_of_range_warns_and_clamps(self, tmp_path):
        seqs = np.full((1, 2, 1, 2, 2), 0.5, np.float32)
        seqs[0, 0, 0, 0, 0] = 1.5
        seqs[0, 1, 0, 1, 1] = -0.25
        with open(tmp_path / "d.vseq", "wb") as fh:
            fh.write(b"VSEQ" + struct.pack("<B5I", 1, 1, 2, 1, 2, 2) + seqs.astype("<f4").tobytes())
        with pytest.warns(UserWarning, match="clamped"):
            back = read_vseq(tmp_path / "d.vseq")
        assert back.sequences.max() == 1.0 and back.sequences.min() == 0.0


class TestSplit:
    def test_half(self):
        ds = Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1, 1))
        tr, ev = split(ds, 0.5, seed=0)
        assert len(tr) == 5 and len(ev) == 5
        union = sorted(np.concatenate([tr.sequences.ravel(), ev.sequences.ravel()]).tolist())
        assert union == list(range(10))

    def test_seeded(self):
        ds = Dataset(np.arange(20, dtype=np.float32).reshape(20, 1, 1, 1, 1))
        a, b = split(ds, 0.7, 4), split(ds, 0.7, 4)
        assert a[1].sequences.tobytes() == b[1].sequences.tobytes()
        assert a[1].split == "eval" and a[0].split == "train"

    def test_errors(self):
        with pytest.raises(ValueError):
            split(Dataset(np.zeros((1, 1, 1, 1, 1), np.float32)), 0.5, 0)
        with pytest.raises(ValueError):
            split(Dataset(np.zeros((4, 1, 1, 1, 1), np.float32)), 1.0, 0)

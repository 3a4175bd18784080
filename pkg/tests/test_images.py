import numpy as np
import pytest

from neuprt.errors import DataError, FormatError
from neuprt.images import (Image, load_envmap, read_hdr, read_image, read_pfm, tonemap, tonemap_write,
                           write_hdr, write_pfm)


def pixels(h=5, w=7, seed=0):
    return np.random.default_rng(seed).uniform(0, 4, (h, w, 3)).astype(np.float32)


class TestPfm:
    def test_roundtrip_exact(self, tmp_path):
        px = pixels()
        write_pfm(tmp_path / "x.pfm", px)
        assert np.array_equal(read_pfm(tmp_path / "x.pfm"), px)

    def test_bottom_up_storage(self, tmp_path):
        px = pixels()
        write_pfm(tmp_path / "x.pfm", px)
        raw = (tmp_path / "x.pfm").read_bytes()
        first = np.frombuffer(raw[len(b"PF\n7 5\n-1.0\n"):][:12], "<f4")
        assert np.array_equal(first, px[-1, 0])

    def test_big_endian_and_grey(self, tmp_path):
        p = tmp_path / "g.pfm"
        p.write_bytes(b"Pf\n2 1\n1.0\n" + np.array([0.25, 0.5], ">f4").tobytes())
        out = read_pfm(p)
        assert out.shape == (1, 2, 3) and np.array_equal(out[0, :, 0], [0.25, 0.5])

    @pytest.mark.parametrize("raw", [b"P6\n1 1\n255\n", b"PF\n2 2\n-1.0\n" + bytes(8)])
    def test_corrupt(self, tmp_path, raw):
        p = tmp_path / "c.pfm"
        p.write_bytes(raw)
        with pytest.raises(FormatError):
            read_pfm(p)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_pfm(tmp_path / "none.pfm")


class TestHdr:
    def test_roundtrip_within_rgbe_precision(self, tmp_path):
        px = pixels(8, 16)
        write_hdr(tmp_path / "x.hdr", px)
        back = read_hdr(tmp_path / "x.hdr")
        # the shared exponent quantises every channel to 1/256 of the pixel's brightest channel
        bound = px.max(axis=2, keepdims=True) * 2.0 ** -7
        assert np.all(np.abs(back - px) <= bound) and np.all(back <= px)

    def test_rle_scanlines(self, tmp_path):
        # one 8-pixel scanline in new-style RLE: a run of 8 for each component
        body = bytes([2, 2, 0, 8]) + bytes([128 + 8, 128, 128 + 8, 64, 128 + 8, 0, 128 + 8, 129])
        p = tmp_path / "r.hdr"
        p.write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 8\n" + body)
        out = read_hdr(p)
        np.testing.assert_allclose(out[0], [[1.0, 0.5, 0.0]] * 8)

    @pytest.mark.parametrize("raw", [b"hello", b"#?RADIANCE\nFORMAT=x\n", b"#?RADIANCE\n\n+Y 1 +X 1\n",
                                     b"#?RADIANCE\n\n-Y 2 +X 2\n" + bytes(4)])
    def test_corrupt(self, tmp_path, raw):
        p = tmp_path / "c.hdr"
        p.write_bytes(raw)
        with pytest.raises(FormatError):
            read_hdr(p)

    def test_envmap_dispatch(self, tmp_path):
        with pytest.raises(DataError):
            load_envmap(tmp_path / "env.exr")
        write_pfm(tmp_path / "e.pfm", pixels())
        assert load_envmap(tmp_path / "e.pfm").shape == (5, 7, 3)


class TestDisplay:
    def test_tonemap_formula(self):
        v = tonemap(np.array([[[0.0, 0.25, 2.0]]]), exposure=2.0, gamma=2.0)
        assert v.tolist() == [[[0, round(255 * 0.5 ** 0.5), 255]]]

    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_ldr_write(self, tmp_path, suffix):
        img = Image(pixels() / 4)
        tonemap_write(img, tmp_path / ("x" + suffix), gamma=1.0)
        back = read_image(tmp_path / ("x" + suffix))
        np.testing.assert_allclose(back.pixels, img.pixels, atol=1 / 255)

    def test_pfm_dump_is_linear(self, tmp_path):
        img = Image(pixels())
        tonemap_write(img, tmp_path / "x.pfm", exposure=3.0)
        assert np.array_equal(read_image(tmp_path / "x.pfm").pixels, img.pixels)

    def test_unwritable(self, tmp_path):
        with pytest.raises(DataError):
            tonemap_write(Image(pixels()), tmp_path / "no" / "dir" / "x.png")

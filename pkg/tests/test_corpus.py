"""Synthetic corpus generation and round trips through image files."""

import pytest
import torch

from robustmark.corpus import (generate_corpus, histogram_coverage,
                               load_corpus, save_corpus)
from robustmark.errors import ConfigError


class TestGenerate:
    def test_shape_range_determinism(self):
        a = generate_corpus(count=8, seed=3)
        b = generate_corpus(count=8, seed=3)
        assert a.shape == (8, 3, 64, 64)
        assert torch.equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        c = generate_corpus(count=8, seed=4)
        assert not torch.equal(a, c)

    def test_side_multiple_of_8(self):
        with pytest.raises(ConfigError):
            generate_corpus(count=2, height=60, width=64)

    def test_intensity_coverage(self):
        imgs = generate_corpus(count=32, seed=0)
        assert histogram_coverage(imgs) >= 0.9


class TestRoundTrip:
    def test_save_load(self, tmp_path):
        imgs = generate_corpus(count=4, seed=1)
        paths = save_corpus(imgs, tmp_path / "c")
        assert len(paths) == 4
        loaded = load_corpus(tmp_path / "c")
        assert loaded.shape == imgs.shape
        # 8-bit quantization round trip only
        assert (loaded - imgs).abs().max() <= 1.0 / 255.0 + 1e-6

    def test_missing_folder(self, tmp_path):
        with pytest.raises(IOError):
            load_corpus(tmp_path / "nope")

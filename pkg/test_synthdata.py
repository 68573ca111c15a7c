"""Tests for the synthetic shapes generator."""

import numpy as np
import pandas as pd
import pytest

from src.synthdata import (
    CLASS_NAMES,
    MAX_AREA_FRACTION,
    MIN_AREA_FRACTION,
    SynthConfig,
    dump_dataset,
    generate,
    render_sample,
    to_arrays,
)

SMALL = SynthConfig(image_size=32, shape_min=10, shape_max=22, speckles=10)


class TestRenderSample:

    def test_same_seed_and_index_is_bit_identical(self):
        a, b = render_sample(3, 17, SMALL), render_sample(3, 17, SMALL)
        np.testing.assert_array_equal(a.image, b.image)
        assert (a.label, a.gt_box) == (b.label, b.gt_box)

    def test_seed_changes_the_image(self):
        assert not np.array_equal(render_sample(0, 5, SMALL).image, render_sample(1, 5, SMALL).image)

    def test_image_layout(self):
        sample = render_sample(0, 0, SMALL)
        assert sample.image.shape == (3, 32, 32)
        assert sample.image.dtype == np.float32
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        assert sample.class_name in CLASS_NAMES

    def test_box_is_tight_around_the_shape(self):
        for index in range(60):
            sample = render_sample(7, index, SMALL)
            box, mask = sample.gt_box, sample.mask
            assert box.within(32, 32)
            assert mask[box.y_min, box.x_min:box.x_max + 1].any()
            assert mask[box.y_max, box.x_min:box.x_max + 1].any()
            assert mask[box.y_min:box.y_max + 1, box.x_min].any()
            assert mask[box.y_min:box.y_max + 1, box.x_max].any()
            assert mask.sum() == mask[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1].sum()

    def test_shape_area_bounds(self):
        for index in range(60):
            fraction = render_sample(2, index, SMALL).mask.mean()
            assert MIN_AREA_FRACTION <= fraction <= MAX_AREA_FRACTION


class TestGenerate:

    def test_classes_are_balanced(self):
        tiny = SynthConfig(image_size=16, shape_min=6, shape_max=10, speckles=0)
        labels = np.array([s.label for s in generate(1000, 0, tiny)])
        counts = np.bincount(labels, minlength=len(CLASS_NAMES))
        assert np.all(np.abs(counts - 250) <= 25)

    def test_split_index_ranges(self):
        train = generate(6, 1, SMALL)
        test = generate(4, 1, SMALL, start=6)
        assert [s.index for s in train] == list(range(6))
        assert [s.index for s in test] == list(range(6, 10))
        np.testing.assert_array_equal(test[0].image, render_sample(1, 6, SMALL).image)

    def test_to_arrays(self):
        images, labels, frame = to_arrays(generate(5, 0, SMALL))
        assert images.shape == (5, 3, 32, 32)
        assert labels.dtype == np.int64
        assert list(frame.columns) == ["index", "label", "x_min", "y_min", "x_max", "y_max"]
        np.testing.assert_array_equal(frame["label"].to_numpy(), labels)

    def test_non_positive_count_rejected(self):
        with pytest.raises(ValueError):
            generate(0, 0, SMALL)


class TestSynthConfig:

    @pytest.mark.parametrize("overrides", [
        {"image_size": 4},
        {"shape_min": 1},
        {"shape_min": 20, "shape_max": 10},
        {"shape_max": 40},
        {"clutter": 1.5},
    ])
    def test_invalid_settings_rejected(self, overrides):
        values = dict(image_size=32, shape_min=10, shape_max=22)
        values.update(overrides)
        with pytest.raises(ValueError):
            SynthConfig(**values).validate()

    def test_defaults_are_valid(self):
        SynthConfig().validate()


class TestDumpDataset:

    def test_writes_png_and_manifest(self, tmp_path):
        samples = generate(3, 0, SMALL)
        manifest = dump_dataset(samples, tmp_path / "png")
        assert sorted(p.name for p in (tmp_path / "png").glob("*.png")) == ["00000.png", "00001.png", "00002.png"]
        frame = pd.read_csv(manifest)
        assert frame["index"].tolist() == [0, 1, 2]
        assert frame.loc[1, "x_max"] == samples[1].gt_box.x_max

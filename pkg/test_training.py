"""Tests for the shared training loop: gradient clipping, horizontal flips and batching."""

import logging

import numpy as np
import pytest

from src.layers import Linear, Module, clip_grad_norm
from src.tensor import Tensor, tensor_sum
from src.training import TrainConfig, batch_indices, fit, random_hflip


class Scorer(Module):
    def __init__(self):
        self.layer = Linear(4, 2, np.random.default_rng(0))

    def forward(self, x: Tensor) -> Tensor:
        return self.layer(x)


def steep_loss(model, batch, targets):
    return tensor_sum(model(batch)) * 1000.0


def update_norm(clip_norm: float) -> float:
    model = Scorer()
    before = np.concatenate([p.data.ravel() for p in model.parameters()])
    inputs = np.random.default_rng(1).random((8, 4), dtype=np.float32)
    fit(model, inputs, np.zeros(8, dtype=np.int64), steep_loss,
        TrainConfig(steps=1, batch_size=8, lr=1.0, momentum=0.0, weight_decay=0.0,
                    clip_norm=clip_norm, hflip=False, progress=False))
    after = np.concatenate([p.data.ravel() for p in model.parameters()])
    return float(np.linalg.norm(after - before))


class TestClipGradNorm:

    def _params(self, *grads):
        params = []
        for g in grads:
            p = Tensor(np.zeros_like(g), requires_grad=True)
            p.grad = np.asarray(g, dtype=np.float32)
            params.append(p)
        return params

    def test_rescales_to_max_norm(self):
        params = self._params(np.array([3.0, 0.0]), np.array([[0.0, 4.0]]))
        assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
        joint = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
        assert joint == pytest.approx(1.0, rel=1e-5)
        np.testing.assert_allclose(params[0].grad, [0.6, 0.0], rtol=1e-5)

    def test_small_gradients_untouched(self):
        params = self._params(np.array([0.3, 0.4]))
        assert clip_grad_norm(params, 1.0) == pytest.approx(0.5)
        np.testing.assert_array_equal(params[0].grad, np.array([0.3, 0.4], dtype=np.float32))

    def test_max_norm_must_be_positive(self):
        with pytest.raises(ValueError):
            clip_grad_norm(self._params(np.ones(2)), 0.0)


class TestFitClipping:

    def test_first_step_is_bounded_by_clip_norm(self):
        assert update_norm(0.5) == pytest.approx(0.5, rel=1e-4)

    def test_zero_disables_clipping(self):
        assert update_norm(0.0) > 100.0

    def test_negative_clip_norm_rejected(self):
        with pytest.raises(ValueError):
            update_norm(-1.0)

    def test_summary_logged_every_hundred_steps(self, caplog):
        inputs = np.random.default_rng(9).random((8, 4), dtype=np.float32)
        with caplog.at_level(logging.INFO, logger="src.training"):
            fit(Scorer(), inputs, np.zeros(8, dtype=np.int64), steep_loss,
                TrainConfig(steps=200, batch_size=8, lr=0.01, clip_norm=0.5, hflip=False, progress=False),
                desc="scorer")
        summaries = [r.getMessage() for r in caplog.records if r.getMessage().startswith("scorer: step ")]
        assert [m.split()[2] for m in summaries] == ["100/200", "200/200"]
        assert all("grad norm" in m for m in summaries)


class TestRandomHflip:

    def test_spatial_targets_follow_their_images(self):
        rng = np.random.default_rng(2)
        images = rng.random((16, 3, 4, 5))
        planes = images[:, :2].copy()
        flipped, targets = random_hflip(images, planes, np.random.default_rng(3))
        np.testing.assert_array_equal(targets, flipped[:, :2])
        mirrored = [not np.array_equal(a, b) for a, b in zip(flipped, images)]
        assert 0 < sum(mirrored) < len(images)
        for out, original, was_flipped in zip(flipped, images, mirrored):
            expected = original[..., ::-1] if was_flipped else original
            np.testing.assert_array_equal(out, expected)

    def test_class_ids_pass_through(self):
        images = np.random.default_rng(4).random((8, 3, 4, 4))
        labels = np.arange(8)
        _, targets = random_hflip(images, labels, np.random.default_rng(5))
        np.testing.assert_array_equal(targets, labels)

    def test_inputs_are_not_modified(self):
        images = np.random.default_rng(6).random((8, 3, 4, 4))
        snapshot = images.copy()
        random_hflip(images, images[:, 0], np.random.default_rng(7))
        np.testing.assert_array_equal(images, snapshot)


class TestBatchIndices:

    def test_every_sample_once_per_epoch(self):
        batches = list(batch_indices(12, 4, 6, np.random.default_rng(8)))
        assert len(batches) == 6
        for epoch in (batches[:3], batches[3:]):
            assert sorted(np.concatenate(epoch).tolist()) == list(range(12))

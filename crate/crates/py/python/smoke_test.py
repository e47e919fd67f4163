"""Smoke test for the csasr_py extension module.

Build and install with `maturin develop` (or `pip install .`) from crates/py,
then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import csasr_py as sr


def gradient_image(channels, height, width):
    data = [
        0.5 + 0.4 * math.sin(0.3 * x + 0.2 * y + c)
        for c in range(channels)
        for y in range(height)
        for x in range(width)
    ]
    return sr.Image(channels, height, width, data)


def main():
    hr = gradient_image(3, 32, 32)
    lr, hr = sr.degrade(hr, 2)
    assert lr.shape == (3, 16, 16) and hr.shape == (3, 32, 32)

    assert sr.psnr(hr, hr) == math.inf
    assert sr.ssim(hr, hr) == 1.0
    a = sr.Image(3, 8, 8, [100 / 255] * 192)
    b = sr.Image(3, 8, 8, [101 / 255] * 192)
    assert abs(sr.psnr(a, b) - 48.1308) < 1e-3

    model = sr.Model(scale=2, seed=7)
    assert model.param_count > 0
    out = model.super_resolve(lr)
    assert out.shape == (3, 32, 32)

    trainer = sr.Trainer(scale=2, seed=7, lr=1e-3)
    losses = [trainer.step([(lr, hr)]) for _ in range(5)]
    assert all(math.isfinite(l) for l in losses)
    assert losses[-1] < losses[0], losses

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "run.ckpt")
        trainer.save(path)
        restored = sr.Model.load(path)
        assert restored.param_count == model.param_count
        png = os.path.join(tmp, "out.png")
        out.save(png)
        assert sr.Image.load(png).shape == (3, 32, 32)

    try:
        sr.Model(scale=5)
    except ValueError:
        pass
    else:
        raise AssertionError("scale 5 accepted")

    failed = [row for row in sr.selftest() if not row[2]]
    assert not failed, failed
    checks = sr.gradcheck("sigmoid")
    assert checks and all(passed for _, _, passed in checks)
    print("csasr_py smoke test passed")


if __name__ == "__main__":
    main()

"""Smoke test for the pcdc_py extension.

Build first:  maturin develop -m crates/py/Cargo.toml --release
Then run:     python -m pytest python/smoke_test.py   (or python python/smoke_test.py)
"""

import tempfile

import pcdc_py

TOY_CONFIG = """
seed = 3

[ppo]
epochs = 1
episodes = 2

[sampler]
steps = 4

[train]
joint_steps = 30
finetune_steps = 10
crop = 16
"""


def _codec():
    images = [pcdc_py.synthetic_texture(32, 32, seed) for seed in range(2)]
    return pcdc_py.Codec.train(images, TOY_CONFIG)


def test_metrics_identity():
    h, w, data = pcdc_py.synthetic_texture(24, 24, 1)
    assert len(data) == h * w * 3
    report = pcdc_py.evaluate(h, w, data, data)
    assert report["mse"] == 0.0
    assert report["ssim"] == 1.0
    assert abs(report["lpips_proxy"]) < 1e-9


def test_ppm_round_trip():
    h, w, data = pcdc_py.synthetic_texture(8, 12, 2)
    ppm = pcdc_py.encode_ppm(h, w, data)
    assert ppm.startswith(b"P6")
    assert pcdc_py.decode_ppm(ppm) == (h, w, data)


def test_compress_decompress_and_budget():
    codec = _codec()
    assert len(codec.content_hash) == 64
    h, w, data = pcdc_py.synthetic_texture(32, 32, 7)
    coarse = codec.compress(h, w, data, mode="uniform-1")
    budget = 2.0 * len(coarse) * 8
    stream = codec.compress(h, w, data, rmax_bits=budget, seed=1)
    assert len(stream) * 8 <= budget
    rh, rw, rec = codec.decompress(stream)
    assert (rh, rw, len(rec)) == (h, w, len(data))
    assert codec.decompress(stream) == (rh, rw, rec)

    try:
        codec.compress(h, w, data, rmax_bits=len(coarse))
    except pcdc_py.InfeasibleBudgetError:
        pass
    else:
        raise AssertionError("tiny budget accepted")

    with tempfile.TemporaryDirectory() as d:
        codec.save(d)
        again = pcdc_py.Codec.load(d, TOY_CONFIG)
        assert again.content_hash == codec.content_hash
        assert again.decompress(stream) == (rh, rw, rec)


if __name__ == "__main__":
    test_metrics_identity()
    test_ppm_round_trip()
    test_compress_decompress_and_budget()
    print("ok")

"""Smoke test for the tipseg Python bindings.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml`, then run
`python python/smoke_test.py`.
"""

import tempfile

import tipseg_py as ts


def main():
    image, labels, w, h = ts.synth_sample(0)
    assert len(image) == w * h and len(labels) == w * h
    assert max(labels) < ts.NUM_CLASSES

    out_img, out_mask, ow, oh, applied = ts.augment(image, labels, w, h, preset="full", seed=1)
    assert (ow, oh) == (224, 224)
    assert set(out_mask) <= set(labels) | {0}
    print("augment applied:", applied)

    m = ts.metrics(labels, labels, w, h)
    assert m["miou"] == 1.0 and m["accuracy"] == 1.0

    hist = [0] * 256
    hist[40], hist[200] = 10, 10
    level = ts.otsu_level(hist)
    assert 40 <= level < 200

    uniform = [1.0 / 9] * (9 * 4)
    loss = ts.soft_jaccard_loss(uniform, (1, 9, 2, 2), [bytes([0, 1, 2, 3])])
    assert 0.0 < loss < 1.0

    rows = ts.model_stats(["resnet34"])
    params = {r["part"]: r["params"] for r in rows}
    assert params["encoder"] == 21_278_400 and params["head"] == 1161

    model = ts.Model("desk", seed=0)
    pred = model.predict(image, w, h)
    assert len(pred) == w * h
    shape, logits = model.forward([out_img], ow, oh)
    assert shape == (1, ts.NUM_CLASSES, 224, 224) and len(logits) == 9 * 224 * 224

    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/model.ckpt"
        model.save(path)
        again = ts.Model.load(path)
        assert again.forward([out_img], ow, oh)[1] == logits
        assert ts.gen_data(f"{tmp}/data", 4, 1, 1) == (4, 1, 1)

    print(model)
    print("smoke test passed")


if __name__ == "__main__":
    main()

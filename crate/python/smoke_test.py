"""Smoke test for the vdd Python extension.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import os
import tempfile

import vdd


def main():
    scene = vdd.generate_scene(seed=3, width=256, height=256)
    rgb, nir, dsm, labels = scene["rgb"], scene["nir"], scene["dsm"], scene["labels"]
    assert (rgb.width, rgb.height, rgb.channels) == (256, 256, 3)
    assert rgb.roles == ["R", "G", "B"]
    assert sum(scene["census"]) == 256 * 256

    # VDDR round trip
    assert vdd.Raster.from_bytes(rgb.to_bytes()) == rgb
    small = vdd.Raster(2, 1, ["NIR", "DSM"], [1.0, 2.0, 3.0, 4.0])
    assert small.plane(1) == [2.0, 4.0] and small.get(1, 0, 0) == 3.0

    mask, threshold, degenerate = vdd.build_depth_map(dsm)
    assert not degenerate and 0 < threshold < 255
    inter = sum(1 for a, b in zip(mask.data(), scene["canopy_mask"].data()) if a > 0.5 and b > 0.5)
    union = sum(1 for a, b in zip(mask.data(), scene["canopy_mask"].data()) if a > 0.5 or b > 0.5)
    assert inter / union > 0.9, inter / union

    # registering a plane onto itself recovers the identity
    red = vdd.Raster(256, 256, ["R"], rgb.plane(0))
    h, history = vdd.register_images(red, red)
    assert all(abs(h[i][j] - (i == j)) < 1e-3 for i in range(3) for j in range(3)), h
    assert all(b <= a for a, b in zip(history, history[1:]))

    counts = vdd.confusion(labels, labels, window=16)
    m = vdd.metrics(counts)
    assert m["accuracy"] == 1.0 and m["healthy"]["f1"] == 1.0
    assert vdd.report_csv(counts).splitlines()[-1] == "global,100.00"

    model = vdd.Model("vddnet", stages=2, base=4, seed=0)
    history = model.train(rgb, nir, mask, labels, patch=64, iterations=4, batch_size=2)
    assert history and all(len(row) == 4 for row in history)
    pred, probs = model.segment(rgb, nir, mask)
    assert pred.roles == ["Label"] and probs.channels == 4
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.vddw")
        model.save(path)
        again, _ = vdd.Model.load(path).segment(rgb, nir, mask)
        assert again == pred
        assert vdd.disease_map(pred).channels == 3

        out = os.path.join(d, "run")
        overrides = [
            f"output.dir={out}",
            "synth.width=256",
            "synth.height=256",
            "train.base=4",
            "train.iterations=6",
            "train.validation_every=3",
            "train.val_limit=4",
        ]
        run = vdd.run_pipeline(overrides=overrides, demo=True)
        assert run["metrics_csv"].startswith("class,recall,precision,f1,support")
        assert os.path.exists(os.path.join(out, "manifest.txt"))

    try:
        vdd.Raster.from_bytes(b"junk")
    except vdd.VddError as e:
        assert "magic" in str(e)
    else:
        raise AssertionError("bad bytes accepted")

    print(f"vdd {vdd.__version__} smoke test passed")


if __name__ == "__main__":
    main()

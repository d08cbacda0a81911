"""Smoke test for the compiled extension: python python/smoke_test.py"""

import math
import os
import tempfile

import graspformer as gf


def main():
    vol, labels = gf.gen_scene(3, "pile", "tiny")
    assert vol.n == 8 and len(vol.values()) == 8 ** 3
    assert all(0.0 <= v <= 1.0 for v in vol.values())
    positives = [l for l in labels if l["q"] == 1.0]
    assert positives, "scene has no positive labels"

    net = gf.GraspNet("tiny", seed=0)
    maps = net.predict(vol)
    s = net.grid ** 3
    assert len(maps["quality"]) == s and len(maps["width"]) == s and len(maps["rotation"]) == 4 * s
    assert all(0.0 <= q <= 1.0 for q in maps["quality"])

    poses = net.detect(vol, threshold=0.3)
    qualities = [p["quality"] for p in poses]
    assert qualities == sorted(qualities, reverse=True)

    r = [1.0, 0.0, 0.0, 0.0]
    assert abs(gf.grasp_loss(0.5, r, 2.0, 1.0, r, 2.0) - math.log(2.0)) < 1e-6
    assert gf.quat_loss(r, r) == 0.0
    assert abs(gf.rotation_loss(r, [0.0, 0.0, 0.0, 1.0])) < 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.gfck")
        net.save(path)
        again = gf.GraspNet.load(path)
        assert again.predict(vol)["quality"] == maps["quality"]
        vpath = os.path.join(d, "scene.tsdf")
        vol.save(vpath)
        assert gf.TsdfVolume.load(vpath).values() == vol.values()

    try:
        gf.GraspNet("huge")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    print(f"ok: {net!r}, {len(labels)} labels, {len(poses)} poses above 0.3")


if __name__ == "__main__":
    main()

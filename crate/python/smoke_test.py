"""Smoke test of the voxfab extension module.

Build it first, e.g. `maturin develop -m crates/python/Cargo.toml`, or copy
the cdylib from `cargo build -p voxfab-py --features extension-module` to
`python/voxfab.so`.
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import voxfab


def box(n, side):
    g = voxfab.VoxelGrid((n, n, n), 1.0)
    for z in range(side):
        for y in range(side):
            for x in range(side):
                g.set(x, y, z, True)
    return g


def main():
    cube = box(8, 6)
    report = voxfab.evaluate(cube)
    assert report["manufacturable"], report
    assert report["solid_components"] == 1

    # a 4³ shell encloses an 8 mm³ void, below the 10 mm³ fill threshold
    shell = voxfab.VoxelGrid(
        (4, 4, 4),
        1.0,
        [x in (0, 3) or y in (0, 3) or z in (0, 3) for z in range(4) for y in range(4) for x in range(4)],
    )
    voids = voxfab.evaluate(shell)["voids"]
    assert len(voids) == 1 and voids[0]["volume"] == 8.0 and voids[0]["below_fill_threshold"]
    fixed = voxfab.repair(shell)
    assert voxfab.evaluate(fixed)["manufacturable"]
    assert voxfab.repair(fixed) == fixed

    assert voxfab.VoxelGrid.from_vxg(cube.to_vxg()) == cube

    floating = box(8, 3)
    floating.set(1, 1, 6, True)
    try:
        voxfab.repair(floating, strategies=["voids"])
    except voxfab.RepairError:
        pass
    else:
        raise AssertionError("repair without islands should not converge")

    with tempfile.TemporaryDirectory() as d:
        stl = os.path.join(d, "cube.stl")
        triangles = voxfab.export_stl(cube, stl)
        assert triangles == 6 * 6 * 6 * 2
        back = voxfab.voxelize_stl(stl, 1.0)
        assert back.count() == cube.count()

        model, history = voxfab.Model.train(epochs=1, dataset_size=5, latent_dim=8, seed=1)
        assert len(history) == 1 and history[0]["recon"] > 0
        path = os.path.join(d, "m.vfm")
        model.save(path)
        loaded = voxfab.Model.load(path)
        assert loaded.latent_dim == 8 and loaded.resolution == 16
        probs = loaded.decode([0.0] * 8)
        assert len(probs) == 16**3 and all(0.0 < p < 1.0 for p in probs)
        grids = loaded.generate(2, seed=3)
        assert len(grids) == 2 and grids == loaded.generate(2, seed=3)
        for g in grids:
            if g.count():
                r = voxfab.evaluate(g)
                assert r["solid_components"] == 1

    print("voxfab smoke test passed")


if __name__ == "__main__":
    main()

"""Regenerate fixtures/terrain_40x30.asc, a synthetic stand-in for a DEM clip.

Smooth Gaussian hills and one crater on a 400 m x 300 m patch at 10 m cells.
"""

import sys

import numpy as np

from snomdp.gridworld import ElevationField, write_esri_ascii

NCOLS, NROWS, CELL = 40, 30, 10.0


def terrain(seed=7):
    rng = np.random.default_rng(seed)
    x = (np.arange(NCOLS) + 0.5) * CELL
    y = (np.arange(NROWS) + 0.5) * CELL
    X, Y = np.meshgrid(x, y)
    z = 0.02 * X + 0.01 * Y
    for _ in range(9):
        cx, cy = rng.uniform(0, NCOLS * CELL), rng.uniform(0, NROWS * CELL)
        amp = rng.uniform(-50.0, 70.0)
        width = rng.uniform(35.0, 70.0)
        z += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * width ** 2))
    return np.round(z, 3)


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "fixtures/terrain_40x30.asc"
    with open(out, "w") as fh:
        fh.write(write_esri_ascii(ElevationField(terrain(), CELL)))

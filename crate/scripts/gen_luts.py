"""Regenerate the embedded 256-entry colormap LUTs from matplotlib."""
import sys
from pathlib import Path

import matplotlib
import numpy as np

NAMES = ["rainbow", "seismic", "nipy_spectral", "viridis"]


def main(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in NAMES:
        cmap = matplotlib.colormaps[name].resampled(256)
        rgba = cmap(np.arange(256))
        with open(out_dir / f"{name}.csv", "w") as fh:
            for r, g, b, _ in rgba:
                fh.write(f"{float(r)!r},{float(g)!r},{float(b)!r}\n")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("crates/core/data/colormaps"))

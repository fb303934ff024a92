"""Plot the per-figure CSV extracts written by the run scripts (needs matplotlib, not a package dependency).

usage: python scripts/plot_results.py runs/periodic runs/quadrants/q1 ...
"""

import csv
import os
import sys


def read(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], [list(map(float, r)) for r in rows[1:]]


def main(dirs):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for d in dirs:
        for name in sorted(os.listdir(d)):
            if not name.endswith(("_plot.csv", "_pressures.csv", "_error.csv")):
                continue
            header, rows = read(os.path.join(d, name))
            cols = list(zip(*rows))
            fig, ax = plt.subplots(figsize=(6, 3.5))
            for h, c in zip(header[1:], cols[1:]):
                ax.plot(cols[0], c, label=h)
            ax.set_xlabel("t [s]")
            ax.legend()
            fig.tight_layout()
            out = os.path.join(d, name.replace(".csv", ".png"))
            fig.savefig(out, dpi=120)
            plt.close(fig)
            print(out)


if __name__ == "__main__":
    main(sys.argv[1:])

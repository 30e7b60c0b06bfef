#!/usr/bin/env python3
"""Plot the dropout-sweep CSV and export template/Jacobian slice images.

Needs matplotlib (``pip install gdr[plots]``) for the sweep figure; the PGM
exports work without it.

Usage:
    python scripts/make_figures.py --sweep gdr-demo/sweep/sweep.csv --out figs/
    python scripts/make_figures.py --result gdr-demo/result-gdr --out figs/
"""

import argparse
from collections import defaultdict
from pathlib import Path

from gdr.io import export_slice, read_csv, read_volume


def plot_sweep(csv_path: Path, out_dir: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _, header, rows = read_csv(csv_path)
    by_mode = defaultdict(lambda: defaultdict(list))
    for mode, pct, _rep, _seed, err in rows:
        by_mode[mode][int(pct)].append(float(err))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, marker in (("gdr", "o"), ("gir", "s")):
        if mode not in by_mode:
            continue
        pcts = sorted(by_mode[mode])
        means = [sum(by_mode[mode][p]) / len(by_mode[mode][p]) for p in pcts]
        ax.plot(pcts, means, marker=marker, label=mode.upper())
    ax.set_xlabel("data dropout (%)")
    ax.set_ylabel("mean Jacobian error")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "dropout_sweep.png"
    fig.savefig(path, dpi=150)
    print(f"wrote {path}")


def export_result_slices(result_dir: Path, out_dir: Path):
    template = read_volume(result_dir / "template.hdr")
    if template.geometry.ndim == 2:
        export_slice(template, out_dir / "template.pgm")
        jac = read_volume(result_dir / "jac_inv_05.hdr")
        export_slice(jac, out_dir / "jacobian_final.pgm", window=(0.5, 1.5))
    else:
        mid = template.geometry.dims[0] // 2
        export_slice(template, out_dir / "template.pgm", axis=0, index=mid)
    print(f"wrote slices to {out_dir}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sweep", type=Path, default=None, help="sweep.csv path")
    ap.add_argument("--result", type=Path, default=None, help="result dir")
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        plot_sweep(args.sweep, args.out)
    if args.result:
        export_result_slices(args.result, args.out)
    if not args.sweep and not args.result:
        ap.error("give --sweep and/or --result")


if __name__ == "__main__":
    main()

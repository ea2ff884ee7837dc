"""Runtime scaling of the selective scan and the HSSM forward pass.

    python3 scripts/bench_scaling.py [--out-dir bench/]

Writes scan.csv and hssm.csv (columns size,runtime) and prints doubling ratios.
"""

import argparse
from pathlib import Path

from ssmtrack.cli import bench_hssm, bench_scan


def run(fn, sizes, repeats, path):
    times = [fn(n, repeats=repeats) for n in sizes]
    path.write_text("size,runtime\n" + "".join(f"{n},{t:.6g}\n" for n, t in zip(sizes, times)))
    for (n0, t0), (n1, t1) in zip(zip(sizes, times), zip(sizes[1:], times[1:])):
        print(f"{path.stem:5s} {n0:5d} -> {n1:5d}: x{t1 / t0:.2f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="bench")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run(bench_scan, [256, 512, 1024, 2048, 4096], args.repeats, out / "scan.csv")
    run(bench_hssm, [4, 8, 16, 32], args.repeats, out / "hssm.csv")


if __name__ == "__main__":
    main()

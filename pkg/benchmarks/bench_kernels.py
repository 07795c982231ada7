"""Compare the compiled convolution kernels with the numpy fallback.

Times one training step (forward, loss and backward) of a small MECASA
backbone on EEG-sized and OD128-sized batches, plus a bare depthwise
convolution forward and backward, once per available backend.

    python benchmarks/bench_kernels.py --reps 10 --json kernels.json
"""
import argparse
import json
import sys

from mecasa import _kernels
from mecasa.bench import bench_kernels, format_kernels


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--dims", default="16-32", help="stage dims of the timed backbone")
    p.add_argument("--json", help="also write the raw timings here")
    args = p.parse_args(argv)

    backends = _kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels unavailable; timing the numpy fallback only", file=sys.stderr)
    dims = tuple(int(d) for d in args.dims.split("-"))
    report = bench_kernels(reps=args.reps, batch=args.batch, dims=dims)
    print(format_kernels(report))
    if len(report["rows"]) == 2:
        fast, slow = (r for r in sorted(report["rows"], key=lambda r: r["backend"] != "compiled"))
        for key in fast:
            if key != "backend":
                print(f"speed-up {key}: {slow[key] / fast[key]:.2f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(report, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

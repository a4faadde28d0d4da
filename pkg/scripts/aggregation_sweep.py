"""Bytes per posted work request as the number of send threads grows.

    python scripts/aggregation_sweep.py --size 64 --count 100000 --threads 1 2 4 8
"""

import argparse

from dxnet.bench import BenchmarkSpec, Pattern, run_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=100_000)
    p.add_argument("--threads", type=int, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--switch-interval", type=float, default=0.001)
    args = p.parse_args()

    print("threads,bytes_per_wr,wrs,mmps")
    for n in args.threads:
        spec = BenchmarkSpec(Pattern.UNIDIR, args.size, args.count, send_threads=n,
                             runs=args.runs, switch_interval=args.switch_interval or None)
        rs = run_benchmark(spec)
        sent = sum(d["counters"]["0"]["bytes_sent"] for d in rs.details)
        wrs = sum(d["counters"]["0"]["data_wrs_posted"] for d in rs.details)
        print(f"{n},{sent / wrs:.0f},{wrs},{rs.mean('mmps'):.4f}", flush=True)


if __name__ == "__main__":
    main()

"""Ping-pong round-trip percentiles over a range of message sizes.

    python scripts/latency_sweep.py --sizes 1 64 1024 16384 --count 10000
"""

import argparse

from dxnet.bench import BenchmarkSpec, Pattern, run_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[1, 64, 1024, 16384])
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--transport", choices=["loopback", "tcp"], default="loopback")
    p.add_argument("--runs", type=int, default=3)
    args = p.parse_args()

    print("size,mean_us,p95_us,p99_us,p999_us")
    for size in args.sizes:
        spec = BenchmarkSpec(Pattern.LATENCY, size, args.count, send_threads=args.threads,
                             transport=args.transport, runs=args.runs)
        rs = run_benchmark(spec)
        cols = [rs.mean(c) for c in ("mean_us", "p95_us", "p99_us", "p999_us")]
        print(f"{size}," + ",".join(f"{v:.1f}" for v in cols), flush=True)


if __name__ == "__main__":
    main()

"""Sequence-stamped stream between two processes over the TCP backend.

Checks exactly-once in-order delivery and buffer conservation, then prints the
per-run throughput rows.

    python scripts/tcp_pair.py --threads 8 --per-thread 100000
"""

import argparse
import sys

from dxnet.bench import BenchmarkSpec, Pattern, emit_results, run_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=8)
    p.add_argument("--per-thread", type=int, default=100_000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--runs", type=int, default=1)
    args = p.parse_args()

    total = args.threads * args.per_thread
    spec = BenchmarkSpec(Pattern.UNIDIR, args.size, total, send_threads=args.threads,
                         transport="tcp", runs=args.runs)
    rs = run_benchmark(spec)
    ok = True
    for det in rs.details:
        got = det["pairs"].get("0->1", 0)
        print(f"run {det['run']}: received {got}/{total}, disorder {det['disorder']}")
        ok &= got == total and det["disorder"] == 0 and det["unexpected"] == 0
    for nid, c in rs.counters.items():
        b = rs.buffers[nid]
        leak = b["posted"] + b["irb"] + b["leased"]
        print(f"node {nid}: bytes sent {c['bytes_sent']} confirmed {c['bytes_confirmed']}, "
              f"buffers not pooled {leak}")
        ok &= c["bytes_sent"] == c["bytes_confirmed"] and leak == 0
    sys.stdout.write(emit_results(rs, "csv"))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

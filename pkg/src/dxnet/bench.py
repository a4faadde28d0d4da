"""Microbenchmarks: uni/bi-directional throughput, all-to-all, ping-pong latency.

Every node runs :func:`node_worker`.  On the loopback transport all nodes
live in this process (one worker thread each); on TCP the launcher starts
one subprocess per node and collects their JSON reports from stdout.
Barrier rounds over a control handler keep the nodes in lock step, so no
cross-process clock comparison is needed: a run lasts as long as its
slowest node.

Throughput counts payload bytes only.  Percentiles use the nearest-rank
method.
"""

from __future__ import annotations

import argparse
import csv
import enum
import io
import json
import math
import os
import socket
import struct
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .config import Config, load_config
from .conn_manager import load_hosts
from .core import Node, local_cluster
from .errors import (ConfigInvalid, CreationTimeout, DXNetError, EmptySamples, NodeNotDiscovered,
                     PeerUnreachable)
from .model import CodecRegistry, Message, MessageHeader, MessageType, ObjectCodec
from .verbs import TcpDevice

COLUMNS = ("pattern", "size", "threads", "handlers", "window", "run", "seconds", "payloadBytes",
           "msgCount", "GBps", "mmps", "mean_us", "p95_us", "p99_us", "p999_us")
PERCENTILE_METHOD = "nearest-rank"

H_DATA, H_WARM, H_ECHO, H_CTRL = 10, 11, 12, 13
WARMUP = 1000
# sender nid, send thread, sequence number
STAMP = struct.Struct("<HHQ")


class Pattern(str, enum.Enum):
    UNIDIR = "unidir"
    BIDIR = "bidir"
    ALL2ALL = "all2all"
    LATENCY = "latency"


@dataclass
class BenchmarkSpec:
    pattern: Pattern = Pattern.UNIDIR
    message_size: int = 64
    # per ordered (sender, receiver) pair
    message_count: int = 10_000
    send_threads: int = 1
    handler_threads: int = 1
    # messages per send thread between fences; 0 streams without fences
    window: int = 0
    transport: str = "loopback"
    nodes: int = 2
    hosts_file: str | None = None
    runs: int = 3
    warmup: int = WARMUP
    # interpreter thread switch interval while the benchmark runs; None keeps the current one
    switch_interval: float | None = 0.001
    config: Config = field(default_factory=Config)

    def __post_init__(self):
        self.pattern = Pattern(self.pattern)
        if self.pattern is Pattern.ALL2ALL and self.nodes < 2:
            raise ConfigInvalid("all-to-all needs at least two nodes")
        if self.pattern is not Pattern.ALL2ALL:
            self.nodes = 2
        if self.transport not in ("loopback", "tcp"):
            raise ConfigInvalid(f"unknown transport {self.transport!r}")
        for name in ("message_size", "send_threads", "handler_threads", "runs"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be positive")
        if self.message_count < 0 or self.window < 0 or self.warmup < 0:
            raise ConfigInvalid("counts must be non-negative")

    def targets(self, nid: int, nids: list) -> list:
        if self.pattern is Pattern.ALL2ALL:
            return [n for n in nids if n != nid]
        if self.pattern is Pattern.BIDIR:
            return [n for n in nids[:2] if n != nid]
        return [nids[1]] if nid == nids[0] else []

    def sources(self, nid: int, nids: list) -> list:
        return [n for n in nids if nid in self.targets(n, nids)]


def scaled_count(base: int, size: int) -> int:
    """Message count for ``size``: constant up to 4 KiB, halved per doubling above."""
    if size <= 4096:
        return base
    return max(1, base >> math.ceil(math.log2(size / 4096)))


# --------------------------------------------------------------------------
# statistics


def percentile(samples, p: float):
    """Nearest rank: the ceil(p/100 * n)-th smallest sample (1-based)."""
    if not len(samples):
        raise EmptySamples("no samples")
    if not 0 < p < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {p}")
    ordered = sorted(samples)
    # exact arithmetic: 99.9/100*1000 must be 999, not 999.0000000000001
    rank = math.ceil(Fraction(str(p)) * len(ordered) / 100)
    return ordered[max(rank, 1) - 1]


@dataclass
class LatencyRecorder:
    samples_ns: list = field(default_factory=list)

    def add(self, ns: int) -> None:
        self.samples_ns.append(ns)

    def extend(self, ns) -> None:
        self.samples_ns.extend(ns)

    def __len__(self):
        return len(self.samples_ns)

    def summary(self) -> dict:
        s = self.samples_ns
        if not s:
            raise EmptySamples("no latency samples")
        ordered = sorted(s)
        return {
            "min_us": ordered[0] / 1e3,
            "mean_us": sum(ordered) / len(ordered) / 1e3,
            "p95_us": percentile(ordered, 95) / 1e3,
            "p99_us": percentile(ordered, 99) / 1e3,
            "p999_us": percentile(ordered, 99.9) / 1e3,
            "max_us": ordered[-1] / 1e3,
        }


# --------------------------------------------------------------------------
# per-node worker


class _Control:
    """Barrier rounds over the control handler, coordinated by the lowest nid."""

    def __init__(self, node, nids):
        self.node = node
        self.nids = nids
        self.leader = nids[0]
        self._seen = {}
        self._cond = threading.Condition()

    def on_message(self, msg):
        tag = msg.payload
        with self._cond:
            self._seen.setdefault(tag, set()).add(msg.source)
            self._cond.notify_all()

    def _wait(self, tag, who, timeout):
        with self._cond:
            ok = self._cond.wait_for(lambda: who <= self._seen.get(tag, set()), timeout)
            self._seen.pop(tag, None)
        if not ok:
            raise PeerUnreachable(f"barrier {tag!r} timed out waiting for {sorted(who)}")

    def barrier(self, tag: str, timeout: float = 60.0) -> None:
        node = self.node
        others = [n for n in self.nids if n != node.nid]
        if not others:
            return
        deadline = time.monotonic() + timeout
        if node.nid == self.leader:
            self._wait(tag, set(others), timeout)
            for n in others:
                self._send(n, tag, deadline)
        else:
            self._send(self.leader, tag, deadline)
            self._wait(tag, {self.leader}, max(0.0, deadline - time.monotonic()))

    def _send(self, dest, tag, deadline):
        # peers may still be starting up
        while True:
            try:
                self.node.send(dest, H_CTRL, tag)
                return
            except (CreationTimeout, NodeNotDiscovered):
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)


class _Receiver:
    def __init__(self, expected: dict):
        self.expected = expected
        self.counts = dict.fromkeys(expected, 0)
        self.next_seq = {}
        self.disorder = 0
        self.unexpected = 0
        self.warm = dict.fromkeys(expected, 0)
        self._pending = sum(1 for v in expected.values() if v)
        self._lock = threading.Lock()
        self.done = threading.Event()
        if not self._pending:
            self.done.set()

    def on_data(self, msg):
        src = msg.source
        p = msg.payload
        if len(p) >= STAMP.size:
            _, tid, seq = STAMP.unpack_from(p)
            key = (src, tid)
            if seq != self.next_seq.get(key, 0):
                self.disorder += 1
            self.next_seq[key] = seq + 1
        n = self.counts.get(src)
        if n is None:
            self.unexpected += 1
            return
        n += 1
        self.counts[src] = n
        if n == self.expected[src]:
            with self._lock:
                self._pending -= 1
                if not self._pending:
                    self.done.set()

    def on_warm(self, msg):
        self.warm[msg.source] = self.warm.get(msg.source, 0) + 1


def _payload(size, nid, tid, seq, pad):
    if size < STAMP.size:
        return pad
    return STAMP.pack(nid, tid, seq) + pad


def _split(total, parts):
    q, r = divmod(total, parts)
    return [q + (i < r) for i in range(parts)]


def _send_stream(node, spec, targets, tid, count, errors):
    size = spec.message_size
    pad = bytes(size - STAMP.size) if size >= STAMP.size else bytes(size)
    window = spec.window
    send = node.send_message
    try:
        for i in range(count):
            for dest in targets:
                header = MessageHeader(MessageType.MESSAGE, H_DATA, 0)
                send(Message(dest, header, _payload(size, node.nid, tid, i, pad)))
            if window and (i + 1) % window == 0:
                for dest in targets:
                    node.send_request(Message.create(dest, H_ECHO, b""))
    except Exception as exc:
        errors.append(exc)


def _ping_pong(node, dest, size, count, samples, errors):
    payload = bytes(size)
    req = node.send_request
    clock = time.perf_counter_ns
    try:
        for _ in range(count):
            t = clock()
            req(Message.create(dest, H_ECHO, payload))
            samples.append(clock() - t)
    except Exception as exc:
        errors.append(exc)


def _run_threads(fn, argsets):
    threads = [threading.Thread(target=fn, args=a, daemon=True) for a in argsets]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def node_worker(node: Node, spec: BenchmarkSpec, nids: list, timeout: float = 600.0) -> dict:
    """Run every repetition of ``spec`` on one node; returns a JSON-able report."""
    ctl = _Control(node, nids)
    node.register_handler(H_CTRL, ctl.on_message)
    node.register_handler(H_ECHO, lambda m: node.send_response(m, m.payload))
    nid = node.nid
    targets = spec.targets(nid, nids)
    sources = spec.sources(nid, nids)
    latency = spec.pattern is Pattern.LATENCY
    runs = []
    ctl.barrier("hello", timeout)
    for run in range(spec.runs):
        expected = {s: 0 if latency else spec.message_count for s in sources}
        rx = _Receiver(expected)
        node.register_handler(H_DATA, rx.on_data)
        node.register_handler(H_WARM, rx.on_warm)
        ctl.barrier(f"reset-{run}", timeout)
        if not latency:
            for dest in targets:
                for _ in range(spec.warmup):
                    node.send(dest, H_WARM, bytes(spec.message_size))
            deadline = time.monotonic() + timeout
            while any(rx.warm[s] < spec.warmup for s in sources):
                if time.monotonic() > deadline:
                    raise PeerUnreachable("warm-up messages did not arrive")
                time.sleep(0.001)
        before = node.counters.snapshot()
        errors, samples = [], []
        ctl.barrier(f"go-{run}", timeout)
        t0 = time.perf_counter()
        if latency:
            if targets:
                warm = []
                _ping_pong(node, targets[0], spec.message_size, spec.warmup, warm, errors)
                t0 = time.perf_counter()
                shares = _split(spec.message_count, spec.send_threads)
                per_thread = [[] for _ in shares]
                _run_threads(_ping_pong, [(node, targets[0], spec.message_size, n, per_thread[i],
                                           errors) for i, n in enumerate(shares)])
                for s in per_thread:
                    samples.extend(s)
        elif targets:
            shares = _split(spec.message_count, spec.send_threads)
            _run_threads(_send_stream, [(node, spec, targets, tid, n, errors)
                                        for tid, n in enumerate(shares)])
        if errors:
            raise errors[0]
        node.flush(timeout)
        if not rx.done.wait(timeout):
            raise PeerUnreachable(f"node {nid} received {rx.counts} of {expected}")
        elapsed = time.perf_counter() - t0
        after = node.counters.snapshot()
        delta = {k: v - getattr(before, k) for k, v in asdict(after).items()}
        ctl.barrier(f"done-{run}", timeout)
        runs.append({
            "run": run,
            "seconds": elapsed,
            "sent": {str(d): (len(samples) if latency else spec.message_count) for d in targets},
            "received": {str(s): c for s, c in rx.counts.items()},
            "disorder": rx.disorder,
            "unexpected": rx.unexpected,
            "samples_ns": samples,
            "counters": delta,
        })
    ctl.barrier("bye", timeout)
    return {"nid": nid, "runs": runs}


# --------------------------------------------------------------------------
# orchestration


@dataclass
class ResultSet:
    spec: dict
    rows: list
    details: list
    counters: dict
    buffers: dict
    metadata: dict = field(default_factory=lambda: {"percentile_method": PERCENTILE_METHOD})

    def mean(self, column: str) -> float:
        vals = [r[column] for r in self.rows if r[column] is not None]
        return sum(vals) / len(vals) if vals else float("nan")


def bench_registry() -> CodecRegistry:
    reg = CodecRegistry()
    reg.register(H_CTRL, ObjectCodec())
    return reg


def aggregate(spec: BenchmarkSpec, reports: list) -> list:
    """Combine per-node reports into one row and one detail record per run."""
    reports = sorted(reports, key=lambda r: r["nid"])
    rows, details = [], []
    size = spec.message_size
    for run in range(spec.runs):
        per = [r["runs"][run] for r in reports]
        seconds = max(p["seconds"] for p in per)
        msg_count = sum(sum(p["sent"].values()) for p in per)
        payload = msg_count * size
        matrix = {}
        for r, p in zip(reports, per):
            for src, c in p["received"].items():
                matrix[f"{src}->{r['nid']}"] = c
        samples = [s for p in per for s in p["samples_ns"]]
        row = dict.fromkeys(COLUMNS)
        row.update(pattern=spec.pattern.value, size=size, threads=spec.send_threads,
                   handlers=spec.handler_threads, window=spec.window, run=run,
                   seconds=seconds, payloadBytes=payload, msgCount=msg_count,
                   GBps=payload / seconds / 1e9, mmps=msg_count / seconds / 1e6)
        if samples:
            lat = LatencyRecorder(samples).summary()
            row.update(mean_us=lat["mean_us"], p95_us=lat["p95_us"], p99_us=lat["p99_us"],
                       p999_us=lat["p999_us"])
        rows.append(row)
        node_gbps = {str(r["nid"]): sum(p["sent"].values()) * size / seconds / 1e9
                     for r, p in zip(reports, per)}
        details.append({
            "run": run,
            "pairs": matrix,
            "per_node_GBps": node_gbps,
            "disorder": sum(p["disorder"] for p in per),
            "unexpected": sum(p["unexpected"] for p in per),
            "counters": {str(r["nid"]): p["counters"] for r, p in zip(reports, per)},
        })
    return rows, details


def _run_loopback(spec):
    cfg = spec.config
    cfg.core.message_handlers = spec.handler_threads
    nodes = local_cluster(spec.nodes, cfg, registry=bench_registry())
    nids = [n.nid for n in nodes]
    reports, errors = [None] * len(nodes), []

    def work(i, node):
        try:
            reports[i] = node_worker(node, spec, nids)
        except Exception as exc:
            errors.append(exc)

    try:
        _run_threads(work, list(enumerate(nodes)))
    finally:
        for n in nodes:
            n.shutdown(flush=not errors)
    if errors:
        raise errors[0]
    counters = {str(n.nid): asdict(n.counters.snapshot()) for n in nodes}
    buffers = {str(n.nid): n.buffer_counts() for n in nodes}
    return reports, counters, buffers


def _free_udp_port(host="127.0.0.1"):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def write_hosts_file(count: int, path, host="127.0.0.1") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nid in range(count):
            fh.write(f"{nid} {host}:{_free_udp_port(host)}\n")


def _run_tcp(spec, argv_common):
    tmp = None
    hosts_file = spec.hosts_file
    if hosts_file is None:
        fd, tmp = tempfile.mkstemp(prefix="dxnet-hosts-", suffix=".txt")
        os.close(fd)
        write_hosts_file(spec.nodes, tmp)
        hosts_file = tmp
    nids = sorted(load_hosts(hosts_file))
    if len(nids) < spec.nodes:
        raise ConfigInvalid(f"hosts file lists {len(nids)} nodes, pattern needs {spec.nodes}")
    nids = nids[:spec.nodes]
    procs = [subprocess.Popen([sys.executable, "-m", "dxnet.bench", *argv_common,
                               "--nodes", hosts_file, "--nid", str(nid),
                               "--node-count", str(spec.nodes)],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
             for nid in nids]
    outs = [p.communicate() for p in procs]
    if tmp:
        os.unlink(tmp)
    for p, (out, err) in zip(procs, outs):
        if p.returncode:
            raise PeerUnreachable(f"worker exited with {p.returncode}: {err.strip()[-500:]}")
    reports = [json.loads(out.strip().splitlines()[-1]) for out, _ in outs]
    counters = {str(r["nid"]): r.pop("final_counters") for r in reports}
    buffers = {str(r["nid"]): r.pop("buffers") for r in reports}
    return reports, counters, buffers


class _switch_interval:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.saved = sys.getswitchinterval()
        if self.seconds is not None:
            sys.setswitchinterval(self.seconds)

    def __exit__(self, *exc):
        sys.setswitchinterval(self.saved)


def run_benchmark(spec: BenchmarkSpec, argv_common=None) -> ResultSet:
    if spec.transport == "loopback":
        with _switch_interval(spec.switch_interval):
            reports, counters, buffers = _run_loopback(spec)
    else:
        reports, counters, buffers = _run_tcp(spec, argv_common or spec_to_argv(spec))
    rows, details = aggregate(spec, reports)
    spec_d = {k: v for k, v in asdict(spec).items() if k != "config"}
    spec_d["pattern"] = spec.pattern.value
    return ResultSet(spec_d, rows, details, counters, buffers)


def tcp_worker(spec: BenchmarkSpec, nid: int, hosts_file: str) -> dict:
    hosts = load_hosts(hosts_file)
    nids = sorted(hosts)[:spec.nodes]
    cfg = spec.config
    cfg.core.message_handlers = spec.handler_threads
    with _switch_interval(spec.switch_interval):
        node = Node(nid, cfg, TcpDevice(hosts[nid][0]), hosts, registry=bench_registry()).start()
        try:
            report = node_worker(node, spec, nids)
        finally:
            node.shutdown()
    report["final_counters"] = asdict(node.counters.snapshot())
    report["buffers"] = node.buffer_counts()
    return report


# --------------------------------------------------------------------------
# output


def emit_results(rs: ResultSet, fmt: str = "csv", out=None, dump_counters: bool = False) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rs.rows:
            w.writerow({k: "" if row[k] is None else row[k] for k in COLUMNS})
        text = buf.getvalue()
    elif fmt == "json":
        doc = {"spec": rs.spec, "metadata": rs.metadata, "columns": list(COLUMNS),
               "rows": rs.rows, "details": rs.details, "buffers": rs.buffers}
        if dump_counters:
            doc["counters"] = rs.counters
        text = json.dumps(doc, indent=2) + "\n"
    else:
        raise ConfigInvalid(f"unknown format {fmt!r}")
    if out is not None:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


# --------------------------------------------------------------------------
# CLI


def build_parser():
    p = argparse.ArgumentParser(prog="bench", description="messaging microbenchmarks")
    p.add_argument("--pattern", choices=[x.value for x in Pattern], default="unidir")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=None,
                   help="messages per sender/receiver pair (default scales with --size)")
    p.add_argument("--send-threads", type=int, default=1)
    p.add_argument("--handlers", type=int, default=1)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--transport", choices=["loopback", "tcp"], default="loopback")
    p.add_argument("--nodes", default=None,
                   help="hosts file (tcp) or node count (all2all on loopback)")
    p.add_argument("--node-count", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--nid", type=int, default=None,
                   help="run only this node of the hosts file (multi-host tcp)")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--warmup", type=int, default=WARMUP)
    p.add_argument("--switch-interval", type=float, default=0.001,
                   help="interpreter thread switch interval in seconds (0 keeps the default)")
    p.add_argument("--config", default=None, help="key=value configuration file")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--dump-counters", action="store_true")
    return p


def spec_from_args(args) -> BenchmarkSpec:
    nodes, hosts_file = 4 if args.pattern == "all2all" else 2, None
    if args.nodes is not None:
        if args.nodes.isdigit():
            nodes = int(args.nodes)
        else:
            hosts_file = args.nodes
            if args.pattern == "all2all" and args.node_count is None:
                nodes = len(load_hosts(hosts_file))
    if args.node_count is not None:
        nodes = args.node_count
    count = args.count if args.count is not None else scaled_count(10_000, args.size)
    cfg = load_config(args.config) if args.config else Config()
    return BenchmarkSpec(args.pattern, args.size, count, args.send_threads, args.handlers,
                         args.window, args.transport, nodes, hosts_file, args.runs,
                         args.warmup, args.switch_interval or None, cfg)


def spec_to_argv(spec: BenchmarkSpec, config_path=None) -> list:
    argv = ["--pattern", spec.pattern.value, "--size", str(spec.message_size),
            "--count", str(spec.message_count), "--send-threads", str(spec.send_threads),
            "--handlers", str(spec.handler_threads), "--window", str(spec.window),
            "--transport", spec.transport, "--runs", str(spec.runs),
            "--warmup", str(spec.warmup), "--switch-interval", str(spec.switch_interval or 0)]
    if config_path:
        argv += ["--config", config_path]
    return argv


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(args)
        if args.nid is not None:
            if not spec.hosts_file:
                raise ConfigInvalid("--nid needs --nodes=FILE")
            report = tcp_worker(spec, args.nid, spec.hosts_file)
            print(json.dumps(report))
            return 0
        common = spec_to_argv(spec, args.config)
        rs = run_benchmark(spec, common)
        text = emit_results(rs, args.format, args.out, args.dump_counters)
        if args.out is None:
            sys.stdout.write(text)
        return 0
    except (DXNetError, OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Sign/verify latency of GMAC against RSA signatures on short messages."""

from __future__ import annotations

import csv
import enum
import json
import os
import secrets
import statistics
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding, rsa

from qgrid.authcodec import gmac_tag
from qgrid.errors import ExportError, KeygenTimeout

GMAC_SIZES = (128, 192, 256)
RSA_SIZES = (1024, 2048, 3072, 4096)
RSA_EXTENDED = (8192,)
WARMUP = 8

# (sign, verify) means in ms for 256-byte messages on a Raspberry Pi 3B+.
# Printed next to local results for context, never asserted.
REFERENCE_MS = {
    ("GMAC", 256): (0.8895, 0.9309),
    ("RSA", 1024): (6.3507, 2.2864),
    ("RSA", 2048): (25.2802, 4.8489),
    ("RSA", 3072): (69.9515, 8.3635),
    ("RSA", 4096): (148.4858, 12.9215),
}


class Operation(enum.Enum):
    SIGN = "SIGN"
    VERIFY = "VERIFY"


@dataclass
class BenchConfig:
    message_len_bytes: int = 256
    samples: int = 512
    gmac_key_bits: Sequence[int] = GMAC_SIZES
    rsa_key_bits: Sequence[int] = RSA_SIZES
    keygen_timeout_s: float = 120.0

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        if self.message_len_bytes <= 0:
            raise ValueError("message_len_bytes must be positive")
        bad = [b for b in self.gmac_key_bits if b not in GMAC_SIZES]
        if bad:
            raise ValueError(f"unsupported GMAC key sizes: {bad}")
        bad = [b for b in self.rsa_key_bits if b not in RSA_SIZES + RSA_EXTENDED]
        if bad:
            raise ValueError(f"unsupported RSA key sizes: {bad}")


@dataclass
class BenchResult:
    operation: Operation
    scheme: str
    key_bits: int
    mean_ms: float
    stderr_ms: float
    samples: int

    def row(self) -> dict:
        d = asdict(self)
        d["operation"] = self.operation.value
        return d


def summarize(times_ms: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (sample std-dev / sqrt(n))."""
    n = len(times_ms)
    if n < 2:
        raise ValueError("need at least two samples")
    return statistics.fmean(times_ms), statistics.stdev(times_ms) / n**0.5


def _time_each(fn: Callable[[int], object], samples: int) -> list[float]:
    for i in range(WARMUP):
        fn(i % samples)
    out = []
    clock = time.perf_counter_ns
    for i in range(samples):
        t0 = clock()
        fn(i)
        out.append((clock() - t0) / 1e6)
    return out


def _result(op: Operation, scheme: str, bits: int, times: list[float]) -> BenchResult:
    mean, err = summarize(times)
    return BenchResult(op, scheme, bits, mean, err, len(times))


def bench_gmac(cfg: BenchConfig) -> list[BenchResult]:
    """Time tag creation and tag verification with fresh keys, IVs and messages."""
    results = []
    n = cfg.samples
    for bits in cfg.gmac_key_bits:
        keys = [secrets.token_bytes(bits // 8) for _ in range(n)]
        ivs = [secrets.token_bytes(16) for _ in range(n)]
        msgs = [secrets.token_bytes(cfg.message_len_bytes) for _ in range(n)]
        tags = [b""] * n

        def sign(i):
            tags[i] = gmac_tag(keys[i], ivs[i], msgs[i])

        def verify(i):
            if not secrets.compare_digest(gmac_tag(keys[i], ivs[i], msgs[i]), tags[i]):
                raise AssertionError("GMAC verification failed during benchmark")

        sign_times = _time_each(sign, n)
        results.append(_result(Operation.SIGN, "GMAC", bits, sign_times))
        results.append(_result(Operation.VERIFY, "GMAC", bits, _time_each(verify, n)))
    return results


def generate_rsa_key(bits: int, timeout_s: float):
    box: dict = {}

    def work():
        box["key"] = rsa.generate_private_key(public_exponent=65537, key_size=bits)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    t.join(timeout_s)
    if "key" not in box:
        raise KeygenTimeout(f"RSA-{bits} key generation exceeded {timeout_s}s", bits=bits)
    return box["key"]


def bench_rsa_signature(cfg: BenchConfig) -> list[BenchResult]:
    """RSA PKCS#1 v1.5 with SHA-256 over the message, one key per size."""
    results = []
    n = cfg.samples
    pad, digest = padding.PKCS1v15(), hashes.SHA256()
    for bits in cfg.rsa_key_bits:
        priv = generate_rsa_key(bits, cfg.keygen_timeout_s)
        pub = priv.public_key()
        msgs = [secrets.token_bytes(cfg.message_len_bytes) for _ in range(n)]
        sigs = [b""] * n

        def sign(i):
            sigs[i] = priv.sign(msgs[i], pad, digest)

        def verify(i):
            try:
                pub.verify(sigs[i], msgs[i], pad, digest)
            except InvalidSignature as exc:
                raise AssertionError("RSA verification failed during benchmark") from exc

        sign_times = _time_each(sign, n)
        results.append(_result(Operation.SIGN, "RSA", bits, sign_times))
        results.append(_result(Operation.VERIFY, "RSA", bits, _time_each(verify, n)))
    return results


def run(cfg: BenchConfig) -> list[BenchResult]:
    return bench_gmac(cfg) + bench_rsa_signature(cfg)


# reporting ---------------------------------------------------------------

COLUMNS = ("operation", "scheme", "key_bits", "mean_ms", "stderr_ms", "samples")


def bench_report(results: Sequence[BenchResult], path: str | os.PathLike, fmt: str = "csv") -> None:
    if not results:
        raise ExportError("no benchmark results")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if fmt == "json":
                json.dump([r.row() for r in results], fh, indent=2)
                fh.write("\n")
            else:
                w = csv.DictWriter(fh, COLUMNS)
                w.writeheader()
                for r in results:
                    row = r.row()
                    row["mean_ms"] = f"{r.mean_ms:.6f}"
                    row["stderr_ms"] = f"{r.stderr_ms:.6f}"
                    w.writerow(row)
    except OSError as exc:
        if os.path.exists(path):
            os.unlink(path)
        raise ExportError(str(exc), path=str(path)) from exc


def load_report(path: str | os.PathLike) -> list[BenchResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            BenchResult(
                Operation(row["operation"]),
                row["scheme"],
                int(row["key_bits"]),
                float(row["mean_ms"]),
                float(row["stderr_ms"]),
                int(row["samples"]),
            )
            for row in csv.DictReader(fh)
        ]


def chart_series(results: Iterable[BenchResult]) -> dict[tuple[str, str], list[tuple[int, float, float]]]:
    """Group into ``(scheme, operation) -> [(key_bits, mean, stderr), ...]`` sorted by key size."""
    series: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
    for r in results:
        series.setdefault((r.scheme, r.operation.value), []).append((r.key_bits, r.mean_ms, r.stderr_ms))
    return {k: sorted(v) for k, v in sorted(series.items())}


def write_chart_series(results: Iterable[BenchResult], path: str | os.PathLike) -> None:
    """Whitespace-separated blocks, one per (scheme, operation), gnuplot ``index``-ready."""
    with open(path, "w", encoding="utf-8") as fh:
        for (scheme, op), points in chart_series(results).items():
            fh.write(f"# {scheme} {op}\n# key_bits mean_ms stderr_ms\n")
            for bits, mean, err in points:
                fh.write(f"{bits} {mean:.6f} {err:.6f}\n")
            fh.write("\n\n")

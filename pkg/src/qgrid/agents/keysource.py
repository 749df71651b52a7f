"""Simulated key service writing identical key files for both nodes."""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field

from qgrid.errors import ConfigError
from qgrid.keyframe import KeyFileWriter, make_frame


class JitterModel(enum.Enum):
    CONSTANT = "CONSTANT"
    GAUSSIAN = "GAUSSIAN"
    DROPOUT = "DROPOUT"


@dataclass
class KeySourceConfig:
    mean_keys_per_sec: float = 2.0
    jitter_model: JitterModel = JitterModel.CONSTANT
    duration_s: float = 600.0
    sigma: float = 0.2  # GAUSSIAN: relative std-dev of the per-second rate
    dropouts: list[tuple[float, float]] = field(default_factory=list)  # (start_s, length_s)
    warmup_keys: int = 0
    seed: int = 0

    def __post_init__(self):
        self.jitter_model = JitterModel(self.jitter_model)
        self.dropouts = [(float(a), float(b)) for a, b in self.dropouts]
        if self.mean_keys_per_sec <= 0:
            raise ConfigError("mean_keys_per_sec must be positive", field="key_source.mean_keys_per_sec")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive", field="key_source.duration_s")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative", field="key_source.sigma")
        if self.warmup_keys < 0:
            raise ConfigError("warmup_keys must be non-negative", field="key_source.warmup_keys")
        if self.jitter_model is JitterModel.DROPOUT and not self.dropouts:
            raise ConfigError("DROPOUT model needs at least one window", field="key_source.dropouts")


class KeySource:
    """Emits frames at a time-varying rate to every sink.

    The rate is piecewise constant over one-second buckets. Frames due by
    time ``t`` are ``floor(integral of rate over [0, t])``, so a constant
    2 keys/s source emits exactly 20 frames in 10 s. Dropout windows force
    the rate to zero regardless of the jitter model.
    """

    def __init__(self, cfg: KeySourceConfig, sinks):
        self.cfg = cfg
        self.writers = [s if isinstance(s, KeyFileWriter) else KeyFileWriter(s) for s in sinks]
        self._keys = random.Random(cfg.seed)
        self._jitter = random.Random(cfg.seed ^ 0x5EED)
        self._rates: list[float] = []
        self._integral = [0.0]
        self.next_id = 1
        self.emitted = 0
        self.history: list[tuple[int, int]] = []  # (t_ms, cumulative frames emitted)
        self._emit(cfg.warmup_keys)

    def rate_at(self, second: int) -> float:
        while len(self._rates) <= second:
            k = len(self._rates)
            r = self.cfg.mean_keys_per_sec
            if self.cfg.jitter_model is JitterModel.GAUSSIAN:
                r = max(0.0, r * (1.0 + self._jitter.gauss(0.0, self.cfg.sigma)))
            if any(a <= k < a + n for a, n in self.cfg.dropouts):
                r = 0.0
            self._rates.append(r)
            self._integral.append(self._integral[-1] + r)
        return self._rates[second]

    def due(self, t_ms: int) -> int:
        """Frames (excluding warmup) due by elapsed time ``t_ms``."""
        t_ms = min(t_ms, int(self.cfg.duration_s * 1000))
        sec, frac = divmod(t_ms, 1000)
        self.rate_at(sec)
        return math.floor(self._integral[sec] + self._rates[sec] * frac / 1000 + 1e-9)

    def advance_to(self, t_ms: int) -> int:
        n = self.due(t_ms) - (self.emitted - self.cfg.warmup_keys)
        if n > 0:
            self._emit(n)
            self.history.append((t_ms, self.emitted))
        return max(n, 0)

    def _emit(self, n: int) -> None:
        for _ in range(n):
            frame = make_frame(self.next_id, self._keys.randbytes(32))
            for w in self.writers:
                w.write(frame)
            self.next_id += 1
            self.emitted += 1

    def close(self) -> None:
        for w in self.writers:
            w.close()


def run_key_source(cfg: KeySourceConfig, sinks, step_ms: int = 1000) -> int:
    """Run the source over its whole duration without real-time pacing."""
    src = KeySource(cfg, sinks)
    end = int(cfg.duration_s * 1000)
    for t in range(0, end + step_ms, step_ms):
        src.advance_to(min(t, end))
    src.close()
    return src.emitted

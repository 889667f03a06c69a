"""Latency harness: the encrypted full-image pipeline against the patch path.

Stage durations add up to the total by construction. Transmission is modeled
(rtt + bytes/bandwidth) so results are deterministic; wall-clock timing is
reserved for crypto and inference. A constant-timing source turns published
stage durations into a replayable fixture, separating "reproduce the
arithmetic" from "measure this machine".
"""

import json
import time
from dataclasses import dataclass

import numpy as np

from . import crypto
from .errors import ConfigError, UndefinedMetricError

TRADITIONAL = "traditional"
PATCH_PATH = "patch"

STAGES = ("t_trans", "t_encry", "t_decry", "t_infer")


@dataclass(frozen=True)
class ChannelConfig:
    rtt_ms: float = 3.0
    bandwidth_bytes_per_ms: float = 1000.0

    def __post_init__(self):
        if self.rtt_ms < 0:
            raise ConfigError(f"rtt_ms must be >= 0, got {self.rtt_ms}")
        if self.bandwidth_bytes_per_ms <= 0:
            raise ConfigError(f"bandwidth must be > 0, got "
                              f"{self.bandwidth_bytes_per_ms}")


@dataclass(frozen=True)
class LatencyBreakdown:
    mode: str
    t_trans_ms: float
    t_encry_ms: float
    t_decry_ms: float
    t_infer_ms: float

    def __post_init__(self):
        for name in ("t_trans_ms", "t_encry_ms", "t_decry_ms", "t_infer_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.mode == PATCH_PATH and (self.t_encry_ms or self.t_decry_ms):
            raise ConfigError("patch-path breakdowns must report zero "
                              "encryption and decryption time")

    @property
    def t_total_ms(self):
        return self.t_trans_ms + self.t_encry_ms + self.t_decry_ms + self.t_infer_ms

    def to_dict(self):
        return {"mode": self.mode, "t_trans": self.t_trans_ms,
                "t_encry": self.t_encry_ms, "t_decry": self.t_decry_ms,
                "t_infer": self.t_infer_ms, "t_total": self.t_total_ms}


def simulate_transmission(payload_bytes, ch):
    if payload_bytes < 0:
        raise ConfigError(f"payload must be >= 0 bytes, got {payload_bytes}")
    return ch.rtt_ms + payload_bytes / ch.bandwidth_bytes_per_ms


# ------------------------------------------------------------ timing sources

class WallClockTiming:
    """Runs the stage callable and reports elapsed milliseconds."""

    constants = False

    def measure(self, stage, fn):
        t0 = time.perf_counter()
        result = fn()
        return result, (time.perf_counter() - t0) * 1e3


class FixedTimings:
    """Replays a table of stage durations; stage callables never run."""

    constants = True

    def __init__(self, table):
        missing = [s for s in STAGES if s not in table]
        if missing:
            raise ConfigError(f"timing fixture is missing stages {missing}")
        self.table = {s: float(table[s]) for s in STAGES}

    def measure(self, stage, fn):
        return None, self.table[stage]


def load_fixture(path):
    """JSON with a per-mode stage table:
    {"traditional": {"t_trans":..,..}, "ours": {...}}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        trad = FixedTimings(raw["traditional"])
        patch = FixedTimings(raw.get("ours", raw.get("patch")))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"fixture {path} needs 'traditional' and 'ours' "
                          "stage tables") from exc
    return trad, patch


# -------------------------------------------------------------- serialisation

def image_bytes(image):
    """8-bit serialisation of a (1,3,H,W) float image, the sensitive payload."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).tobytes()


def patch_bytes(patches):
    """8-bit serialisation of PatchSet patches; never sees the full image."""
    return b"".join(np.clip(np.rint(p * 255.0), 0, 255).astype(np.uint8).tobytes()
                    for p in patches)


# ----------------------------------------------------------------- pipelines

def run_pipeline(mode, payload, infer, ch, timing, key=None, ladder=None):
    """One end-to-end pass, returning its LatencyBreakdown.

    Traditional: encrypt payload (timed) -> transmit ciphertext (modeled) ->
    decrypt (timed) -> infer (timed). Patch path skips the crypto stages.
    `infer` is a zero-argument callable running model inference.
    """
    if mode == TRADITIONAL:
        if timing.constants:
            t = timing.table
            return LatencyBreakdown(TRADITIONAL, t["t_trans"], t["t_encry"],
                                    t["t_decry"], t["t_infer"])
        if key is None or ladder is None:
            raise ConfigError("traditional mode needs a key and a nonce ladder")
        nonce = ladder.issue()
        sealed, t_enc = timing.measure("t_encry", lambda: crypto.encrypt(payload, key, nonce))
        wire_len = crypto.NONCE_LEN + len(sealed.ciphertext)
        t_trans = simulate_transmission(wire_len, ch)
        plain, t_dec = timing.measure("t_decry", lambda: crypto.decrypt(sealed, key))
        if plain != payload:
            raise ConfigError("round-trip mismatch in the traditional pipeline")
        _, t_inf = timing.measure("t_infer", infer)
        return LatencyBreakdown(TRADITIONAL, t_trans, t_enc, t_dec, t_inf)

    if mode == PATCH_PATH:
        if timing.constants:
            t = timing.table
            return LatencyBreakdown(PATCH_PATH, t["t_trans"], t["t_encry"],
                                    t["t_decry"], t["t_infer"])
        t_trans = simulate_transmission(len(payload), ch)
        _, t_inf = timing.measure("t_infer", infer)
        return LatencyBreakdown(PATCH_PATH, t_trans, 0.0, 0.0, t_inf)

    raise ConfigError(f"unknown pipeline mode {mode!r}")


# ---------------------------------------------------------------- comparison

@dataclass(frozen=True)
class ComparisonReport:
    traditional: LatencyBreakdown
    patch: LatencyBreakdown
    ratio: float
    stage_deltas: dict           # patch - traditional, per stage

    def to_dict(self):
        return {"traditional": self.traditional.to_dict(),
                "ours": self.patch.to_dict(),
                "ratio": self.ratio, "stage_deltas": self.stage_deltas}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self):
        header = (f"{'approach':<13}{'transmission(ms)':>17}{'encry(ms)':>11}"
                  f"{'decry(ms)':>11}{'inference(ms)':>15}{'total(ms)':>11}")
        rows = []
        for name, b in (("ours", self.patch), ("traditional", self.traditional)):
            rows.append(f"{name:<13}{b.t_trans_ms:>17.2f}{b.t_encry_ms:>11.2f}"
                        f"{b.t_decry_ms:>11.2f}{b.t_infer_ms:>15.2f}"
                        f"{b.t_total_ms:>11.2f}")
        rows.append(f"total latency ratio (ours/traditional): {self.ratio * 100:.2f}%")
        return "\n".join([header] + rows)


def compare(traditional, patch):
    if traditional.t_total_ms == 0:
        raise UndefinedMetricError("latency ratio undefined: traditional total is 0")
    deltas = {
        "t_trans": patch.t_trans_ms - traditional.t_trans_ms,
        "t_encry": patch.t_encry_ms - traditional.t_encry_ms,
        "t_decry": patch.t_decry_ms - traditional.t_decry_ms,
        "t_infer": patch.t_infer_ms - traditional.t_infer_ms,
        "t_total": patch.t_total_ms - traditional.t_total_ms,
    }
    return ComparisonReport(traditional=traditional, patch=patch,
                            ratio=patch.t_total_ms / traditional.t_total_ms,
                            stage_deltas=deltas)

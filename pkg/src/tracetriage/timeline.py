"""Deterministic temporal normalization over a captured session.

All comparisons run on integer microseconds so window boundaries do not
depend on floating-point accidents; results are reported as float seconds
relative to the session epoch.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .bundle import EvidenceBundle, FrameRecord, NetworkRecord, from_micros, to_micros
from .errors import NoNetworkError, OutOfSessionError, PreEpochError

WINDOW_HALF_WIDTH = 0.5


@dataclass(frozen=True)
class EvidenceWindow:
    center: float
    half_width: float = WINDOW_HALF_WIDTH

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.center < 0:
            raise ValueError("window center must be >= 0")

    def bounds_us(self) -> tuple[int, int]:
        c = to_micros(self.center)
        hw = to_micros(self.half_width)
        return max(0, c - hw), c + hw

    @property
    def start(self) -> float:
        return from_micros(self.bounds_us()[0])

    @property
    def end(self) -> float:
        return from_micros(self.bounds_us()[1])


@dataclass(frozen=True)
class DualSeekResult:
    frame: Optional[FrameRecord]
    network_burst: list = field(default_factory=list)
    window: Optional[EvidenceWindow] = None


def establish_epoch(network: Sequence[NetworkRecord]) -> float:
    """Session zero time: the start of the earliest network record."""
    if not network:
        raise NoNetworkError("cannot establish an epoch without network records")
    return from_micros(min(to_micros(rec.started_at) for rec in network))


def to_relative(t_abs: float, epoch: float) -> float:
    delta = to_micros(t_abs) - to_micros(epoch)
    if delta < 0:
        raise PreEpochError(f"timestamp {t_abs} precedes epoch {epoch}")
    return from_micros(delta)


def seek_frame(frames: Sequence[FrameRecord], t: float) -> Optional[FrameRecord]:
    """The frame on screen at ``t``: largest ``t_rel <= t``, or None."""
    keys = [to_micros(fr.t_rel) for fr in frames]
    i = bisect.bisect_right(keys, to_micros(t))
    return frames[i - 1] if i else None


def window_query(network: Sequence[NetworkRecord], epoch: float, w: EvidenceWindow) -> list[NetworkRecord]:
    """Records whose relative start lies in the closed window, in log order."""
    lo, hi = w.bounds_us()
    t0 = to_micros(epoch)
    keys = [to_micros(rec.started_at) - t0 for rec in network]
    return list(network[bisect.bisect_left(keys, lo):bisect.bisect_right(keys, hi)])


def dual_seek(bundle: EvidenceBundle, t: float, half_width: float = WINDOW_HALF_WIDTH) -> DualSeekResult:
    us = to_micros(t)
    if us < 0 or us > to_micros(bundle.session_end):
        raise OutOfSessionError(f"t={t} outside session [0, {bundle.session_end}]")
    window = EvidenceWindow(from_micros(us), half_width)
    return DualSeekResult(
        frame=seek_frame(bundle.frames, t),
        network_burst=window_query(bundle.network, bundle.epoch_t0, window),
        window=window,
    )

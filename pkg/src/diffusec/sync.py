"""Timestep synchronization between sender and receiver.

Before semantic traffic starts, the sender probes the channel with a known
pilot; the receiver measures the SNR, picks a timestep plan, and assigns
the diffusing step count back to the sender, which acknowledges. Frames
are fixed binary records so a socket transport could replace the
in-process queues without touching the state machines.

Frame layout (all integers and reals little-endian, reals as f32):

    0-1   magic "DS"
    2     version (0x01)
    3     type: Probe=0x01, TimestepAssign=0x02, Ack=0x03
    4-7   session_id (u32)
    8-9   payload length (u16)
    10-   payload
          Probe:  64 x f32 pilot samples
          Assign: t_d (u16), t_plus (u16), measured_snr_db (f32)
          Ack:    empty
"""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .channel import ChannelConfig, transmit
from .ddpm import PlanBounds, TimestepPlan
from .errors import (ConstraintError, FrameError, HandshakeError,
                     IncompleteFrameError, ProtocolError, UnsupportedMessageError)
from .tensor import Rng, make_rng

MAGIC = b"DS"
VERSION = 1
TYPE_PROBE = 0x01
TYPE_ASSIGN = 0x02
TYPE_ACK = 0x03
HEADER = struct.Struct("<2sBBIH")

PILOT_LENGTH = 64
PILOT_SEED = 0xD1F5  # published: both ends derive the same pilot from it

SNR_CAP_DB = 120.0
_ERROR_FLOOR = 1e-12


def make_pilot() -> np.ndarray:
    """The well-known unit-average-power pilot both ends agree on."""
    v = make_rng(PILOT_SEED).standard_normal(PILOT_LENGTH)
    v = v / np.sqrt(np.mean(v * v))
    return v.astype(np.float32)


@dataclass(frozen=True)
class Probe:
    session_id: int
    pilot: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, Probe) and self.session_id == other.session_id
                and np.array_equal(self.pilot, other.pilot))


@dataclass(frozen=True)
class TimestepAssign:
    session_id: int
    t_d: int
    t_plus: int
    measured_snr_db: float


@dataclass(frozen=True)
class Ack:
    session_id: int


SyncMessage = Probe | TimestepAssign | Ack


def encode_message(m: SyncMessage) -> bytes:
    if isinstance(m, Probe):
        kind, payload = TYPE_PROBE, np.asarray(m.pilot, dtype="<f4").tobytes()
    elif isinstance(m, TimestepAssign):
        kind = TYPE_ASSIGN
        payload = struct.pack("<HHf", m.t_d, m.t_plus, m.measured_snr_db)
    elif isinstance(m, Ack):
        kind, payload = TYPE_ACK, b""
    else:
        raise ProtocolError(f"cannot encode {type(m).__name__}")
    if len(payload) > 0xFFFF:
        raise FrameError("payload too large for one frame")
    return HEADER.pack(MAGIC, VERSION, kind, m.session_id, len(payload)) + payload


def decode_message(data: bytes, bounds: PlanBounds = PlanBounds()) -> SyncMessage:
    """Strict inverse of encode_message; assignments are validated against
    the step budget before they are accepted."""
    if len(data) < HEADER.size:
        raise IncompleteFrameError(f"frame header needs {HEADER.size} bytes, got {len(data)}")
    magic, version, kind, session_id, length = HEADER.unpack(data[:HEADER.size])
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported frame version {version}")
    payload = data[HEADER.size:]
    if len(payload) < length:
        raise IncompleteFrameError("frame shorter than its declared payload")
    if len(payload) > length:
        raise ProtocolError("trailing bytes after declared payload")
    if kind == TYPE_PROBE:
        if length != 4 * PILOT_LENGTH:
            raise ProtocolError(f"probe payload must be {4 * PILOT_LENGTH} bytes")
        pilot = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        return Probe(session_id=session_id, pilot=pilot)
    if kind == TYPE_ASSIGN:
        if length != 8:
            raise ProtocolError("assign payload must be 8 bytes")
        t_d, t_plus, snr = struct.unpack("<HHf", payload)
        if not 1 <= t_d <= bounds.t_d_max:
            raise ConstraintError(f"assigned t_d={t_d} outside [1, {bounds.t_d_max}]")
        if t_plus > bounds.t_plus_max:
            raise ConstraintError(f"assigned t_plus={t_plus} above {bounds.t_plus_max}")
        if not t_d + t_plus < bounds.t_d_max:
            raise ConstraintError(
                f"assigned t_d + t_plus = {t_d + t_plus} must stay below {bounds.t_d_max}")
        return TimestepAssign(session_id=session_id, t_d=t_d, t_plus=t_plus,
                              measured_snr_db=snr)
    if kind == TYPE_ACK:
        if length != 0:
            raise ProtocolError("ack carries no payload")
        return Ack(session_id=session_id)
    raise UnsupportedMessageError(f"unknown frame type 0x{kind:02x}")


def measure_snr(received_pilot: np.ndarray, known_pilot: np.ndarray) -> float:
    """SNR estimate in dB from the pilot error power, capped at 120 dB."""
    received = np.asarray(received_pilot, dtype=np.float64)
    known = np.asarray(known_pilot, dtype=np.float64)
    if received.shape != known.shape:
        raise ProtocolError("pilot length mismatch")
    p_known = float(np.mean(known * known))
    p_error = max(float(np.mean((received - known) ** 2)), _ERROR_FLOOR)
    return min(10.0 * np.log10(p_known / p_error), SNR_CAP_DB)


# ---------------------------------------------------------------------------
# Sessions and the handshake


class Phase(enum.IntEnum):
    IDLE = 0
    PROBED = 1
    ASSIGNED = 2
    ACKED = 3


@dataclass
class SyncSession:
    """Per-endpoint handshake state plus the re-sync batch counter."""

    session_id: int
    role: str  # "sender" | "receiver"
    phase: Phase = Phase.IDLE
    plan: TimestepPlan | None = None
    measured_snr_db: float | None = None
    sync_interval: int = 32
    batches_since_sync: int = 0

    def advance(self, phase: Phase) -> None:
        if phase < self.phase:
            raise HandshakeError(f"phase cannot move backwards ({self.phase} -> {phase})")
        self.phase = phase

    def synced(self) -> bool:
        return self.phase == Phase.ACKED and self.batches_since_sync < self.sync_interval

    def require_synced(self) -> None:
        """Guard called before each semantic batch goes out."""
        if not self.synced():
            raise HandshakeError("timesteps are not synchronized; run the handshake first")

    def note_batch(self) -> None:
        self.batches_since_sync += 1
        if self.batches_since_sync >= self.sync_interval:
            self.phase = Phase.IDLE
            self.batches_since_sync = 0


class DuplexTransport:
    """Two in-process byte queues; endpoint('a') sends on one and receives
    on the other."""

    def __init__(self):
        self._queues = {"a": deque(), "b": deque()}  # keyed by the receiving side

    def send(self, from_side: str, frame: bytes) -> None:
        self._queues["b" if from_side == "a" else "a"].append(frame)

    def recv(self, side: str) -> bytes | None:
        q = self._queues[side]
        return q.popleft() if q else None


class LossyTransport(DuplexTransport):
    """Test double: drops each frame with the given probability."""

    def __init__(self, drop_probability: float, rng: Rng):
        super().__init__()
        self.drop_probability = drop_probability
        self.rng = rng

    def send(self, from_side: str, frame: bytes) -> None:
        if self.rng.random() >= self.drop_probability:
            super().send(from_side, frame)


Selector = Callable[[float], tuple[int, int]]


def run_handshake(sender: SyncSession, receiver: SyncSession, selector: Selector,
                  channel: ChannelConfig, rng: Rng,
                  transport: DuplexTransport | None = None,
                  bounds: PlanBounds = PlanBounds(),
                  max_attempts: int = 3) -> TimestepPlan:
    """One probe/assign/ack round; both sessions end Acked with the same plan.

    The pilot samples pass through the simulated channel, so the receiver
    works from a measured (not true) SNR; the control frames themselves are
    assumed reliable. A selector output violating the step budget aborts
    the handshake without installing a plan on either side.
    """
    transport = transport or DuplexTransport()
    pilot = make_pilot()
    frames = 0
    for _ in range(max_attempts):
        transport.send("a", encode_message(Probe(sender.session_id, pilot)))
        frames += 1
        sender.advance(Phase.PROBED)

        raw = transport.recv("b")
        if raw is None:
            continue
        probe = decode_message(raw, bounds)
        if not isinstance(probe, Probe):
            raise ProtocolError(f"expected a probe, got {type(probe).__name__}")
        receiver.advance(Phase.PROBED)
        received_pilot = transmit(probe.pilot.reshape(1, -1), channel, rng)[0]
        measured = measure_snr(received_pilot, pilot)
        receiver.measured_snr_db = measured
        t_d, t_plus = selector(measured)
        plan = TimestepPlan(int(t_d), int(t_plus), bounds)  # aborts on a bad selector
        transport.send("b", encode_message(
            TimestepAssign(receiver.session_id, plan.t_d, plan.t_plus, measured)))
        frames += 1
        receiver.plan = plan
        receiver.advance(Phase.ASSIGNED)

        raw = transport.recv("a")
        if raw is None:
            continue
        assign = decode_message(raw, bounds)
        if not isinstance(assign, TimestepAssign):
            raise ProtocolError(f"expected an assignment, got {type(assign).__name__}")
        sender.plan = TimestepPlan(assign.t_d, assign.t_plus, bounds)
        sender.measured_snr_db = assign.measured_snr_db
        sender.advance(Phase.ASSIGNED)
        transport.send("a", encode_message(Ack(sender.session_id)))
        frames += 1
        sender.advance(Phase.ACKED)
        sender.batches_since_sync = 0

        raw = transport.recv("b")
        if raw is None:
            continue
        ack = decode_message(raw, bounds)
        if not isinstance(ack, Ack):
            raise ProtocolError(f"expected an ack, got {type(ack).__name__}")
        receiver.advance(Phase.ACKED)
        receiver.batches_since_sync = 0
        return receiver.plan
    raise HandshakeError(f"no reply after {max_attempts} attempts ({frames} frames sent)")

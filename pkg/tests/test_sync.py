import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffusec.channel import ChannelConfig
from diffusec.ddpm import PlanBounds
from diffusec.errors import (ConstraintError, FrameError, HandshakeError,
                             IncompleteFrameError, PlanError, ProtocolError,
                             UnsupportedMessageError)
from diffusec.sync import (Ack, DuplexTransport, LossyTransport, Phase, Probe,
                           SyncSession, TimestepAssign, decode_message,
                           encode_message, make_pilot, measure_snr,
                           run_handshake, PILOT_LENGTH)
from diffusec.tensor import make_rng

BOUNDS = PlanBounds(50, 49)


def test_ack_frame_bytes_exactly():
    frame = encode_message(Ack(session_id=7))
    assert frame == bytes([0x44, 0x53, 0x01, 0x03, 0x07, 0x00, 0x00, 0x00,
                           0x00, 0x00])


def test_probe_frame_length():
    frame = encode_message(Probe(session_id=1, pilot=make_pilot()))
    assert len(frame) == 10 + 64 * 4 == 266


def test_round_trip_all_variants():
    for message in (Probe(3, make_pilot()),
                    TimestepAssign(9, t_d=20, t_plus=15, measured_snr_db=4.5),
                    Ack(123456)):
        back = decode_message(encode_message(message))
        if isinstance(message, TimestepAssign):
            assert back.session_id == message.session_id
            assert (back.t_d, back.t_plus) == (message.t_d, message.t_plus)
            assert back.measured_snr_db == pytest.approx(message.measured_snr_db)
        else:
            assert back == message


@settings(max_examples=200, deadline=None)
@given(session=st.integers(0, 2 ** 32 - 1),
       t_d=st.integers(1, 49),
       t_plus=st.integers(0, 48),
       snr=st.floats(-60, 60, allow_nan=False, width=32))
def test_assign_round_trip_property(session, t_d, t_plus, snr):
    if t_d + t_plus >= 50:
        t_plus = 49 - t_d
    m = TimestepAssign(session, t_d, t_plus, snr)
    back = decode_message(encode_message(m))
    assert (back.session_id, back.t_d, back.t_plus) == (session, t_d, t_plus)
    assert back.measured_snr_db == np.float32(snr)


def test_decode_rejects_malformed_frames():
    good = encode_message(Ack(1))
    with pytest.raises(ProtocolError):
        decode_message(b"XX" + good[2:])
    with pytest.raises(IncompleteFrameError):
        decode_message(good[:6])
    with pytest.raises(ProtocolError):
        decode_message(good[:2] + bytes([9]) + good[3:])  # bad version
    with pytest.raises(UnsupportedMessageError):
        decode_message(good[:3] + bytes([0x7F]) + good[4:])
    with pytest.raises(ProtocolError):
        decode_message(good + b"junk")
    probe = encode_message(Probe(1, make_pilot()))
    with pytest.raises(IncompleteFrameError):
        decode_message(probe[:-8])


def test_decode_enforces_step_budget():
    frame = encode_message(TimestepAssign(1, t_d=30, t_plus=30, measured_snr_db=0.0))
    with pytest.raises(ConstraintError):
        decode_message(frame)
    with pytest.raises(ConstraintError):
        decode_message(encode_message(TimestepAssign(1, 0, 5, 0.0)))


def test_oversize_payload():
    giant = Probe(1, np.zeros(40_000, dtype=np.float32))
    with pytest.raises(FrameError):
        encode_message(giant)


def test_pilot_has_unit_average_power():
    pilot = make_pilot()
    assert pilot.shape == (PILOT_LENGTH,)
    assert float(np.mean(pilot.astype(np.float64) ** 2)) == pytest.approx(1.0, abs=1e-6)
    assert np.array_equal(pilot, make_pilot())  # both ends derive the same one


def test_measure_snr_cap_and_values():
    pilot = make_pilot().astype(np.float64)
    assert measure_snr(pilot, pilot) == 120.0
    rng = make_rng(404)
    noisy = pilot + rng.standard_normal(PILOT_LENGTH)
    assert abs(measure_snr(noisy, pilot) - 0.0) <= 1.0
    rng = make_rng(405)
    lightly = pilot + np.sqrt(0.1) * rng.standard_normal(PILOT_LENGTH)
    assert abs(measure_snr(lightly, pilot) - 10.0) <= 1.0
    with pytest.raises(ProtocolError):
        measure_snr(pilot[:10], pilot)


class CountingTransport(DuplexTransport):
    def __init__(self):
        super().__init__()
        self.frames = 0

    def send(self, from_side, frame):
        self.frames += 1
        super().send(from_side, frame)


def sessions():
    return (SyncSession(session_id=5, role="sender"),
            SyncSession(session_id=5, role="receiver"))


def test_handshake_agreement_over_clean_channel():
    sender, receiver = sessions()
    transport = CountingTransport()
    plan = run_handshake(sender, receiver, lambda snr: (20, 15),
                         ChannelConfig(float("inf")), make_rng(1),
                         transport=transport, bounds=BOUNDS)
    assert (plan.t_d, plan.t_plus) == (20, 15)
    assert sender.phase == Phase.ACKED and receiver.phase == Phase.ACKED
    assert sender.plan.t_d == receiver.plan.t_d == 20
    assert sender.measured_snr_db == pytest.approx(120.0)
    assert transport.frames == 3


def test_handshake_aborts_on_invalid_selector_output():
    sender, receiver = sessions()
    with pytest.raises(PlanError):
        run_handshake(sender, receiver, lambda snr: (30, 30),
                      ChannelConfig(float("inf")), make_rng(2), bounds=BOUNDS)
    assert sender.plan is None and receiver.plan is None
    assert sender.phase != Phase.ACKED and receiver.phase != Phase.ACKED


def test_handshake_agreement_under_pilot_noise():
    # both ends install the plan chosen for the measured (not true) SNR
    chosen = {}

    def selector(measured):
        chosen["snr"] = measured
        return (22, 4) if measured < 5.0 else (12, 0)

    sender, receiver = sessions()
    plan = run_handshake(sender, receiver, selector, ChannelConfig(0.0),
                         make_rng(3), bounds=BOUNDS)
    assert chosen["snr"] != 0.0  # measurement error is expected
    assert (sender.plan.t_d, sender.plan.t_plus) == (plan.t_d, plan.t_plus)
    assert (receiver.plan.t_d, receiver.plan.t_plus) == (plan.t_d, plan.t_plus)
    assert (plan.t_d, plan.t_plus) == selector(chosen["snr"])


def test_handshake_times_out_on_a_dead_link():
    sender, receiver = sessions()
    dead = LossyTransport(1.0, make_rng(4))
    with pytest.raises(HandshakeError):
        run_handshake(sender, receiver, lambda snr: (20, 0),
                      ChannelConfig(float("inf")), make_rng(5),
                      transport=dead, bounds=BOUNDS, max_attempts=3)


def test_session_guard_and_resync_interval():
    sender, receiver = sessions()
    with pytest.raises(HandshakeError):
        sender.require_synced()
    run_handshake(sender, receiver, lambda snr: (20, 0),
                  ChannelConfig(float("inf")), make_rng(6), bounds=BOUNDS)
    sender.require_synced()
    sender.sync_interval = 4
    for _ in range(4):
        sender.note_batch()
    with pytest.raises(HandshakeError):
        sender.require_synced()  # interval elapsed, back to idle
    assert sender.phase == Phase.IDLE


def test_phase_cannot_move_backwards():
    s = SyncSession(session_id=1, role="sender", phase=Phase.ACKED)
    with pytest.raises(HandshakeError):
        s.advance(Phase.PROBED)

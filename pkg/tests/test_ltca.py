import time

import pytest
from hypothesis import given, strategies as st

from vpkiaas.authz import RaCredential
from vpkiaas.credentials import CertKind, generate_keypair, verify_chain
from vpkiaas.errors import (
    BadAuth,
    DuplicateRegistration,
    RevokedLtc,
    Unauthorized,
    UnknownSerial,
    UnknownTicket,
    WindowTooLarge,
)
from vpkiaas.ltca import (
    SignedTicketRequest,
    Ticket,
    TicketRequest,
    VehicleStatus,
    align_window,
)


def register(domain, vid="car"):
    key = generate_keypair()
    return key, domain.ltca.register_vehicle(vid, key.public_key)


def request_ticket(domain, key, ltc, start, duration, pca="pca-1"):
    signed = SignedTicketRequest.create(TicketRequest(start, duration, pca), ltc, key, now=time.time())
    return domain.ltca.issue_ticket(signed)


def ra_auth(domain, op, subject):
    return domain.material.ra_credential.authorize(op, subject)


def test_register_issues_chain_verifiable_ltc(domain):
    _, ltc = register(domain)
    assert ltc.kind is CertKind.LTC
    assert ltc.subject_id == "car"
    verify_chain(ltc, domain.material.chain)


def test_duplicate_registration(domain):
    register(domain)
    with pytest.raises(DuplicateRegistration):
        register(domain)


# allowed LTC lifecycle transitions: (state, event) -> next state
TRANSITIONS = {
    (None, "register"): VehicleStatus.ACTIVE,
    (VehicleStatus.ACTIVE, "revoke"): VehicleStatus.REVOKED,
    (VehicleStatus.REVOKED, "revoke"): VehicleStatus.REVOKED,
    (VehicleStatus.REVOKED, "register"): VehicleStatus.ACTIVE,
}


def test_lifecycle_walk_matches_transition_table(domain):
    state, serial = None, None
    for event in ["register", "revoke", "revoke", "register", "revoke", "register"]:
        expected = TRANSITIONS[(state, event)]
        if event == "register":
            _, ltc = register(domain)
            assert ltc.serial != serial
            serial = ltc.serial
        else:
            domain.ltca.revoke_ltc(serial, ra_auth(domain, "revoke_ltc", serial.to_bytes(16, "big")))
        state = domain.ltca.vehicle_status("car").status
        assert state is expected
    # registering an active vehicle is not in the table
    with pytest.raises(DuplicateRegistration):
        register(domain)


def test_twelve_slot_ticket_for_one_hour(domain, aligned_now):
    key, ltc = register(domain)
    ticket = request_ticket(domain, key, ltc, aligned_now, 3600)
    assert ticket.max_pseudonyms == 12
    assert (ticket.window_start, ticket.window_end) == (aligned_now, aligned_now + 3600)
    assert ticket.tau_p == 300


def test_unaligned_request_rounds_outward(material):
    from vpkiaas.domain import Domain

    d = Domain.create(tau_p=60, material=material)
    t0 = (int(time.time()) // 60) * 60
    key, ltc = register(d)
    ticket = request_ticket(d, key, ltc, t0 + 30, 60)
    # [t0+30, t0+90) covers the slots starting at t0 and t0+60
    assert (ticket.window_start, ticket.window_end) == (t0, t0 + 120)
    assert ticket.max_pseudonyms == 2
    d.close()


@given(st.integers(0, 10**10), st.integers(1, 10**6), st.integers(1, 7200))
def test_alignment_properties(start, duration, tau):
    t_s, t_e = align_window(start, duration, tau)
    assert t_s % tau == 0 and t_e % tau == 0
    assert t_s <= start and start + duration <= t_e
    # outward by less than one slot on each side
    assert start - t_s < tau and t_e - (start + duration) < tau


def test_window_cap(domain, aligned_now):
    key, ltc = register(domain)
    with pytest.raises(WindowTooLarge):
        request_ticket(domain, key, ltc, aligned_now, 24 * 3600 + 1)


def test_ticket_signed_by_ltca(domain, aligned_now):
    key, ltc = register(domain)
    ticket = request_ticket(domain, key, ltc, aligned_now, 600)
    assert domain.material.ltca.cert.subject_public_key.verify(ticket.signature, ticket.tbs_bytes())
    assert Ticket.decode(ticket.encode()) == ticket


def test_request_signed_by_wrong_key(domain, aligned_now):
    _, ltc = register(domain)
    with pytest.raises(BadAuth):
        request_ticket(domain, generate_keypair(), ltc, aligned_now, 600)


def test_stale_request(domain, aligned_now):
    key, ltc = register(domain)
    signed = SignedTicketRequest.create(TicketRequest(aligned_now, 600, "pca-1"), ltc, key,
                                        now=time.time() - 3600)
    with pytest.raises(BadAuth):
        domain.ltca.issue_ticket(signed)


def test_revoked_ltc_cannot_get_tickets(domain, aligned_now):
    key, ltc = register(domain)
    domain.ltca.revoke_ltc(ltc.serial, ra_auth(domain, "revoke_ltc", ltc.serial.to_bytes(16, "big")))
    with pytest.raises(RevokedLtc):
        request_ticket(domain, key, ltc, aligned_now, 600)


def test_old_ltc_stays_revoked_after_reregistration(domain, aligned_now):
    key, ltc = register(domain)
    domain.ltca.revoke_ltc(ltc.serial, ra_auth(domain, "revoke_ltc", ltc.serial.to_bytes(16, "big")))
    register(domain)
    with pytest.raises(RevokedLtc):
        request_ticket(domain, key, ltc, aligned_now, 600)


def test_revoke_is_idempotent_and_checks_serial(domain):
    _, ltc = register(domain)
    subject = ltc.serial.to_bytes(16, "big")
    domain.ltca.revoke_ltc(ltc.serial, ra_auth(domain, "revoke_ltc", subject))
    domain.ltca.revoke_ltc(ltc.serial, ra_auth(domain, "revoke_ltc", subject))
    with pytest.raises(UnknownSerial):
        domain.ltca.revoke_ltc(12345, ra_auth(domain, "revoke_ltc", (12345).to_bytes(16, "big")))


def test_resolve_ticket(domain, aligned_now):
    key, ltc = register(domain)
    ticket = request_ticket(domain, key, ltc, aligned_now, 600)
    tid = ticket.ticket_id
    assert domain.ltca.resolve_ticket(tid, ra_auth(domain, "resolve_ticket", tid)) == ltc.serial
    with pytest.raises(UnknownTicket):
        unknown = bytes(16)
        domain.ltca.resolve_ticket(unknown, ra_auth(domain, "resolve_ticket", unknown))


def test_resolve_requires_ra(domain, aligned_now):
    key, ltc = register(domain)
    tid = request_ticket(domain, key, ltc, aligned_now, 600).ticket_id
    with pytest.raises(Unauthorized):
        domain.ltca.resolve_ticket(tid, None)
    # a genuine authority that is not the RA
    impostor = RaCredential(domain.material.ltca.key, domain.material.ltca.cert)
    with pytest.raises(Unauthorized):
        domain.ltca.resolve_ticket(tid, impostor.authorize("resolve_ticket", tid))
    # an RA signature for another operation or subject
    with pytest.raises(Unauthorized):
        domain.ltca.resolve_ticket(tid, ra_auth(domain, "revoke_ltc", tid))
    with pytest.raises(Unauthorized):
        domain.ltca.resolve_ticket(tid, ra_auth(domain, "resolve_ticket", bytes(16)))


def test_multiple_tickets_and_listing(domain, aligned_now):
    key, ltc = register(domain)
    ids = {request_ticket(domain, key, ltc, aligned_now + i * 600, 600).ticket_id for i in range(3)}
    listed = domain.ltca.list_tickets(ltc.serial, ra_auth(domain, "list_tickets", ltc.serial.to_bytes(16, "big")))
    assert set(listed) == ids

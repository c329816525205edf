import pytest

from vpkiaas.credentials import generate_keypair
from vpkiaas.errors import (
    ConnectionFailed,
    PartialRevocation,
    RevokedLtc,
    UnknownSerial,
    UpstreamUnavailable,
)
from vpkiaas.ra import Ra


class Flaky:
    """Proxy that raises a transport error on chosen methods."""

    def __init__(self, inner, failing=()):
        self.inner = inner
        self.failing = set(failing)

    def __getattr__(self, name):
        attr = getattr(self.inner, name)
        if name in self.failing:
            def fail(*a, **k):
                raise ConnectionFailed(f"{name} unreachable")
            return fail
        return attr


@pytest.fixture
def fixture_vehicle(enroll, aligned_now):
    """A vehicle holding one 12-pseudonym ticket at pca-1."""
    v = enroll()
    result = v.acquire(aligned_now, aligned_now + 3600, 300)
    return v, result


def test_resolve_ground_truth(domain, fixture_vehicle):
    v, result = fixture_vehicle
    for cert, _ in v.pool:
        r = domain.ra.resolve(cert.serial)
        assert r.ltc_serial == v.ltc.serial
        assert r.ticket_id == result.ticket.ticket_id
        assert r.revoked_pseudonym_serials == ()


def test_resolve_unknown(domain):
    with pytest.raises(UnknownSerial):
        domain.ra.resolve(99)


def test_resolve_with_pca_down(domain, fixture_vehicle):
    v, _ = fixture_vehicle
    ra = Ra(domain.material.ra_credential, domain.ltca,
            [Flaky(p, {"lookup_ticket"}) for p in domain.pcas.values()])
    with pytest.raises(UpstreamUnavailable):
        ra.resolve(v.pool[0][0].serial)


def test_resolve_with_ltca_down(domain, fixture_vehicle):
    v, _ = fixture_vehicle
    ra = Ra(domain.material.ra_credential, Flaky(domain.ltca, {"resolve_ticket"}),
            list(domain.pcas.values()))
    with pytest.raises(UpstreamUnavailable) as info:
        ra.resolve(v.pool[0][0].serial)
    assert info.value.step == "ltca"


def test_revoke_vehicle(domain, fixture_vehicle, aligned_now):
    v, _ = fixture_vehicle
    issued = sorted(c.serial for c, _ in v.pool)
    target = v.pool[5][0].serial
    r = domain.ra.revoke_vehicle(target)
    assert list(r.revoked_pseudonym_serials) == issued
    assert target in r.revoked_pseudonym_serials
    crl = domain.pcas["pca-1"].get_crl()
    assert set(issued) <= set(crl.revoked_serials)
    with pytest.raises(RevokedLtc):
        v.acquire(aligned_now, aligned_now + 300, 300)

    again = domain.ra.revoke_vehicle(target)
    assert again.revoked_pseudonym_serials == r.revoked_pseudonym_serials
    assert domain.pcas["pca-1"].get_crl().revoked_serials == crl.revoked_serials


def test_revocation_cascades_across_tickets_and_pcas(domain, enroll, aligned_now):
    v = enroll()
    v.acquire(aligned_now, aligned_now + 900, 300)
    # same LTC, second ticket at another PCA
    other = type(v)(v.vehicle_id, v.key, v.ltc, domain.ltca, domain.pcas["pca-2"], "pca-2",
                    domain.material.chain)
    other.acquire(aligned_now + 900, aligned_now + 1800, 300)
    bystander = enroll()
    bystander.acquire(aligned_now, aligned_now + 600, 300)

    r = domain.ra.revoke_vehicle(v.pool[0][0].serial)
    assert len(r.revoked_ticket_ids) == 2
    assert set(r.revoked_pseudonym_serials) == {c.serial for c, _ in v.pool + other.pool}
    assert set(domain.pcas["pca-2"].get_crl().revoked_serials) == {c.serial for c, _ in other.pool}
    assert not {c.serial for c, _ in bystander.pool} & set(domain.pcas["pca-1"].get_crl().revoked_serials)


def test_partial_failure_then_retry(domain, fixture_vehicle, aligned_now):
    v, _ = fixture_vehicle
    serial = v.pool[0][0].serial
    broken = Ra(domain.material.ra_credential, Flaky(domain.ltca, {"revoke_ltc"}),
                list(domain.pcas.values()))
    with pytest.raises(PartialRevocation) as info:
        broken.revoke_vehicle(serial)
    assert info.value.failed == "ltca"
    assert "pca" in info.value.completed
    assert isinstance(info.value, UpstreamUnavailable)
    # pseudonyms are already on the CRL, the LTC is not yet revoked
    assert len(domain.pcas["pca-1"].get_crl().revoked_serials) == 12
    v.acquire(aligned_now + 3600, aligned_now + 3900, 300)

    r = domain.ra.revoke_vehicle(serial)
    assert len(r.revoked_pseudonym_serials) == 13
    with pytest.raises(RevokedLtc):
        v.acquire(aligned_now, aligned_now + 300, 300)


def test_separation_of_knowledge(domain, fixture_vehicle):
    v, result = fixture_vehicle
    cert = v.pool[0][0]
    ltc_bytes = v.ltc.serial.to_bytes(16, "big")
    serial_bytes = cert.serial.to_bytes(16, "big")
    cred = domain.material.ra_credential
    pca_answer = domain.pcas["pca-1"].lookup_ticket(
        cert.serial, cred.authorize("lookup_ticket", serial_bytes))
    ltca_answer = domain.ltca.resolve_ticket(
        pca_answer, cred.authorize("resolve_ticket", pca_answer)).to_bytes(16, "big")
    assert ltc_bytes not in pca_answer
    assert serial_bytes not in ltca_answer
    # and neither authority's issued artefact links the two
    assert ltc_bytes not in cert.encode()
    assert v.vehicle_id.encode() not in result.ticket.encode()


def test_ra_holds_no_state(domain, fixture_vehicle):
    v, _ = fixture_vehicle
    fresh = Ra(domain.material.ra_credential, domain.ltca, list(domain.pcas.values()))
    assert fresh.resolve(v.pool[0][0].serial).ltc_serial == v.ltc.serial
    assert not {k for k in vars(fresh)} - {"credential", "ltca", "pcas", "clock"}

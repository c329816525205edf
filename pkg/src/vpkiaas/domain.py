"""Bootstrap a VPKI domain: root, LTCA, PCAs and RA with their certificates.

Used by tests, benchmarks and ``vpkiaas init``. Keys and certificates can
be written to and read back from a directory of ``<name>.key`` /
``<name>.cert`` files in the canonical binary encoding.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .authz import RaCredential
from .credentials import Certificate, KeyPair, generate_keypair, make_authority_cert
from .ltca import Ltca
from .pca import STRICT, Pca
from .ra import Ra
from .store import Store

AUTHORITY_LIFETIME_S = 10 * 365 * 24 * 3600
ROOT_ID = "root"
LTCA_ID = "ltca"
RA_ID = "ra"


@dataclass
class Authority:
    key: KeyPair
    cert: Certificate


@dataclass
class DomainMaterial:
    """Keys and certificates for every authority in one domain."""

    root: Authority
    ltca: Authority
    pcas: dict[str, Authority]
    ra: Authority

    @property
    def anchors(self) -> tuple[Certificate, ...]:
        return (self.root.cert,)

    @property
    def chain(self) -> tuple[Certificate, ...]:
        """Root plus every authority certificate, for client-side chain checks."""
        return (self.root.cert, self.ltca.cert, *(a.cert for a in self.pcas.values()), self.ra.cert)

    @property
    def ra_credential(self) -> RaCredential:
        return RaCredential(self.ra.key, self.ra.cert)

    @classmethod
    def generate(cls, pca_ids: Iterable[str] = ("pca-1",), now: float | None = None,
                 lifetime_s: int = AUTHORITY_LIFETIME_S) -> "DomainMaterial":
        start = int(time.time() if now is None else now) - 3600
        end = start + lifetime_s
        root_key = generate_keypair()
        root = Authority(root_key, make_authority_cert(ROOT_ID, root_key, start, end))

        def sub(name: str) -> Authority:
            key = generate_keypair()
            return Authority(key, make_authority_cert(name, key, start, end, ROOT_ID, root_key))

        return cls(root, sub(LTCA_ID), {p: sub(p) for p in pca_ids}, sub(RA_ID))

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = {ROOT_ID: self.root, LTCA_ID: self.ltca, RA_ID: self.ra, **self.pcas}
        for name, auth in entries.items():
            (d / f"{name}.key").write_bytes(auth.key.encode())
            os.chmod(d / f"{name}.key", 0o600)
            (d / f"{name}.cert").write_bytes(auth.cert.encode())
        (d / "pcas.txt").write_text("\n".join(self.pcas) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "DomainMaterial":
        d = Path(directory)

        def read(name: str) -> Authority:
            return Authority(KeyPair.decode((d / f"{name}.key").read_bytes()),
                             Certificate.decode((d / f"{name}.cert").read_bytes()))

        pca_ids = [p for p in (d / "pcas.txt").read_text().split() if p]
        return cls(read(ROOT_ID), read(LTCA_ID), {p: read(p) for p in pca_ids}, read(RA_ID))


def load_authority(directory: str | os.PathLike, name: str) -> Authority:
    d = Path(directory)
    return Authority(KeyPair.decode((d / f"{name}.key").read_bytes()),
                     Certificate.decode((d / f"{name}.cert").read_bytes()))


@dataclass
class Domain:
    """In-process services for one domain sharing one store."""

    material: DomainMaterial
    store: Store
    ltca: Ltca
    pcas: dict[str, Pca] = field(default_factory=dict)
    ra: Ra | None = None

    @classmethod
    def create(
        cls,
        tau_p: int = 300,
        pca_ids: Iterable[str] = ("pca-1",),
        store: Store | None = None,
        mode: str = STRICT,
        async_delay_s: float = 0.05,
        clock: Callable[[], float] = time.time,
        material: DomainMaterial | None = None,
        window_cap_s: int = 24 * 3600,
    ) -> "Domain":
        pca_ids = tuple(pca_ids)
        material = material or DomainMaterial.generate(pca_ids, now=clock())
        store = store if store is not None else Store()
        ltca = Ltca(material.ltca.key, material.ltca.cert, store, material.anchors,
                    tau_p=tau_p, window_cap_s=window_cap_s, clock=clock)
        pcas = {
            pid: Pca(material.pcas[pid].key, material.pcas[pid].cert, material.ltca.cert, store,
                     material.anchors, mode=mode, async_delay_s=async_delay_s, clock=clock)
            for pid in pca_ids
        }
        ra = Ra(material.ra_credential, ltca, list(pcas.values()), clock=clock)
        return cls(material, store, ltca, pcas, ra)

    def pca_replica(self, pca_id: str = "pca-1", **kwargs) -> Pca:
        """A further replica of ``pca_id`` sharing this domain's store and key."""
        auth = self.material.pcas[pca_id]
        base = self.pcas[pca_id]
        opts = dict(mode=base.mode, clock=base.clock)
        opts.update(kwargs)
        return Pca(auth.key, auth.cert, self.material.ltca.cert, self.store,
                   self.material.anchors, **opts)

    def close(self) -> None:
        for pca in self.pcas.values():
            pca.close()

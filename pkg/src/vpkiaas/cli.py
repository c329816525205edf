"""Command-line entry point: ``vpkiaas <command> ...``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import signal
import sys
import threading
import time
from pathlib import Path

from . import bench
from .errors import ConfigError, VpkiError

log = logging.getLogger("vpkiaas")


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _transport_args(p: argparse.ArgumentParser, server: bool) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    if server:
        g.add_argument("--tls-dir", help="directory with server.pem / server-key.pem")
    else:
        g.add_argument("--tls-ca", help="deployment TLS root (ca.pem) to verify servers against")
    g.add_argument("--insecure", action="store_true", help="plaintext transport (tests only)")


def _server_tls(args):
    if args.insecure:
        return None
    from . import tlsutil

    return tlsutil.server_context(tlsutil.load(args.tls_dir, "server"))


def _client_tls(args):
    if args.insecure:
        return None
    from . import tlsutil

    return tlsutil.client_context(Path(args.tls_ca).read_bytes())


def _channel(addr, ctx):
    from .gateway import Channel

    return Channel(addr, ctx)


# -- init / serve --------------------------------------------------------------

def cmd_init(args) -> int:
    from .domain import DomainMaterial

    material = DomainMaterial.generate(args.pca or ["pca-1"])
    material.save(args.dir)
    if args.tls:
        from . import tlsutil

        ca = tlsutil.make_ca()
        tlsutil.save(ca, args.dir, "ca")
        tlsutil.save(tlsutil.issue_server_cert(ca, args.host), args.dir, "server")
    print(f"wrote domain material to {args.dir}")
    return 0


def _serve(handlers, args) -> int:
    from .gateway import GatewayServer

    host, port = args.listen
    server = GatewayServer(handlers, host, port, ssl_context=_server_tls(args)).start()
    print(f"LISTENING {server.address[0]} {server.address[1]}", flush=True)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        done.wait()
    except KeyboardInterrupt:
        pass
    server.close()
    return 0


def cmd_serve(args) -> int:
    from .domain import DomainMaterial, load_authority
    from .ltca import Ltca
    from .pca import Pca
    from .remote import RemoteLtca, RemotePca, ltca_handlers, pca_handlers, ra_handlers
    from .store import open_store

    material = DomainMaterial.load(args.material)
    if args.role == "ltca":
        ltca = Ltca(material.ltca.key, material.ltca.cert, open_store(args.store), material.anchors,
                    tau_p=args.tau_p, window_cap_s=args.window_cap)
        return _serve(ltca_handlers(ltca), args)
    if args.role == "pca":
        auth = load_authority(args.material, args.pca_id)
        probe = [bytes.fromhex(t) for t in args.probe_ticket]
        pca = Pca(auth.key, auth.cert, material.ltca.cert, open_store(args.store), material.anchors,
                  mode=args.mode, async_delay_s=args.async_delay_ms / 1000.0, probe_ticket_ids=probe)
        return _serve(pca_handlers(pca), args)
    from .ra import Ra

    ctx = _server_tls(args)
    client_ctx = None
    if ctx is not None:
        from . import tlsutil

        client_ctx = tlsutil.client_context((Path(args.tls_dir) / "ca.pem").read_bytes())
    ra = Ra(material.ra_credential, RemoteLtca(_channel(args.ltca, client_ctx)),
            [RemotePca(_channel(a, client_ctx)) for a in args.pca])
    return _serve(ra_handlers(ra), args)


def cmd_crl(args) -> int:
    from .domain import load_authority
    from .errors import BadSignature
    from .remote import RemotePca

    issuer = load_authority(args.material, args.pca_id).cert
    remote = RemotePca(_channel(args.pca, _client_tls(args)))
    try:
        crl = remote.get_crl()
    finally:
        remote.close()
    if crl.issuer_id != issuer.subject_id or not crl.verify(issuer):
        raise BadSignature(f"CRL from {args.pca[0]}:{args.pca[1]} is not signed by {args.pca_id}")
    Path(args.out).write_bytes(crl.encode())
    print(f"wrote CRL with {len(crl.revoked_serials)} serials to {args.out}")
    return 0


def cmd_ra(args) -> int:
    from .remote import RemoteRa

    ra = RemoteRa(_channel(args.ra, _client_tls(args)))
    try:
        op = ra.resolve if args.action == "resolve" else ra.revoke_vehicle
        r = op(int(args.serial, 0))
    finally:
        ra.close()
    print(json.dumps({
        "pseudonym_serial": r.pseudonym_serial,
        "ticket_id": r.ticket_id.hex(),
        "ltc_serial": r.ltc_serial,
        "revoked_pseudonym_serials": list(r.revoked_pseudonym_serials),
        "revoked_ticket_ids": [t.hex() for t in r.revoked_ticket_ids],
    }, indent=2))
    return 0


# -- load generation ----------------------------------------------------------------

def cmd_loadgen(args) -> int:
    from .client import AcquisitionTarget, LoadProfile, RecordSink, Vehicle, run_load
    from .domain import DomainMaterial
    from .gateway import MessageType
    from .remote import RemoteLtca, RemotePca

    if args.profile:
        import yaml

        with open(args.profile) as fh:
            profile = LoadProfile(**yaml.safe_load(fh))
    else:
        profile = LoadProfile(args.workers, args.rph, args.streams, args.csrs, args.duration,
                              args.arrival)
    material = DomainMaterial.load(args.material)
    ctx = _client_tls(args)
    ltca, pca = RemoteLtca(_channel(args.ltca, ctx)), RemotePca(_channel(args.pca, ctx))
    vehicles = []

    def preflight() -> None:
        for remote in (ltca, pca):
            remote.channel.call(MessageType.ECHO_REQ, 5.0, payload=b"ping")
        # enrol only once the services are known to answer
        stamp = time.time_ns()
        vehicles.extend(Vehicle.enroll(f"load-{stamp}-{i}", ltca, pca, args.pca_id, material.chain)
                        for i in range(profile.streams))

    out = open(args.out, "w") if args.out else sys.stdout
    holder: list[AcquisitionTarget] = []

    def checked_preflight() -> None:
        preflight()
        holder.append(AcquisitionTarget(vehicles, profile.csrs_per_request, args.tau_p))

    def acquire(seq: int):
        return holder[0](seq)

    try:
        records = run_load(profile, acquire, preflight=checked_preflight,
                           sink=RecordSink(lambda r: out.write(json.dumps(r.to_dict()) + "\n")),
                           seed=args.seed)
    finally:
        if out is not sys.stdout:
            out.close()
    ok = sum(r.status == "ok" for r in records)
    print(f"{len(records)} requests, {ok} ok", file=sys.stderr)
    return 0


# -- trace / replay / analytics ------------------------------------------------------

def cmd_trace_gen(args) -> int:
    trips = bench.generate_trace(args.trips, seed=args.seed)
    bench.write_trace(trips, args.out)
    print(f"wrote {len(trips)} trips to {args.out}")
    return 0


def cmd_replay(args) -> int:
    trips = bench.ingest_trace(args.trace)
    if args.limit:
        trips = trips[:args.limit]
    model = bench.DelayModel(args.base_ms, args.jitter, args.jitter_ms)
    domain = None
    if args.inprocess:
        from .domain import Domain

        domain = Domain.create(tau_p=args.tau_p)
        target = bench.ReplayTarget(domain.ltca, domain.pcas["pca-1"], "pca-1", domain.material.chain)
    else:
        from .domain import DomainMaterial
        from .remote import RemoteLtca, RemotePca

        if not (args.ltca and args.pca and args.material):
            raise ConfigError("--ltca, --pca and --material are required unless --inprocess")
        ctx = _client_tls(args)
        material = DomainMaterial.load(args.material)
        target = bench.ReplayTarget(RemoteLtca(_channel(args.ltca, ctx)),
                                    RemotePca(_channel(args.pca, ctx)), args.pca_id, material.chain)
    try:
        records = bench.replay(trips, args.tau_p, model, target, args.compression, args.seed)
    finally:
        if domain is not None:
            domain.close()
    with open(args.out, "w") if args.out else contextlib.nullcontext(sys.stdout) as out:
        for r in records:
            out.write(r.to_json() + "\n")
    return 0


def _load_latency(path: str) -> list[bench.LatencyRecord]:
    return [bench.LatencyRecord.from_dict(d) for d in bench.read_ndjson(path)]


def cmd_cdf(args) -> int:
    records = _load_latency(args.input)
    pcts = [float(p) for p in args.percentiles.split(",")]
    groups: dict[int, list] = {}
    for r in records:
        groups.setdefault(r.tau_p, []).append(r)
    print("tau_p\tpercentile\tlatency_ms")
    for tau, group in sorted(groups.items()):
        for p, v in bench.cdf(group, pcts):
            print(f"{tau}\t{p:g}\t{v:.3f}")
    return 0


def cmd_plotdata(args) -> int:
    latency = []
    for path in args.latency or []:
        latency.extend(bench.read_ndjson(path))
    events = bench.read_ndjson(args.scaling) if args.scaling else None
    files = bench.render_plot_data(args.out, latency if args.latency else None, events)
    for f in files:
        print(f)
    return 0


def cmd_sizing(args) -> int:
    n = bench.fleet_sizing(args.vehicles, args.hours, args.tau_p, args.days)
    print(f"{n} pseudonyms/year ({n:.3e})")
    return 0


# -- experiments ---------------------------------------------------------------------

def cmd_experiment(args) -> int:
    from . import experiments as ex

    if args.name == "race":
        for mode in ("strict", "async"):
            r = ex.run_race(mode, rounds=args.rounds)
            print(f"{mode}: rounds={len(r.successes)} max_successes={max(r.successes)} "
                  f"rounds_with_duplicates={sum(s > 1 for s in r.successes)}")
    elif args.name == "issuance":
        per = ex.measure_issuance(args.pseudonyms)
        print(f"median per-pseudonym issuance: {ex.median_ms(per):.3f} ms over {args.pseudonyms}")
    elif args.name == "scaling":
        run = ex.run_scaling_experiment(duration_s=args.duration, peak_rps=args.peak_rps,
                                        event_log=args.events)
        print(f"peak replicas {run.peak_replicas}, final {run.final_replicas}")
    elif args.name == "healing":
        run = ex.run_self_healing()
        print(f"replaced after {run.replaced_after_s}s; healthy-pod failures "
              f"{run.healthy_failures}/{run.healthy_requests}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vpkiaas", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="generate keys and certificates for a domain")
    p.add_argument("--dir", required=True)
    p.add_argument("--pca", action="append", help="PCA id (repeatable)")
    p.add_argument("--tls", action="store_true", help="also create a TLS CA and server certificate")
    p.add_argument("--host", action="append", default=None, help="TLS server host name(s)")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("serve", help="run an LTCA, PCA or RA service")
    p.add_argument("role", choices=["ltca", "pca", "ra"])
    p.add_argument("--material", required=True, help="directory written by 'init'")
    p.add_argument("--listen", type=_addr, default=("127.0.0.1", 0))
    p.add_argument("--store", default="memory", help="'memory' or 'file:PATH'")
    p.add_argument("--tau-p", type=int, default=300, help="pseudonym lifetime (s)")
    p.add_argument("--window-cap", type=int, default=24 * 3600, help="max ticket window (s)")
    p.add_argument("--pca-id", default="pca-1")
    p.add_argument("--mode", choices=["strict", "async"], default="strict")
    p.add_argument("--async-delay-ms", type=float, default=50.0)
    p.add_argument("--probe-ticket", action="append", default=[], help="reserved probe ticket id (hex)")
    p.add_argument("--ltca", type=_addr, help="LTCA address (RA only)")
    p.add_argument("--pca", type=_addr, action="append", default=[], help="PCA address (RA only)")
    _transport_args(p, server=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("crl", help="fetch, verify and save a PCA's current CRL")
    p.add_argument("--material", required=True)
    p.add_argument("--pca", type=_addr, required=True)
    p.add_argument("--pca-id", default="pca-1")
    p.add_argument("--out", required=True)
    _transport_args(p, server=False)
    p.set_defaults(func=cmd_crl)

    p = sub.add_parser("ra", help="ask a resolution authority to resolve or revoke")
    p.add_argument("action", choices=["resolve", "revoke"])
    p.add_argument("serial", help="pseudonym serial (decimal or 0x-hex)")
    p.add_argument("--ra", type=_addr, required=True)
    _transport_args(p, server=False)
    p.set_defaults(func=cmd_ra)

    p = sub.add_parser("loadgen", help="synthetic pseudonym-request workload")
    p.add_argument("--material", required=True)
    p.add_argument("--ltca", type=_addr, required=True)
    p.add_argument("--pca", type=_addr, required=True)
    p.add_argument("--pca-id", default="pca-1")
    p.add_argument("--tau-p", type=int, default=300)
    p.add_argument("--profile", help="YAML/JSON file with LoadProfile fields")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--rph", type=float, default=3600, help="requests per worker per hour")
    p.add_argument("--streams", type=int, default=1, help="concurrent streams per worker")
    p.add_argument("--csrs", type=int, default=100, help="CSRs per request")
    p.add_argument("--duration", type=float, default=60)
    p.add_argument("--arrival", choices=["uniform", "poisson"], default="uniform")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    _transport_args(p, server=False)
    p.set_defaults(func=cmd_loadgen)

    p = sub.add_parser("trace", help="mobility traces")
    tsub = p.add_subparsers(dest="trace_cmd", required=True)
    g = tsub.add_parser("gen", help="write a synthetic full-day trace")
    g.add_argument("--trips", type=int, default=10_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_trace_gen)

    p = sub.add_parser("replay", help="replay a trace against the VPKI")
    p.add_argument("--trace", required=True)
    p.add_argument("--tau-p", type=int, default=60)
    p.add_argument("--base-ms", type=float, default=0.0)
    p.add_argument("--jitter", choices=[j.value for j in bench.Jitter], default="none")
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--compression", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="replay only the first N trips")
    p.add_argument("--inprocess", action="store_true", help="replay against in-process services")
    p.add_argument("--material")
    p.add_argument("--ltca", type=_addr)
    p.add_argument("--pca", type=_addr)
    p.add_argument("--pca-id", default="pca-1")
    p.add_argument("--tls-ca")
    p.add_argument("--insecure", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("cdf", help="nearest-rank latency percentiles")
    p.add_argument("--input", required=True)
    p.add_argument("--percentiles", default="50,90,95,99")
    p.set_defaults(func=cmd_cdf)

    p = sub.add_parser("plotdata", help="emit (x, y) series for external plotting")
    p.add_argument("--latency", action="append", help="latency NDJSON (repeatable)")
    p.add_argument("--scaling", help="scaling-event NDJSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("sizing", help="pseudonyms per year for a fleet")
    p.add_argument("--vehicles", type=int, default=350_000_000)
    p.add_argument("--hours", type=float, default=1.0)
    p.add_argument("--tau-p", type=float, default=300)
    p.add_argument("--days", type=int, default=365)
    p.set_defaults(func=cmd_sizing)

    p = sub.add_parser("experiment", help="run a canned experiment")
    p.add_argument("name", choices=["race", "issuance", "scaling", "healing"])
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--pseudonyms", type=int, default=10_000)
    p.add_argument("--duration", type=float, default=180.0)
    p.add_argument("--peak-rps", type=float, default=110.0)
    p.add_argument("--events", help="scaling-event NDJSON output")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "host", None) is None and args.command == "init":
        args.host = ["localhost", "127.0.0.1"]
    try:
        return args.func(args)
    except VpkiError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return 2

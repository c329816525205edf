import json
import subprocess
import sys
import time

import pytest

from vpkiaas import bench, tlsutil
from vpkiaas.client import Vehicle
from vpkiaas.gateway import Channel
from vpkiaas.pca import Crl
from vpkiaas.remote import RemoteLtca, RemotePca
from vpkiaas.cli import main
from vpkiaas.domain import DomainMaterial


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_init_writes_loadable_material(tmp_path, capsys):
    code, _, _ = run(capsys, "init", "--dir", str(tmp_path), "--pca", "a", "--pca", "b", "--tls")
    assert code == 0
    material = DomainMaterial.load(tmp_path)
    assert set(material.pcas) == {"a", "b"}
    for name in ("ca.pem", "ca-key.pem", "server.pem", "server-key.pem"):
        assert (tmp_path / name).exists()


def test_sizing(capsys):
    code, out, _ = run(capsys, "sizing")
    assert code == 0 and out.startswith("1533000000000 pseudonyms/year")
    _, out, _ = run(capsys, "sizing", "--vehicles", "10", "--hours", "0.5", "--days", "2")
    assert out.startswith("120 ")


def test_bad_input_exits_2(capsys):
    code, _, err = run(capsys, "sizing", "--vehicles", "0")
    assert code == 2 and err.startswith("error: ")


def test_trace_replay_cdf_plotdata(tmp_path, capsys):
    trace, lat = tmp_path / "trace.csv", tmp_path / "lat.ndjson"
    assert run(capsys, "trace", "gen", "--trips", "200", "--seed", "1", "--out", str(trace))[0] == 0
    assert len(bench.ingest_trace(trace)) == 200

    code, _, _ = run(capsys, "replay", "--trace", str(trace), "--inprocess", "--limit", "15",
                     "--tau-p", "300", "--compression", "86400", "--out", str(lat))
    assert code == 0
    records = [bench.LatencyRecord.from_dict(d) for d in bench.read_ndjson(lat)]
    assert len(records) == 15 and all(r.status == "ok" for r in records)

    code, out, _ = run(capsys, "cdf", "--input", str(lat), "--percentiles", "50,100")
    lines = out.splitlines()
    assert lines[0] == "tau_p\tpercentile\tlatency_ms"
    assert [line.split("\t")[:2] for line in lines[1:]] == [["300", "50"], ["300", "100"]]
    top = max(r.end_to_end_ms for r in records)
    assert float(lines[2].split("\t")[2]) == pytest.approx(top, abs=1e-3)

    events = tmp_path / "ev.ndjson"
    events.write_text(json.dumps({"timestamp": 0, "replica_count": 1}) + "\n")
    code, out, _ = run(capsys, "plotdata", "--latency", str(lat), "--scaling", str(events),
                       "--out", str(tmp_path / "plots"))
    assert code == 0
    names = sorted(p.rsplit("/", 1)[-1] for p in out.split())
    assert names == ["cdf_tau300.tsv", "replicas.tsv", "request_rate.tsv"]


def test_replay_to_stdout_keeps_stdout_open(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    trace.write_text("a,0,120\n")
    code, out, _ = run(capsys, "replay", "--trace", str(trace), "--inprocess", "--tau-p", "60")
    assert code == 0 and json.loads(out)["pseudonyms"] == 2
    print("still writable")
    assert capsys.readouterr().out == "still writable\n"


def test_replay_needs_a_target(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    trace.write_text("a,0,120\n")
    code, _, err = run(capsys, "replay", "--trace", str(trace))
    assert code == 2 and "--inprocess" in err


def spawn(*argv):
    proc = subprocess.Popen([sys.executable, "-m", "vpkiaas", *argv], stdout=subprocess.PIPE,
                            stderr=subprocess.DEVNULL, text=True)
    line = proc.stdout.readline().split()
    assert line[0] == "LISTENING", line
    return proc, f"{line[1]}:{line[2]}"


def cli(*argv, timeout=60):
    return subprocess.run([sys.executable, "-m", "vpkiaas", *argv], capture_output=True, text=True,
                          timeout=timeout)


def test_services_over_tls(tmp_path):
    d = str(tmp_path)
    assert main(["init", "--dir", d, "--tls"]) == 0
    store = f"file:{tmp_path / 'db'}"
    ca = f"{d}/ca.pem"
    procs = []
    try:
        ltca, ltca_addr = spawn("serve", "ltca", "--material", d, "--store", store, "--tls-dir", d)
        procs.append(ltca)
        pca, pca_addr = spawn("serve", "pca", "--material", d, "--store", store, "--tls-dir", d)
        procs.append(pca)
        ra, ra_addr = spawn("serve", "ra", "--material", d, "--ltca", ltca_addr, "--pca", pca_addr,
                            "--tls-dir", d)
        procs.append(ra)

        out = tmp_path / "load.ndjson"
        result = cli("loadgen", "--material", d, "--ltca", ltca_addr, "--pca", pca_addr,
                     "--tls-ca", ca, "--rph", "36000", "--csrs", "5", "--duration", "1",
                     "--seed", "1", "--out", str(out))
        assert result.returncode == 0, result.stderr
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(records) == 10
        assert all(r["status"] == "ok" for r in records)

        # a vehicle of our own, so we know which serials belong to it
        material = DomainMaterial.load(d)
        ctx = tlsutil.client_context(open(ca, "rb").read())
        host, port = ltca_addr.split(":")
        rl = RemoteLtca(Channel((host, int(port)), ctx))
        host, port = pca_addr.split(":")
        rp = RemotePca(Channel((host, int(port)), ctx))
        v = Vehicle.enroll("cli-victim", rl, rp, "pca-1", material.chain)
        start = (int(time.time()) // 300 + 1) * 300
        v.acquire(start, start + 900, 300)
        serials = sorted(c.serial for c, _ in v.pool)
        rl.close()
        rp.close()

        result = cli("ra", "revoke", hex(serials[0]), "--ra", ra_addr, "--tls-ca", ca)
        assert result.returncode == 0, result.stderr
        assert json.loads(result.stdout)["revoked_pseudonym_serials"] == serials

        crl_file = tmp_path / "pca-1.crl"
        result = cli("crl", "--material", d, "--pca", pca_addr, "--out", str(crl_file), "--tls-ca", ca)
        assert result.returncode == 0, result.stderr
        crl = Crl.decode(crl_file.read_bytes())
        assert crl.verify(material.pcas["pca-1"].cert)
        assert set(serials) <= set(crl.revoked_serials)

        # the RA cannot be reached without TLS verification against the deployment root
        result = cli("ra", "resolve", str(serials[0]), "--ra", ra_addr, "--insecure", timeout=30)
        assert result.returncode != 0
    finally:
        for p in procs:
            p.terminate()
            p.wait(timeout=10)

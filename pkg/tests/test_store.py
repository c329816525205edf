import multiprocessing
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from vpkiaas.errors import NotFound, StoreUnavailable
from vpkiaas.store import FileStore, Namespace, Outcome, Store, WriteBehindStore, open_store

NS = Namespace.TICKETS_LEDGER


@pytest.fixture(params=["memory", "file"])
def store(request, tmp_path):
    s = Store() if request.param == "memory" else FileStore(tmp_path / "store.log")
    yield s
    s.close()


def test_put_get(store):
    store.put(NS, "k", b"v")
    assert store.get(NS, "k") == b"v"
    store.put(NS, "k", b"w")
    assert store.get(NS, "k") == b"w"


def test_missing_key(store):
    with pytest.raises(NotFound):
        store.get(NS, "absent")


def test_scan_prefix_cardinality(store):
    for i in range(1000):
        store.put(NS, f"t/{i:04d}", b"x")
    store.put(NS, "u/1", b"y")
    items = store.scan_prefix(NS, "t/")
    assert len(items) == 1000
    assert [k for k, _ in items] == sorted(k for k, _ in items)


def test_namespaces_are_disjoint(store):
    store.put(Namespace.VEHICLES, "k", b"1")
    with pytest.raises(NotFound):
        store.get(Namespace.CRL, "k")
    assert store.scan_prefix(Namespace.CRL, "") == []


def test_consume_once_sequential(store):
    assert store.consume_once("a") is Outcome.WON
    assert store.consume_once("a") is Outcome.ALREADY_CONSUMED
    assert store.consume_once("b") is Outcome.WON


def test_closed_store_refuses(store):
    store.close()
    with pytest.raises(StoreUnavailable):
        store.put(NS, "k", b"v")


def _race(store, key, callers=64):
    barrier = threading.Barrier(callers)
    outcomes = []
    lock = threading.Lock()

    def go():
        barrier.wait()
        r = store.consume_once(key)
        with lock:
            outcomes.append(r)

    threads = [threading.Thread(target=go) for _ in range(callers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return outcomes


def test_consume_once_race_memory():
    s = Store()
    for round_ in range(100):
        outcomes = _race(s, f"ticket-{round_}")
        assert outcomes.count(Outcome.WON) == 1, f"round {round_}"
        assert outcomes.count(Outcome.ALREADY_CONSUMED) == 63


def test_consume_once_race_file(tmp_path):
    s = FileStore(tmp_path / "log")
    for round_ in range(100):
        assert _race(s, f"ticket-{round_}").count(Outcome.WON) == 1, f"round {round_}"
    s.close()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=6), min_size=1, max_size=30))
def test_distinct_ids_each_win_once(keys):
    s = Store()
    results = [s.consume_once(k) for k in keys]
    seen = set()
    for k, r in zip(keys, results):
        assert (r is Outcome.WON) == (k not in seen)
        seen.add(k)


def test_file_store_survives_reopen(tmp_path):
    path = tmp_path / "log"
    s = FileStore(path)
    s.put(NS, "k", b"v")
    s.consume_once("t")
    s.close()
    again = FileStore(path)
    assert again.get(NS, "k") == b"v"
    assert again.consume_once("t") is Outcome.ALREADY_CONSUMED
    again.close()


def _consume_in_child(path, key, queue):
    s = FileStore(path)
    queue.put(s.consume_once(key).value)
    s.close()


def test_file_store_across_processes(tmp_path):
    path = str(tmp_path / "log")
    FileStore(path).close()
    ctx = multiprocessing.get_context("spawn")
    q = ctx.Queue()
    procs = [ctx.Process(target=_consume_in_child, args=(path, "shared", q)) for _ in range(6)]
    for p in procs:
        p.start()
    for p in procs:
        p.join(30)
    results = [q.get(timeout=5) for _ in procs]
    assert results.count(Outcome.WON.value) == 1


def test_two_handles_see_each_other(tmp_path):
    a, b = FileStore(tmp_path / "log"), FileStore(tmp_path / "log")
    a.put(NS, "x", b"1")
    assert b.get(NS, "x") == b"1"
    assert b.consume_once("t") is Outcome.WON
    assert a.consume_once("t") is Outcome.ALREADY_CONSUMED
    a.close()
    b.close()


def test_write_behind_visibility():
    backing = Store()
    wb = WriteBehindStore(backing, delay_s=0.05)
    wb.put(NS, "k", b"v")
    with pytest.raises(NotFound):
        wb.get(NS, "k")
    assert wb.backlog() == 1
    deadline = time.monotonic() + 0.5  # 10x the delay
    while time.monotonic() < deadline:
        try:
            assert wb.get(NS, "k") == b"v"
            break
        except NotFound:
            time.sleep(0.005)
    else:
        pytest.fail("write never became visible")
    assert wb.flush(1.0)
    assert wb.backlog() == 0
    wb.close()


def test_write_behind_flush_lands_everything():
    backing = Store()
    wb = WriteBehindStore(backing, delay_s=0.02)
    for i in range(200):
        wb.put(NS, f"k{i}", b"v")
    assert wb.flush(5.0)
    assert len(backing.scan_prefix(NS, "k")) == 200
    wb.close()


def test_write_behind_close_drains():
    backing = Store()
    wb = WriteBehindStore(backing, delay_s=10)
    wb.put(NS, "k", b"v")
    wb.close()
    assert backing.get(NS, "k") == b"v"


def test_open_store():
    assert isinstance(open_store("memory"), Store)
    with pytest.raises(ValueError):
        open_store("redis://x")

"""Shared persistence for LTCA and PCA replicas.

Two engines sit behind one interface: an in-memory dict for tests and race
harnesses, and a single-file append-only log that survives restarts and can
be shared by several processes (every operation runs under an exclusive
``flock`` and first replays whatever other writers appended).

``WriteBehindStore`` wraps any store so that ``put`` returns immediately and
the write lands after a fixed delay. PCAs run on top of it in async mode,
which is what opens the duplicate-issuance window.
"""

from __future__ import annotations

import enum
import fcntl
import heapq
import itertools
import logging
import os
import struct
import threading
import time
from typing import Iterator

from . import tlv
from .errors import NotFound, StoreUnavailable

logger = logging.getLogger(__name__)


class Namespace(str, enum.Enum):
    VEHICLES = "vehicles"
    TICKETS_LEDGER = "tickets_ledger"
    CONSUMED_TICKETS = "consumed_tickets"
    ISSUANCE_RECORDS = "issuance_records"
    CRL = "crl"


class Outcome(enum.Enum):
    WON = "Won"
    ALREADY_CONSUMED = "AlreadyConsumed"


class Store:
    """In-memory engine. Thread-safe; ``consume_once`` is atomic insert-if-absent."""

    def __init__(self) -> None:
        self._data: dict[Namespace, dict[str, bytes]] = {ns: {} for ns in Namespace}
        self._lock = threading.RLock()
        self._closed = False

    def _check(self, key: str) -> None:
        if self._closed:
            raise StoreUnavailable("store is closed")
        if not key:
            raise ValueError("key must be non-empty")

    def put(self, ns: Namespace, key: str, value: bytes) -> None:
        ns = Namespace(ns)
        with self._lock:
            self._check(key)
            self._data[ns][key] = bytes(value)

    def get(self, ns: Namespace, key: str) -> bytes:
        ns = Namespace(ns)
        with self._lock:
            self._check(key)
            try:
                return self._data[ns][key]
            except KeyError:
                raise NotFound(f"{ns.value}/{key}") from None

    def scan_prefix(self, ns: Namespace, prefix: str) -> list[tuple[str, bytes]]:
        ns = Namespace(ns)
        with self._lock:
            self._check(prefix or "-")
            return sorted((k, v) for k, v in self._data[ns].items() if k.startswith(prefix))

    def consume_once(self, key: str, ns: Namespace = Namespace.CONSUMED_TICKETS,
                     value: bytes = b"1") -> Outcome:
        ns = Namespace(ns)
        with self._lock:
            self._check(key)
            if key in self._data[ns]:
                return Outcome.ALREADY_CONSUMED
            self._data[ns][key] = bytes(value)
            return Outcome.WON

    def close(self) -> None:
        with self._lock:
            self._closed = True


_LEN = struct.Struct(">I")
_OP_PUT = b"P"


class FileStore(Store):
    """Append-only log file; replayed on open and tail-followed on each call."""

    def __init__(self, path: str | os.PathLike, fsync: bool = False) -> None:
        super().__init__()
        self.path = os.fspath(path)
        self.fsync = fsync
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o600)
        self._offset = 0
        with self._locked():
            pass

    def _iter_log(self, data: bytes) -> Iterator[tuple[int, Namespace, str, bytes]]:
        pos = 0
        while pos + _LEN.size <= len(data):
            (length,) = _LEN.unpack_from(data, pos)
            end = pos + _LEN.size + length
            if end > len(data):
                # torn tail from a crashed writer; ignored until completed
                return
            f = tlv.decode_record(data[pos + _LEN.size:end])
            yield end, Namespace(tlv.read_text(f[2])), tlv.read_text(f[3]), f.get(4, b"")
            pos = end

    def _catch_up(self) -> None:
        size = os.fstat(self._fd).st_size
        if size <= self._offset:
            return
        data = os.pread(self._fd, size - self._offset, self._offset)
        consumed = 0
        for end, ns, key, value in self._iter_log(data):
            self._data[ns][key] = value
            consumed = end
        self._offset += consumed

    class _Locked:
        def __init__(self, store: "FileStore") -> None:
            self.store = store

        def __enter__(self) -> None:
            self.store._lock.acquire()
            try:
                if self.store._closed:
                    raise StoreUnavailable("store is closed")
                fcntl.flock(self.store._fd, fcntl.LOCK_EX)
                self.store._catch_up()
            except BaseException:
                self.store._lock.release()
                raise

        def __exit__(self, *exc) -> None:
            try:
                if not self.store._closed:
                    fcntl.flock(self.store._fd, fcntl.LOCK_UN)
            finally:
                self.store._lock.release()

    def _locked(self) -> "FileStore._Locked":
        return FileStore._Locked(self)

    def _append(self, ns: Namespace, key: str, value: bytes) -> None:
        body = tlv.encode_record({1: _OP_PUT, 2: tlv.text(ns.value), 3: tlv.text(key), 4: value})
        os.write(self._fd, _LEN.pack(len(body)) + body)
        if self.fsync:
            os.fsync(self._fd)
        self._offset += _LEN.size + len(body)
        self._data[ns][key] = bytes(value)

    def put(self, ns: Namespace, key: str, value: bytes) -> None:
        ns = Namespace(ns)
        self._check(key)
        with self._locked():
            self._append(ns, key, value)

    def get(self, ns: Namespace, key: str) -> bytes:
        self._check(key)
        with self._locked():
            return super().get(ns, key)

    def scan_prefix(self, ns: Namespace, prefix: str) -> list[tuple[str, bytes]]:
        with self._locked():
            return super().scan_prefix(ns, prefix)

    def consume_once(self, key: str, ns: Namespace = Namespace.CONSUMED_TICKETS,
                     value: bytes = b"1") -> Outcome:
        ns = Namespace(ns)
        self._check(key)
        with self._locked():
            if key in self._data[ns]:
                return Outcome.ALREADY_CONSUMED
            self._append(ns, key, value)
            return Outcome.WON

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._closed = True
                os.close(self._fd)


class WriteBehindStore:
    """Delays every ``put`` by ``delay_s``; reads go straight to the backing store.

    ``consume_once`` is passed through untouched, so it stays atomic.
    """

    def __init__(self, backing: Store, delay_s: float = 0.05) -> None:
        self.backing = backing
        self.delay_s = delay_s
        self._queue: list[tuple[float, int, Namespace, str, bytes]] = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._stopped = False
        self._in_flight = 0
        self._writer = threading.Thread(target=self._run, name="write-behind", daemon=True)
        self._writer.start()

    def put(self, ns: Namespace, key: str, value: bytes) -> None:
        if not key:
            raise ValueError("key must be non-empty")
        with self._cond:
            if self._stopped:
                raise StoreUnavailable("write-behind queue stopped")
            due = time.monotonic() + self.delay_s
            heapq.heappush(self._queue, (due, next(self._seq), Namespace(ns), key, bytes(value)))
            self._cond.notify()

    def get(self, ns: Namespace, key: str) -> bytes:
        return self.backing.get(ns, key)

    def scan_prefix(self, ns: Namespace, prefix: str) -> list[tuple[str, bytes]]:
        return self.backing.scan_prefix(ns, prefix)

    def consume_once(self, key: str, ns: Namespace = Namespace.CONSUMED_TICKETS,
                     value: bytes = b"1") -> Outcome:
        return self.backing.consume_once(key, ns, value)

    def backlog(self) -> int:
        with self._cond:
            return len(self._queue) + self._in_flight

    def flush(self, timeout: float | None = None) -> bool:
        """Block until the queue is drained; False on timeout."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while self._queue or self._in_flight:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(remaining if remaining is not None else 0.05)
        return True

    def _run(self) -> None:
        while True:
            with self._cond:
                while not self._stopped and (
                    not self._queue or self._queue[0][0] > time.monotonic()
                ):
                    wait = self._queue[0][0] - time.monotonic() if self._queue else None
                    self._cond.wait(wait)
                if self._stopped and not self._queue:
                    return
                _, _, ns, key, value = heapq.heappop(self._queue)
                self._in_flight += 1
            try:
                self.backing.put(ns, key, value)
            except Exception:
                logger.exception("write-behind put failed for %s/%s", ns.value, key)
            with self._cond:
                self._in_flight -= 1
                self._cond.notify_all()

    def close(self) -> None:
        """Drain pending writes, then stop the writer."""
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        self._writer.join()


def open_store(address: str) -> Store:
    """``memory`` or ``file:<path>``."""
    if address == "memory":
        return Store()
    if address.startswith("file:"):
        return FileStore(address[len("file:"):])
    raise ValueError(f"unknown store address {address!r}")

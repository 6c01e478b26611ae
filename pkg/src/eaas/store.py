"""Embedded persistence for the controller's edge and user databases.

``SqliteStore`` keeps everything in one file with write-ahead logging;
``MemoryStore`` is the in-memory variant for tests and benchmarks.  Records
are stored as JSON documents keyed by id, one table per record family.
"""

from __future__ import annotations

import json
import sqlite3
import threading

TABLES = ("nodes", "containers", "users")


class MemoryStore:
    # documents are kept as serialized strings: snapshot isolation without a
    # full decode on the (hot) write path
    def __init__(self):
        self._data: dict[str, dict[str, str]] = {name: {} for name in TABLES}
        self._lock = threading.Lock()

    def put(self, table: str, key: str, doc: dict) -> None:
        text = json.dumps(doc)
        with self._lock:
            self._data[table][key] = text

    def get(self, table: str, key: str) -> dict | None:
        with self._lock:
            text = self._data[table].get(key)
        return json.loads(text) if text is not None else None

    def delete(self, table: str, key: str) -> None:
        with self._lock:
            self._data[table].pop(key, None)

    def all(self, table: str) -> dict[str, dict]:
        with self._lock:
            items = list(self._data[table].items())
        return {key: json.loads(text) for key, text in items}

    def close(self) -> None:
        pass


class SqliteStore:
    def __init__(self, path: str):
        self._conn = sqlite3.connect(path, check_same_thread=False)
        self._lock = threading.Lock()
        with self._lock:
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA synchronous=NORMAL")
            for table in TABLES:
                self._conn.execute(
                    f"CREATE TABLE IF NOT EXISTS {table} (key TEXT PRIMARY KEY, doc TEXT NOT NULL)"
                )
            self._conn.commit()

    def put(self, table: str, key: str, doc: dict) -> None:
        with self._lock:
            self._conn.execute(
                f"INSERT INTO {table} (key, doc) VALUES (?, ?) "
                "ON CONFLICT(key) DO UPDATE SET doc=excluded.doc",
                (key, json.dumps(doc)),
            )
            self._conn.commit()

    def get(self, table: str, key: str) -> dict | None:
        with self._lock:
            row = self._conn.execute(f"SELECT doc FROM {table} WHERE key=?", (key,)).fetchone()
        return json.loads(row[0]) if row else None

    def delete(self, table: str, key: str) -> None:
        with self._lock:
            self._conn.execute(f"DELETE FROM {table} WHERE key=?", (key,))
            self._conn.commit()

    def all(self, table: str) -> dict[str, dict]:
        with self._lock:
            rows = self._conn.execute(f"SELECT key, doc FROM {table}").fetchall()
        return {key: json.loads(doc) for key, doc in rows}

    def close(self) -> None:
        with self._lock:
            self._conn.close()


def open_store(path: str | None):
    return SqliteStore(path) if path else MemoryStore()

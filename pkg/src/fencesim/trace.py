"""Run traces: one flat record per transport/compute event.

Records are plain tuples in ``FIELDS`` order so a trace of a few hundred
thousand events stays cheap to build and to serialize. Serialization is
newline-delimited JSON, one header line followed by one line per record,
with keys always written in ``FIELDS`` order.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, NamedTuple

SCHEMA_VERSION = 1

RECORD_KINDS = (
    "submit",
    "nic_service_start",
    "completion",
    "signal_visible",
    "compute_start",
    "compute_end",
    "proxy_block_begin",
    "proxy_block_end",
    "nic_block_begin",
    "nic_block_end",
)


class Record(NamedTuple):
    time: int
    seq: int
    pe: int
    kind: str
    req: int  # request id, -1 when not tied to a request
    rkind: str  # "put" | "signal" | "fence" | "" (compute / block records)
    src: int
    dst: int
    qp: int  # -1 for NVLink / local delivery
    size: int
    tag: str  # transfer tag shared by a Put and the Signal announcing it
    group: int
    flag: int  # fence_flag bit
    path: str  # "proxy" | "direct" | "nvlink" | ""


FIELDS = Record._fields


@dataclass
class RunTrace:
    records: list[Record] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def add(
        self,
        time: int,
        pe: int,
        kind: str,
        req: int = -1,
        rkind: str = "",
        src: int = -1,
        dst: int = -1,
        qp: int = -1,
        size: int = 0,
        tag: str = "",
        group: int = -1,
        flag: int = 0,
        path: str = "",
    ) -> None:
        self.records.append(
            Record(int(time), len(self.records), pe, kind, req, rkind, src, dst,
                   qp, int(size), tag, group, int(flag), path)
        )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def of_kind(self, *kinds: str) -> list[Record]:
        return [r for r in self.records if r.kind in kinds]

    @property
    def makespan(self) -> int:
        return int(self.meta.get("makespan", 0))

    # serialization ----------------------------------------------------

    def dumps(self) -> str:
        buf = io.StringIO()
        self.write(buf)
        return buf.getvalue()

    def write(self, fh) -> None:
        header = {"schema": SCHEMA_VERSION, "fields": list(FIELDS), "meta": self.meta}
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")))
        fh.write("\n")
        for rec in self.records:
            fh.write(json.dumps(dict(zip(FIELDS, rec)), separators=(",", ":")))
            fh.write("\n")

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def loads(cls, text: str) -> "RunTrace":
        return cls.read(io.StringIO(text))

    @classmethod
    def read(cls, fh: Iterable[str]) -> "RunTrace":
        it = iter(fh)
        header = json.loads(next(it))
        if header.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported trace schema {header.get('schema')!r}")
        records = []
        for line in it:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(Record(*(d[f] for f in FIELDS)))
        return cls(records=records, meta=header.get("meta", {}))

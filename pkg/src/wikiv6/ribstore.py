"""Historical BGP RIB snapshots: MRT parsing, LPM lookup, time-nearest attribution.

The MRT reader handles the TABLE_DUMP_V2 family (RFC 6396): a PEER_INDEX_TABLE
followed by RIB_IPV4_UNICAST / RIB_IPV6_UNICAST records. Every record carries
one NLRI prefix and per-peer BGP attribute blobs; we pull the origin AS out of
each peer's AS_PATH (4-byte ASNs in this format) and settle disagreements by
plurality vote, lowest ASN on ties.
"""

from __future__ import annotations

import struct
from bisect import bisect_left
from dataclasses import dataclass
from datetime import datetime, timezone
from ipaddress import ip_network
from typing import BinaryIO, Callable, Iterable, Iterator, Optional, Sequence, TextIO

from .ingest import EditRecord, SiteId, format_timestamp, parse_timestamp
from .netaddr import IpAddress, Prefix, canonical_text, parse_ip

MRT_TABLE_DUMP_V2 = 13
TD2_PEER_INDEX_TABLE = 1
TD2_RIB_IPV4_UNICAST = 2
TD2_RIB_IPV6_UNICAST = 4

BGP_ATTR_AS_PATH = 2
BGP_ATTR_AS4_PATH = 17
AS_SET = 1
AS_SEQUENCE = 2

_HEADER = struct.Struct(">IHHI")


class TruncatedRecord(Exception):
    """Stream ended inside an MRT record; offset is where that record starts."""

    def __init__(self, offset: int):
        super().__init__(f"truncated MRT record at byte {offset}")
        self.offset = offset


class MissingPeerIndex(Exception):
    """TABLE_DUMP_V2 stream without a leading PEER_INDEX_TABLE."""


class EmptyTimeline(Exception):
    """No RIB snapshots available to attribute against."""


class UnsortedInput(Exception):
    """attribute() requires records sorted by timestamp."""


class BadPrefixTable(Exception):
    """Prefix-table TSV is unusable (missing captured_at header)."""


@dataclass(frozen=True)
class OriginAs:
    """Origin of a prefix: a single ASN, an ambiguous AS_SET, or unrouted."""

    kind: str  # "asn" | "set" | "unrouted"
    asns: tuple[int, ...] = ()

    @classmethod
    def from_asn(cls, asn: int) -> "OriginAs":
        if asn <= 0:
            raise ValueError(f"ASN must be positive: {asn}")
        return cls("asn", (asn,))

    @classmethod
    def ambiguous(cls, asns: Iterable[int]) -> "OriginAs":
        values = tuple(sorted(set(asns)))
        if not values:
            raise ValueError("empty AS set")
        if len(values) == 1:
            return cls.from_asn(values[0])
        return cls("set", values)

    @property
    def text(self) -> str:
        if self.kind == "asn":
            return str(self.asns[0])
        if self.kind == "set":
            return "set:" + ",".join(str(a) for a in self.asns)
        return "unrouted"

    @classmethod
    def parse(cls, text: str) -> "OriginAs":
        if text == "unrouted":
            return UNROUTED
        if text.startswith("set:"):
            return cls.ambiguous(int(a) for a in text[4:].split(","))
        return cls.from_asn(int(text))

    def __str__(self) -> str:
        return self.text


UNROUTED = OriginAs("unrouted")


@dataclass
class RibSnapshot:
    """A timestamped prefix -> origin table plus parse counters."""

    captured_at: datetime
    entries: list[tuple[Prefix, OriginAs]]
    peer_count: int = 0
    skipped_types: int = 0
    skipped_subtypes: int = 0
    malformed_attributes: int = 0
    malformed_records: int = 0
    bad_rows: int = 0


def _vote(candidates: Sequence[OriginAs]) -> OriginAs:
    # Plurality across peers; ties go to the candidate with the lowest ASN
    # (tuple comparison: a 1-element (asn,) sorts by that asn).
    tally: dict[OriginAs, int] = {}
    for origin in candidates:
        tally[origin] = tally.get(origin, 0) + 1
    best = max(tally.items(), key=lambda kv: (kv[1], [-a for a in kv[0].asns]))
    return best[0]


def _origin_from_as_path(data: bytes) -> Optional[OriginAs]:
    """Origin per the final path segment; None when the attribute is malformed."""
    pos = 0
    last: Optional[tuple[int, tuple[int, ...]]] = None
    while pos < len(data):
        if pos + 2 > len(data):
            return None
        seg_type = data[pos]
        count = data[pos + 1]
        pos += 2
        end = pos + 4 * count
        if end > len(data) or count == 0:
            return None
        asns = struct.unpack(f">{count}I", data[pos:end])
        pos = end
        last = (seg_type, asns)
    if last is None:
        return None
    seg_type, asns = last
    try:
        if seg_type == AS_SEQUENCE:
            return OriginAs.from_asn(asns[-1])
        if seg_type == AS_SET:
            return OriginAs.ambiguous(asns)
    except ValueError:
        return None
    return None


def _peer_origin(attrs: bytes) -> Optional[OriginAs]:
    """Scan a BGP attribute blob for AS_PATH and extract the origin."""
    pos = 0
    while pos < len(attrs):
        if pos + 3 > len(attrs):
            return None
        flags = attrs[pos]
        attr_type = attrs[pos + 1]
        if flags & 0x10:  # extended length
            if pos + 4 > len(attrs):
                return None
            (length,) = struct.unpack_from(">H", attrs, pos + 2)
            data_start = pos + 4
        else:
            length = attrs[pos + 2]
            data_start = pos + 3
        data_end = data_start + length
        if data_end > len(attrs):
            return None
        if attr_type == BGP_ATTR_AS_PATH:
            return _origin_from_as_path(attrs[data_start:data_end])
        pos = data_end
    return None


def parse_mrt_rib(stream: BinaryIO) -> RibSnapshot:
    """Parse one MRT TABLE_DUMP_V2 file into a voted RibSnapshot.

    Unknown MRT types/subtypes are skipped and counted. Raises TruncatedRecord
    if the stream ends mid-record and MissingPeerIndex if RIB records appear
    before a PEER_INDEX_TABLE (or the stream holds no records at all).
    """
    offset = 0
    captured_at: Optional[datetime] = None
    peer_count: Optional[int] = None
    votes: dict[Prefix, list[OriginAs]] = {}
    snapshot = RibSnapshot(captured_at=datetime.fromtimestamp(0, timezone.utc), entries=[])

    while True:
        header = stream.read(_HEADER.size)
        if not header:
            break
        if len(header) < _HEADER.size:
            raise TruncatedRecord(offset)
        ts, mrt_type, subtype, length = _HEADER.unpack(header)
        body = stream.read(length)
        if len(body) < length:
            raise TruncatedRecord(offset)
        if captured_at is None:
            captured_at = datetime.fromtimestamp(ts, timezone.utc)
        if mrt_type != MRT_TABLE_DUMP_V2:
            snapshot.skipped_types += 1
        elif subtype == TD2_PEER_INDEX_TABLE:
            peer_count = _parse_peer_index(body)
        elif subtype in (TD2_RIB_IPV4_UNICAST, TD2_RIB_IPV6_UNICAST):
            if peer_count is None:
                raise MissingPeerIndex(f"RIB record at byte {offset} before PEER_INDEX_TABLE")
            _parse_rib_record(body, subtype, votes, snapshot)
        else:
            snapshot.skipped_subtypes += 1
        offset += _HEADER.size + length

    if captured_at is None or peer_count is None:
        raise MissingPeerIndex("stream contains no PEER_INDEX_TABLE")
    snapshot.captured_at = captured_at
    snapshot.peer_count = peer_count
    snapshot.entries = [
        (prefix, _vote(cands))
        for prefix, cands in sorted(
            votes.items(), key=lambda kv: (kv[0].version, int(kv[0].network_address), kv[0].prefixlen)
        )
    ]
    return snapshot


def _parse_peer_index(body: bytes) -> int:
    if len(body) < 8:
        return 0
    (view_len,) = struct.unpack_from(">H", body, 4)
    pos = 6 + view_len
    if pos + 2 > len(body):
        return 0
    (count,) = struct.unpack_from(">H", body, pos)
    return count


def _parse_rib_record(
    body: bytes, subtype: int, votes: dict[Prefix, list[OriginAs]], snapshot: RibSnapshot
) -> None:
    max_bytes = 16 if subtype == TD2_RIB_IPV6_UNICAST else 4
    max_bits = max_bytes * 8
    if len(body) < 5:
        snapshot.malformed_records += 1
        return
    plen = body[4]
    nbytes = (plen + 7) // 8
    pos = 5 + nbytes
    if plen > max_bits or pos + 2 > len(body):
        snapshot.malformed_records += 1
        return
    addr_bytes = body[5:pos] + bytes(max_bytes - nbytes)
    prefix = ip_network((addr_bytes, plen))
    (entry_count,) = struct.unpack_from(">H", body, pos)
    pos += 2
    peer_origins: list[OriginAs] = []
    for _ in range(entry_count):
        if pos + 8 > len(body):
            snapshot.malformed_records += 1
            break
        (attr_len,) = struct.unpack_from(">H", body, pos + 6)
        attr_end = pos + 8 + attr_len
        if attr_end > len(body):
            snapshot.malformed_records += 1
            break
        origin = _peer_origin(body[pos + 8 : attr_end])
        if origin is None:
            snapshot.malformed_attributes += 1
        else:
            peer_origins.append(origin)
        pos = attr_end
    if peer_origins:
        votes.setdefault(prefix, []).extend(peer_origins)


CAPTURED_AT_PREFIX = "# captured_at="


def load_prefix_table(lines: Iterable[str]) -> RibSnapshot:
    """Load the textual snapshot interchange format.

    First line: ``# captured_at=<ISO-8601>``; body rows ``prefix<TAB>origin``.
    Bad rows are skipped and counted.
    """
    captured_at: Optional[datetime] = None
    entries: list[tuple[Prefix, OriginAs]] = []
    bad_rows = 0
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith(CAPTURED_AT_PREFIX) and captured_at is None:
                captured_at = parse_timestamp(line[len(CAPTURED_AT_PREFIX) :])
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            bad_rows += 1
            continue
        try:
            prefix = ip_network(parts[0])
            origin = OriginAs.parse(parts[1])
        except ValueError:
            bad_rows += 1
            continue
        entries.append((prefix, origin))
    if captured_at is None:
        raise BadPrefixTable("missing '# captured_at=' header")
    entries.sort(key=lambda e: (e[0].version, int(e[0].network_address), e[0].prefixlen))
    return RibSnapshot(captured_at=captured_at, entries=entries, bad_rows=bad_rows)


def write_prefix_table(snapshot: RibSnapshot, sink: TextIO) -> int:
    """Dump a snapshot in load_prefix_table's format; returns rows written."""
    sink.write(f"{CAPTURED_AT_PREFIX}{format_timestamp(snapshot.captured_at)}\n")
    rows = 0
    for prefix, origin in sorted(
        snapshot.entries, key=lambda e: (e[0].version, int(e[0].network_address), e[0].prefixlen)
    ):
        sink.write(f"{prefix}\t{origin.text}\n")
        rows += 1
    return rows


class LpmIndex:
    """Binary radix tree over prefix bits; lookup returns the longest match."""

    __slots__ = ("_roots",)

    def __init__(self) -> None:
        # node = [zero-child, one-child, origin]
        self._roots: dict[int, list] = {4: [None, None, None], 6: [None, None, None]}

    def insert(self, prefix: Prefix, origin: OriginAs) -> None:
        width = 32 if prefix.version == 4 else 128
        bits = int(prefix.network_address)
        node = self._roots[prefix.version]
        for i in range(prefix.prefixlen):
            b = (bits >> (width - 1 - i)) & 1
            child = node[b]
            if child is None:
                child = node[b] = [None, None, None]
            node = child
        node[2] = origin

    def lookup(self, ip: IpAddress) -> OriginAs:
        width = 32 if ip.version == 4 else 128
        bits = int(ip)
        node = self._roots[ip.version]
        best = UNROUTED
        for i in range(width):
            if node[2] is not None:
                best = node[2]
            node = node[(bits >> (width - 1 - i)) & 1]
            if node is None:
                return best
        if node[2] is not None:
            best = node[2]
        return best


def build_lpm(snapshot: RibSnapshot) -> LpmIndex:
    """Index a snapshot; duplicate prefixes collapse to one voted origin."""
    by_prefix: dict[Prefix, list[OriginAs]] = {}
    for prefix, origin in snapshot.entries:
        by_prefix.setdefault(prefix, []).append(origin)
    index = LpmIndex()
    for prefix, origins in by_prefix.items():
        index.insert(prefix, origins[0] if len(origins) == 1 else _vote(origins))
    return index


class TimelineEntry:
    """One snapshot in a timeline; the LPM index is built on first use."""

    __slots__ = ("captured_at", "_loader", "_index")

    def __init__(self, captured_at: datetime, loader: Callable[[], RibSnapshot]):
        self.captured_at = captured_at
        self._loader = loader
        self._index: Optional[LpmIndex] = None

    def index(self) -> LpmIndex:
        if self._index is None:
            self._index = build_lpm(self._loader())
        return self._index

    def evict(self) -> None:
        self._index = None


class RibTimeline:
    """Snapshots ordered by capture time, supporting nearest-time queries."""

    def __init__(self, entries: Sequence[TimelineEntry]):
        self.entries = sorted(entries, key=lambda e: e.captured_at)
        times = [e.captured_at for e in self.entries]
        if any(a >= b for a, b in zip(times, times[1:])):
            raise ValueError("snapshot capture times must be strictly increasing")
        self._times = times

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_snapshots(cls, snapshots: Iterable[RibSnapshot]) -> "RibTimeline":
        return cls(
            [TimelineEntry(s.captured_at, (lambda snap=s: snap)) for s in snapshots]
        )

    @classmethod
    def from_files(cls, paths: Iterable[str]) -> "RibTimeline":
        """Build from MRT files and/or prefix-table TSVs (sniffed by content).

        Capture times are read eagerly (cheaply); full parsing happens the
        first time a snapshot's index is needed.
        """
        entries = []
        for path in paths:
            entries.append(TimelineEntry(_peek_captured_at(path), _file_loader(path)))
        return cls(entries)

    def nearest_position(self, t: datetime) -> int:
        if not self.entries:
            raise EmptyTimeline("timeline has no snapshots")
        i = bisect_left(self._times, t)
        if i == 0:
            return 0
        if i == len(self._times):
            return i - 1
        left = t - self._times[i - 1]
        right = self._times[i] - t
        return i - 1 if left <= right else i  # tie -> earlier snapshot


def _is_prefix_table(path: str) -> bool:
    with open(path, "rb") as fh:
        return fh.read(1) == b"#"


def _peek_captured_at(path: str) -> datetime:
    if _is_prefix_table(path):
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline().rstrip("\n")
        if not first.startswith(CAPTURED_AT_PREFIX):
            raise BadPrefixTable(f"{path}: missing '# captured_at=' header")
        return parse_timestamp(first[len(CAPTURED_AT_PREFIX) :])
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise TruncatedRecord(0)
    (ts,) = struct.unpack_from(">I", header)
    return datetime.fromtimestamp(ts, timezone.utc)


def _file_loader(path: str) -> Callable[[], RibSnapshot]:
    def load() -> RibSnapshot:
        if _is_prefix_table(path):
            with open(path, "r", encoding="utf-8") as fh:
                return load_prefix_table(fh)
        with open(path, "rb") as fh:
            return parse_mrt_rib(fh)

    return load


def nearest_snapshot(timeline: RibTimeline, t: datetime) -> TimelineEntry:
    """The timeline entry minimizing |captured_at - t|; ties pick the earlier."""
    return timeline.entries[timeline.nearest_position(t)]


@dataclass(frozen=True)
class AttributedRecord:
    """An EditRecord plus the origin AS at the nearest snapshot."""

    timestamp: datetime
    site: SiteId
    ip: IpAddress
    origin: OriginAs
    snapshot_delta_s: int


def attribute(records: Iterable[EditRecord], timeline: RibTimeline) -> Iterator[AttributedRecord]:
    """Annotate time-sorted records with origin AS and snapshot delta.

    Sorted input lets the timeline advance monotonically, so only a couple of
    LPM indexes are ever resident. Raises UnsortedInput on timestamp
    regressions and EmptyTimeline when there are no snapshots.
    """
    if not len(timeline):
        raise EmptyTimeline("timeline has no snapshots")
    prev: Optional[datetime] = None
    prev_pos = 0
    for record in records:
        if prev is not None and record.timestamp < prev:
            raise UnsortedInput(
                f"record at {format_timestamp(record.timestamp)} after {format_timestamp(prev)}"
            )
        prev = record.timestamp
        pos = timeline.nearest_position(record.timestamp)
        if pos > prev_pos:
            for stale in range(prev_pos, pos):
                timeline.entries[stale].evict()
            prev_pos = pos
        entry = timeline.entries[pos]
        origin = entry.index().lookup(record.ip)
        delta = int((record.timestamp - entry.captured_at).total_seconds())
        yield AttributedRecord(record.timestamp, record.site, record.ip, origin, delta)


ATTRIBUTED_COLUMNS = ("timestamp", "site", "ip", "origin", "delta_s")
ATTRIBUTED_HEADER = "\t".join(ATTRIBUTED_COLUMNS)


def format_attributed(record: AttributedRecord) -> str:
    return (
        f"{format_timestamp(record.timestamp)}\t{record.site.code}\t"
        f"{canonical_text(record.ip)}\t{record.origin.text}\t{record.snapshot_delta_s}"
    )


def write_attributed(records: Iterable[AttributedRecord], sink: TextIO) -> int:
    sink.write(ATTRIBUTED_HEADER + "\n")
    count = 0
    for record in records:
        sink.write(format_attributed(record) + "\n")
        count += 1
    return count


def read_attributed(lines: Iterable[str]) -> Iterator[AttributedRecord]:
    sites: dict[str, SiteId] = {}
    for lineno, line in enumerate(lines):
        line = line.rstrip("\n")
        if not line or (lineno == 0 and line == ATTRIBUTED_HEADER):
            continue
        ts_text, site_code, ip_text, origin_text, delta_text = line.split("\t")
        site = sites.get(site_code)
        if site is None:
            site = sites[site_code] = SiteId.from_code(site_code)
        yield AttributedRecord(
            parse_timestamp(ts_text),
            site,
            parse_ip(ip_text),
            OriginAs.parse(origin_text),
            int(delta_text),
        )

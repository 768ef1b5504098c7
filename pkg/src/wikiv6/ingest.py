"""Stream MediaWiki full-history XML exports and keep only anonymous-IP edits.

The parser is an expat push parser fed in fixed-size chunks, so resident
memory depends on the largest single revision, not on the dump size. Only a
handful of leaf elements are ever buffered (timestamp, contributor ip or
username, page ns, siteinfo dbname); article text flows through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import BinaryIO, Iterable, Iterator, Optional
from xml.parsers import expat

from .netaddr import IpAddress, NotAnIp, canonical_text, parse_ip

WIKIPEDIA = "wikipedia"
WIKTIONARY = "wiktionary"
WIKIBOOKS = "wikibooks"
WIKIQUOTE = "wikiquote"
WIKISOURCE = "wikisource"
WIKIMEDIA = "wikimedia"
WIKINEWS = "wikinews"
WIKIVOYAGE = "wikivoyage"
WIKIVERSITY = "wikiversity"
OTHER = "other"

# Longest suffix first; the bare "wiki" suffix is the flagship encyclopedia.
_FAMILY_SUFFIXES = (
    ("wikiversity", WIKIVERSITY),
    ("wikivoyage", WIKIVOYAGE),
    ("wiktionary", WIKTIONARY),
    ("wikisource", WIKISOURCE),
    ("wikimedia", WIKIMEDIA),
    ("wikibooks", WIKIBOOKS),
    ("wikiquote", WIKIQUOTE),
    ("wikinews", WIKINEWS),
    ("wiki", WIKIPEDIA),
)


@dataclass(frozen=True)
class SiteId:
    """One wiki, e.g. code="enwiki" -> language "en", family "wikipedia"."""

    code: str
    language: str
    family: str

    @classmethod
    def from_code(cls, code: str) -> "SiteId":
        if not code or not code.isascii() or not code.isalnum() or code != code.lower():
            raise ValueError(f"bad site code: {code!r}")
        for suffix, family in _FAMILY_SUFFIXES:
            if code.endswith(suffix):
                stem = code[: -len(suffix)]
                language = stem if 2 <= len(stem) <= 3 and stem.isalpha() else ""
                return cls(code, language, family)
        return cls(code, "", OTHER)


@dataclass(frozen=True)
class EditRecord:
    """One anonymous edit: when, where, and the editor's IP.

    Timestamps come from the dump verbatim (UTC, second resolution); real
    corpora fall between 2001 and the dump date.
    """

    timestamp: datetime
    site: SiteId
    ip: IpAddress


ANONYMOUS = "anonymous"
REGISTERED = "registered"
DELETED = "deleted"


@dataclass(frozen=True)
class Contributor:
    kind: str
    text: str = ""


def _classify(deleted: bool, ip_text: Optional[str], username: Optional[str]) -> Contributor:
    if deleted:
        return Contributor(DELETED)
    if ip_text is not None:
        return Contributor(ANONYMOUS, ip_text)
    if username is not None:
        return Contributor(REGISTERED, username)
    # empty element or anything unrecognized
    return Contributor(DELETED)


def classify_contributor(fragment: str) -> Contributor:
    """Classify a standalone ``<contributor>`` XML fragment.

    The ``<ip>`` element is the sole trigger for IP extraction; usernames are
    never parsed as addresses (wikis ban IP-shaped usernames).
    """
    import xml.etree.ElementTree as ET

    try:
        elem = ET.fromstring(fragment)
    except ET.ParseError:
        return Contributor(DELETED)
    deleted = elem.get("deleted") is not None
    ip_el = elem.find("ip")
    user_el = elem.find("username")
    ip_text = ip_el.text or "" if ip_el is not None else None
    username = user_el.text or "" if user_el is not None else None
    return _classify(deleted, ip_text, username)


class StreamMalformed(Exception):
    """Ill-formed XML; parsing aborted at the reported position."""

    def __init__(self, message: str, line: int, column: int, byte_index: int):
        super().__init__(f"{message} (line {line}, column {column}, byte {byte_index})")
        self.line = line
        self.column = column
        self.byte_index = byte_index


@dataclass
class ParseStats:
    """Skip counters for one dump file. Conservation law:

    emitted + registered + deleted + malformed_ip
            + missing_timestamp + namespace_filtered == revisions
    """

    revisions: int = 0
    emitted: int = 0
    skipped_registered: int = 0
    skipped_deleted: int = 0
    skipped_malformed_ip: int = 0
    skipped_missing_timestamp: int = 0
    skipped_namespace: int = 0
    siteinfo_conflicts: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "revisions": self.revisions,
            "anonymous": self.emitted,
            "skipped_registered": self.skipped_registered,
            "skipped_deleted": self.skipped_deleted,
            "skipped_malformed_ip": self.skipped_malformed_ip,
            "skipped_missing_timestamp": self.skipped_missing_timestamp,
            "skipped_namespace": self.skipped_namespace,
            "siteinfo_conflicts": self.siteinfo_conflicts,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def parse_timestamp(text: str) -> datetime:
    """Parse a dump timestamp (ISO-8601, second resolution, Z suffix)."""
    text = text.strip()
    try:
        return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
    except ValueError:
        pass
    # Rare drift: explicit offsets instead of Z.
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"naive timestamp: {text!r}")
    return dt.astimezone(timezone.utc)


# Leaf elements whose character data we buffer, keyed by (parent, element).
_CAPTURED = {
    ("siteinfo", "dbname"),
    ("page", "ns"),
    ("revision", "timestamp"),
    ("contributor", "ip"),
    ("contributor", "username"),
}


class _DumpHandler:
    """Expat callbacks; completed EditRecords accumulate in `pending`."""

    def __init__(self, site: SiteId, namespaces: Optional[set[int]], stats: ParseStats):
        self.site = site
        self.namespaces = namespaces
        self.stats = stats
        self.pending: list[EditRecord] = []
        self._stack: list[str] = []
        self._chars: Optional[list[str]] = None
        self._page_ns: Optional[int] = None
        self._rev_timestamp: Optional[str] = None
        self._contrib_deleted = False
        self._contrib_ip: Optional[str] = None
        self._contrib_username: Optional[str] = None

    def start_element(self, name: str, attrs: dict[str, str]) -> None:
        parent = self._stack[-1] if self._stack else ""
        self._stack.append(name)
        if (parent, name) in _CAPTURED:
            self._chars = []
        elif name == "page":
            self._page_ns = None
        elif name == "revision" and parent == "page":
            self._rev_timestamp = None
            self._contrib_deleted = False
            self._contrib_ip = None
            self._contrib_username = None
        elif name == "contributor" and parent == "revision":
            self._contrib_deleted = attrs.get("deleted") is not None

    def char_data(self, data: str) -> None:
        if self._chars is not None:
            self._chars.append(data)

    def end_element(self, name: str) -> None:
        self._stack.pop()
        parent = self._stack[-1] if self._stack else ""
        if self._chars is not None and (parent, name) in _CAPTURED:
            text = "".join(self._chars)
            self._chars = None
            if name == "dbname":
                if text.strip() != self.site.code:
                    self.stats.siteinfo_conflicts += 1
            elif name == "ns":
                try:
                    self._page_ns = int(text.strip())
                except ValueError:
                    self._page_ns = None
            elif name == "timestamp":
                self._rev_timestamp = text
            elif name == "ip":
                self._contrib_ip = text
            elif name == "username":
                self._contrib_username = text
        elif name == "revision" and parent == "page":
            self._finish_revision()

    def _finish_revision(self) -> None:
        stats = self.stats
        stats.revisions += 1
        if self.namespaces is not None and self._page_ns not in self.namespaces:
            stats.skipped_namespace += 1
            return
        contributor = _classify(self._contrib_deleted, self._contrib_ip, self._contrib_username)
        if contributor.kind == REGISTERED:
            stats.skipped_registered += 1
            return
        if contributor.kind == DELETED:
            stats.skipped_deleted += 1
            return
        if self._rev_timestamp is None:
            stats.skipped_missing_timestamp += 1
            return
        try:
            ts = parse_timestamp(self._rev_timestamp)
        except ValueError:
            stats.skipped_missing_timestamp += 1
            return
        try:
            ip = parse_ip(contributor.text.strip())
        except NotAnIp:
            stats.skipped_malformed_ip += 1
            return
        stats.emitted += 1
        self.pending.append(EditRecord(ts, self.site, ip))


_CHUNK = 1 << 16


def parse_dump_stream(
    xml: BinaryIO,
    site: SiteId,
    namespaces: Optional[Iterable[int]] = None,
    stats: Optional[ParseStats] = None,
) -> Iterator[EditRecord]:
    """Yield one EditRecord per anonymous-IP revision, in document order.

    `xml` must already be decompressed. Registered, deleted, malformed-IP and
    missing-timestamp revisions are skipped and counted in `stats`; a page
    namespace filter applies when `namespaces` is given. Raises
    StreamMalformed on ill-formed XML.
    """
    if stats is None:
        stats = ParseStats()
    ns_filter = set(namespaces) if namespaces is not None else None
    handler = _DumpHandler(site, ns_filter, stats)
    parser = expat.ParserCreate()
    parser.buffer_text = True
    parser.StartElementHandler = handler.start_element
    parser.EndElementHandler = handler.end_element
    parser.CharacterDataHandler = handler.char_data
    while True:
        chunk = xml.read(_CHUNK)
        try:
            parser.Parse(chunk, not chunk)
        except expat.ExpatError as exc:
            raise StreamMalformed(
                str(exc),
                parser.ErrorLineNumber,
                parser.ErrorColumnNumber,
                parser.ErrorByteIndex,
            ) from None
        if handler.pending:
            yield from handler.pending
            handler.pending = []
        if not chunk:
            break


class SinkFailure(Exception):
    """Writing records to the output stream failed."""


RECORD_COLUMNS = ("timestamp", "site", "ip")
RECORD_HEADER = "\t".join(RECORD_COLUMNS)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_record(record: EditRecord) -> str:
    return f"{format_timestamp(record.timestamp)}\t{record.site.code}\t{canonical_text(record.ip)}"


def write_records(records: Iterable[EditRecord], sink: BinaryIO) -> int:
    """Write the canonical record TSV (header + one row per record)."""
    count = 0
    try:
        sink.write((RECORD_HEADER + "\n").encode("utf-8"))
        for record in records:
            sink.write((format_record(record) + "\n").encode("utf-8"))
            count += 1
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc
    return count


def read_records(lines: Iterable[str]) -> Iterator[EditRecord]:
    """Inverse of write_records; accepts any iterable of text lines."""
    sites: dict[str, SiteId] = {}
    for lineno, line in enumerate(lines):
        line = line.rstrip("\n")
        if not line or (lineno == 0 and line == RECORD_HEADER):
            continue
        ts_text, site_code, ip_text = line.split("\t")
        site = sites.get(site_code)
        if site is None:
            site = sites[site_code] = SiteId.from_code(site_code)
        yield EditRecord(parse_timestamp(ts_text), site, parse_ip(ip_text))

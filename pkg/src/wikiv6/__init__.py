"""Mine anonymous-editor IP addresses from MediaWiki dumps into IPv6 adoption reports."""

__version__ = "0.1.0"

from .ingest import EditRecord, SiteId, classify_contributor, parse_dump_stream, write_records
from .netaddr import (
    Mac48,
    OuiDatabase,
    canonical_text,
    embed_mac,
    extract_mac,
    is_eui64,
    load_oui_database,
    parse_ip,
    resolve_vendor,
    truncate,
)
from .ribstore import (
    AttributedRecord,
    LpmIndex,
    OriginAs,
    RibSnapshot,
    RibTimeline,
    attribute,
    build_lpm,
    load_prefix_table,
    nearest_snapshot,
    parse_mrt_rib,
)

__all__ = [
    "__version__",
    "EditRecord",
    "SiteId",
    "classify_contributor",
    "parse_dump_stream",
    "write_records",
    "Mac48",
    "OuiDatabase",
    "canonical_text",
    "embed_mac",
    "extract_mac",
    "is_eui64",
    "load_oui_database",
    "parse_ip",
    "resolve_vendor",
    "truncate",
    "AttributedRecord",
    "LpmIndex",
    "OriginAs",
    "RibSnapshot",
    "RibTimeline",
    "attribute",
    "build_lpm",
    "load_prefix_table",
    "nearest_snapshot",
    "parse_mrt_rib",
]

"""Operator CLI: extract -> attribute -> report, with plain files between stages.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2 usage or
configuration error. Every run writes a manifest capturing the configuration
and input digests; equal manifests imply byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import heapq
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analytics import (
    TABLE_NAMES,
    aggregate,
    read_hitlist,
    table_cumulative_prefixes,
    table_eui64_weekly,
    table_hitlist_overlap,
    table_lifetimes,
    table_ratio_per_48,
    table_site_fraction,
    table_vendor_counts,
    table_weekly_by_as,
    table_weekly_by_version,
)
from .ingest import (
    ParseStats,
    RECORD_HEADER,
    SiteId,
    StreamMalformed,
    parse_dump_stream,
    read_records,
    write_records,
)
from .netaddr import EMPTY_OUI_DATABASE, load_oui_database
from .ribstore import (
    EmptyTimeline,
    RibTimeline,
    UnsortedInput,
    attribute,
    read_attributed,
    write_attributed,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

MERGED_RECORDS = "records.tsv"
ATTRIBUTED_RECORDS = "attributed.tsv"


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    dumps: list[str] = field(default_factory=list)
    ribs: list[str] = field(default_factory=list)
    oui: Optional[str] = None
    hitlist: Optional[str] = None
    out: str = "out"
    records: Optional[str] = None
    attributed: Optional[str] = None
    top_k: int = 5
    top_vendors: int = 8
    namespaces: Optional[list[int]] = None
    site_overrides: dict[str, str] = field(default_factory=dict)
    keep_going: bool = False
    stats_path: Optional[str] = None

    def as_dict(self) -> dict:
        return {
            "dumps": list(self.dumps),
            "ribs": list(self.ribs),
            "oui": self.oui,
            "hitlist": self.hitlist,
            "out": self.out,
            "records": self.records_path(),
            "attributed": self.attributed_path(),
            "top_k": self.top_k,
            "top_vendors": self.top_vendors,
            "namespaces": self.namespaces,
            "site_overrides": dict(sorted(self.site_overrides.items())),
        }

    def records_path(self) -> str:
        return self.records or str(Path(self.out) / MERGED_RECORDS)

    def attributed_path(self) -> str:
        return self.attributed or str(Path(self.out) / ATTRIBUTED_RECORDS)


def parse_namespaces(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad namespace list {text!r}: {exc}") from None


def load_config(path: str) -> PipelineConfig:
    """Read the flat key=value config; repeated dump/rib keys accumulate."""
    cfg = PipelineConfig()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "dump":
            cfg.dumps.append(value)
        elif key == "rib":
            cfg.ribs.append(value)
        elif key == "oui":
            cfg.oui = value
        elif key == "hitlist":
            cfg.hitlist = value
        elif key == "out":
            cfg.out = value
        elif key == "records":
            cfg.records = value
        elif key == "attributed":
            cfg.attributed = value
        elif key == "top_k":
            cfg.top_k = int(value)
        elif key == "top_vendors":
            cfg.top_vendors = int(value)
        elif key == "namespaces":
            cfg.namespaces = parse_namespaces(value)
        elif key.startswith("site."):
            cfg.site_overrides[key[len("site.") :]] = value
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return cfg


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.top_k < 0 or cfg.top_vendors < 0:
        raise ConfigError("top_k and top_vendors must be >= 0")
    for path in [*cfg.dumps, *cfg.ribs, cfg.oui, cfg.hitlist]:
        if path is not None and not Path(path).exists():
            raise ConfigError(f"configured path does not exist: {path}")


def infer_site(path: str, overrides: dict[str, str]) -> SiteId:
    """Site id from the filename stem up to the first dash, unless overridden."""
    name = Path(path).name
    if name in overrides:
        return SiteId.from_code(overrides[name])
    stem = name.split("-")[0].split(".")[0]
    return SiteId.from_code(stem)


def _sha256(path: str) -> str:
    # FIFOs/devices can be piped in as inputs; re-reading them would block.
    if not Path(path).is_file():
        return "unhashed:not-a-regular-file"
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return "sha256:" + digest.hexdigest()


def write_manifest(cfg: PipelineConfig, command: str, inputs: Sequence[str], outputs: Sequence[str]) -> None:
    manifest = {
        "tool": "wikiv6",
        "version": __version__,
        "command": command,
        "config": cfg.as_dict(),
        "inputs": {path: _sha256(path) for path in sorted(set(inputs))},
        "outputs": sorted(outputs),
    }
    out = Path(cfg.out) / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def external_sort_lines(sources: Sequence[str], sink_path: str, header: str, chunk_lines: int = 500_000) -> int:
    """Merge-sort data lines from `sources` into `sink_path`, bounded memory."""
    spills: list[str] = []
    chunk: list[str] = []

    def spill() -> None:
        chunk.sort()
        fd, name = tempfile.mkstemp(prefix="wikiv6-sort-", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as tmp:
            tmp.writelines(chunk)
        spills.append(name)
        chunk.clear()

    total = 0
    for source in sources:
        with open(source, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                if lineno == 0 and line.rstrip("\n") == header:
                    continue
                if not line.endswith("\n"):
                    line += "\n"
                chunk.append(line)
                total += 1
                if len(chunk) >= chunk_lines:
                    spill()
    try:
        with open(sink_path, "w", encoding="utf-8") as sink:
            sink.write(header + "\n")
            if not spills:
                chunk.sort()
                sink.writelines(chunk)
            else:
                if chunk:
                    spill()
                readers = [open(name, "r", encoding="utf-8") for name in spills]
                try:
                    sink.writelines(heapq.merge(*readers))
                finally:
                    for reader in readers:
                        reader.close()
    finally:
        for name in spills:
            try:
                os.unlink(name)
            except OSError:
                pass
    return total


def cmd_extract(cfg: PipelineConfig) -> int:
    if not cfg.dumps:
        print("extract: no inputs (configure 'dump =' lines or pass dump paths)", file=sys.stderr)
        return EXIT_USAGE
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    per_file: dict[str, dict] = {}
    merged_sources: list[str] = []
    failed = 0
    for dump in cfg.dumps:
        try:
            site = infer_site(dump, cfg.site_overrides)
        except ValueError as exc:
            print(f"extract: {dump}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        out_path = outdir / (Path(dump).stem + ".records.tsv")
        stats = ParseStats()
        try:
            with open(dump, "rb") as xml, open(out_path, "wb") as sink:
                write_records(
                    parse_dump_stream(xml, site, namespaces=cfg.namespaces, stats=stats), sink
                )
        except (StreamMalformed, OSError) as exc:
            failed += 1
            print(f"extract: {dump}: {exc}", file=sys.stderr)
            if not cfg.keep_going:
                return EXIT_RUNTIME
            continue
        per_file[Path(dump).name] = stats.as_dict()
        merged_sources.append(str(out_path))

    merged_path = cfg.records_path()
    external_sort_lines(merged_sources, merged_path, RECORD_HEADER)

    totals: dict[str, int] = {}
    for stats_dict in per_file.values():
        for key, value in stats_dict.items():
            totals[key] = totals.get(key, 0) + value
    summary = {"files": per_file, "totals": totals}
    _write_stats(cfg, summary)
    write_manifest(
        cfg,
        "extract",
        inputs=[d for d in cfg.dumps if Path(d).exists()],
        outputs=[Path(p).name for p in merged_sources] + [Path(merged_path).name],
    )
    return EXIT_RUNTIME if failed else EXIT_OK


def _write_stats(cfg: PipelineConfig, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if cfg.stats_path:
        Path(cfg.stats_path).write_text(text, encoding="utf-8")
    else:
        sys.stderr.write(text)


def _counter_median(counts: dict[int, int]) -> Optional[int]:
    total = sum(counts.values())
    if not total:
        return None
    seen = 0
    for value in sorted(counts):
        seen += counts[value]
        if seen > total // 2:
            return value
    return max(counts)


def cmd_attribute(cfg: PipelineConfig) -> int:
    records_path = cfg.records_path()
    if not Path(records_path).exists():
        print(f"attribute: records TSV not found: {records_path} (run extract first)", file=sys.stderr)
        return EXIT_USAGE
    if not cfg.ribs:
        print("attribute: empty timeline, configure at least one 'rib =' source", file=sys.stderr)
        return EXIT_USAGE
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        timeline = RibTimeline.from_files(cfg.ribs)
    except Exception as exc:
        print(f"attribute: cannot build timeline: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    attributed_path = cfg.attributed_path()
    delta_counts: dict[int, int] = {}
    unrouted = 0
    count = 0

    def annotated():
        nonlocal unrouted, count
        with open(records_path, "r", encoding="utf-8") as fh:
            for rec in attribute(read_records(fh), timeline):
                d = abs(rec.snapshot_delta_s)
                delta_counts[d] = delta_counts.get(d, 0) + 1
                count += 1
                if rec.origin.kind == "unrouted":
                    unrouted += 1
                yield rec

    try:
        with open(attributed_path, "w", encoding="utf-8") as sink:
            write_attributed(annotated(), sink)
    except UnsortedInput as exc:
        print(f"attribute: {exc}; run extract's merge step first", file=sys.stderr)
        return EXIT_RUNTIME
    except EmptyTimeline as exc:
        print(f"attribute: {exc}", file=sys.stderr)
        return EXIT_USAGE

    summary = {
        "records": count,
        "unrouted": unrouted,
        "unrouted_fraction": (unrouted / count) if count else 0.0,
        "abs_delta_s": {
            "min": min(delta_counts) if delta_counts else None,
            "median": _counter_median(delta_counts),
            "max": max(delta_counts) if delta_counts else None,
        },
    }
    _write_stats(cfg, summary)
    write_manifest(
        cfg,
        "attribute",
        inputs=[records_path, *cfg.ribs],
        outputs=[Path(attributed_path).name],
    )
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, names: Sequence[str]) -> int:
    requested = list(TABLE_NAMES) if "all" in names else list(dict.fromkeys(names))
    unknown = [n for n in requested if n not in TABLE_NAMES]
    if unknown:
        print(
            f"report: unknown table name(s) {', '.join(unknown)}; valid names: "
            + ", ".join(TABLE_NAMES),
            file=sys.stderr,
        )
        return EXIT_USAGE

    attributed_path = cfg.attributed_path()
    records_path = cfg.records_path()
    have_attributed = Path(attributed_path).exists()
    if "weekly_by_as" in requested and not have_attributed:
        print(
            f"report: weekly_by_as needs the attributed TSV ({attributed_path}); run attribute first",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if "hitlist_overlap" in requested and not cfg.hitlist:
        print("report: hitlist_overlap needs a configured hitlist path", file=sys.stderr)
        return EXIT_USAGE
    source = attributed_path if have_attributed else records_path
    if not Path(source).exists():
        print(f"report: no record TSV found at {source}; run extract first", file=sys.stderr)
        return EXIT_USAGE

    db = EMPTY_OUI_DATABASE
    if cfg.oui:
        with open(cfg.oui, "rb") as fh:
            db = load_oui_database(fh)

    with open(source, "r", encoding="utf-8") as fh:
        reader = read_attributed(fh) if have_attributed else read_records(fh)
        agg = aggregate(reader)

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    inputs = [source]
    tables = {}
    eui_pair = None
    for name in requested:
        if name == "weekly_by_version":
            tables[name] = table_weekly_by_version(agg)
        elif name == "site_fraction":
            tables[name] = table_site_fraction(agg)
        elif name == "cumulative_prefixes":
            tables[name] = table_cumulative_prefixes(agg)
        elif name == "ratio_per_48":
            tables[name] = table_ratio_per_48(agg)
        elif name == "lifetimes":
            tables[name], _ = table_lifetimes(agg)
        elif name == "weekly_by_as":
            tables[name] = table_weekly_by_as(agg, cfg.top_k)
        elif name in ("eui64_weekly", "eui64_fraction"):
            if eui_pair is None:
                eui_pair = table_eui64_weekly(agg, db, cfg.top_vendors)
            tables[name] = eui_pair[0] if name == "eui64_weekly" else eui_pair[1]
        elif name == "vendor_counts":
            tables[name] = table_vendor_counts(agg, db)
        elif name == "hitlist_overlap":
            with open(cfg.hitlist, "r", encoding="utf-8") as fh:
                entries, bad = read_hitlist(fh)
            if bad:
                print(f"report: skipped {bad} malformed hitlist row(s)", file=sys.stderr)
            inputs.append(cfg.hitlist)
            tables[name] = table_hitlist_overlap(agg, entries)

    if cfg.oui and any(n in requested for n in ("eui64_weekly", "eui64_fraction", "vendor_counts")):
        inputs.append(cfg.oui)

    outputs = []
    for name, table in tables.items():
        csv_path = outdir / f"{name}.csv"
        json_path = outdir / f"{name}.json"
        csv_path.write_text(table.to_csv(), encoding="utf-8")
        json_path.write_text(table.to_json(), encoding="utf-8")
        outputs.extend([csv_path.name, json_path.name])
    write_manifest(cfg, "report", inputs=inputs, outputs=outputs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wikiv6",
        description="Extract anonymous-editor IPs from MediaWiki dumps and build IPv6 adoption reports.",
    )
    parser.add_argument("--version", action="version", version=f"wikiv6 {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="pipeline config file (flat key = value)")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--top-k", type=int, dest="top_k", help="AS series to keep (default 5)")
        p.add_argument(
            "--top-vendors", type=int, dest="top_vendors", help="vendor series to keep (default 8)"
        )
        p.add_argument("--namespaces", help="comma-separated page namespaces to keep (default: all)")
        p.add_argument("--keep-going", action="store_true", help="continue past failing input files")
        p.add_argument("--stats", dest="stats", help="write the stage stats JSON here instead of stderr")

    p_extract = sub.add_parser("extract", help="parse dumps into record TSVs")
    common(p_extract)
    p_extract.add_argument("dumps", nargs="*", help="decompressed MediaWiki XML dump files")

    p_attr = sub.add_parser("attribute", help="annotate records with origin AS from RIB snapshots")
    common(p_attr)

    p_report = sub.add_parser("report", help="emit report tables (CSV + JSON)")
    common(p_report)
    p_report.add_argument("tables", nargs="+", help="table names or 'all'")

    p_hitlist = sub.add_parser("compare-hitlist", help="alias for: report hitlist_overlap")
    common(p_hitlist)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.out:
        cfg.out = args.out
    if getattr(args, "dumps", None):
        cfg.dumps.extend(args.dumps)
    if args.top_k is not None:
        cfg.top_k = args.top_k
    if args.top_vendors is not None:
        cfg.top_vendors = args.top_vendors
    if args.namespaces is not None:
        cfg.namespaces = parse_namespaces(args.namespaces)
    if args.keep_going:
        cfg.keep_going = True
    if args.stats:
        cfg.stats_path = args.stats
    validate_config(cfg)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"wikiv6: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "extract":
            return cmd_extract(cfg)
        if args.command == "attribute":
            return cmd_attribute(cfg)
        if args.command == "report":
            return cmd_report(cfg, args.tables)
        if args.command == "compare-hitlist":
            return cmd_report(cfg, ["hitlist_overlap"])
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    return EXIT_USAGE


def entrypoint() -> None:
    raise SystemExit(main())

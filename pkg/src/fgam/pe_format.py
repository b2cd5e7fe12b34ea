"""Parse and serialize Windows PE files.

Only the fields the rest of the toolkit touches are decoded; every other
header byte rides along as an opaque run so that ``serialize(parse(b)) == b``
holds for any accepted input.

Layout model (file order)::

    [dos header 64][dos stub][PE\\0\\0][coff 20][optional][section table][header tail]
    [gap_i][section data_i] ...   (data-bearing sections sorted by raw pointer)
    [overlay]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from fgam.errors import (
    BadOptionalHeader,
    BadPeOffset,
    InconsistentLayout,
    MissingMzMagic,
    SectionOutOfBounds,
    TruncatedHeader,
)

MZ_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\x00\x00"
DOS_HEADER_SIZE = 64
E_LFANEW_OFFSET = 0x3C
COFF_SIZE = 20
SECTION_HEADER_SIZE = 40
PE32_MAGIC = 0x10B
PE32_PLUS_MAGIC = 0x20B

_COFF = struct.Struct("<HHIIIHH")
_SECTION = struct.Struct("<8sIIII12sI")

# offsets inside the optional header; identical for PE32 and PE32+
_OPT_MAGIC = 0
_OPT_ENTRY = 16
_OPT_SECTION_ALIGN = 32
_OPT_FILE_ALIGN = 36
_OPT_SIZE_OF_IMAGE = 56
_OPT_SIZE_OF_HEADERS = 60
_OPT_MIN_SIZE = 64

# section characteristics
IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000


def align_up(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


@dataclass(frozen=True)
class DosHeader:
    raw: bytes
    pe_offset: int

    @property
    def magic(self) -> bytes:
        return self.raw[:2]

    def pack(self) -> bytes:
        return self.raw[:E_LFANEW_OFFSET] + struct.pack("<I", self.pe_offset)


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    number_of_sections: int
    time_date_stamp: int
    pointer_to_symbol_table: int
    number_of_symbols: int
    size_of_optional_header: int
    characteristics: int

    def pack(self) -> bytes:
        return _COFF.pack(
            self.machine,
            self.number_of_sections,
            self.time_date_stamp,
            self.pointer_to_symbol_table,
            self.number_of_symbols,
            self.size_of_optional_header,
            self.characteristics,
        )


@dataclass(frozen=True)
class OptionalHeader:
    """Decoded optional-header fields over the opaque original bytes."""

    raw: bytes
    magic: int
    entry_point: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int

    @property
    def is_pe32_plus(self) -> bool:
        return self.magic == PE32_PLUS_MAGIC

    @classmethod
    def unpack(cls, raw: bytes) -> "OptionalHeader":
        def u32(off: int) -> int:
            return struct.unpack_from("<I", raw, off)[0]

        return cls(
            raw=bytes(raw),
            magic=struct.unpack_from("<H", raw, _OPT_MAGIC)[0],
            entry_point=u32(_OPT_ENTRY),
            section_alignment=u32(_OPT_SECTION_ALIGN),
            file_alignment=u32(_OPT_FILE_ALIGN),
            size_of_image=u32(_OPT_SIZE_OF_IMAGE),
            size_of_headers=u32(_OPT_SIZE_OF_HEADERS),
        )

    def pack(self) -> bytes:
        out = bytearray(self.raw)
        struct.pack_into("<H", out, _OPT_MAGIC, self.magic)
        struct.pack_into("<I", out, _OPT_ENTRY, self.entry_point)
        struct.pack_into("<I", out, _OPT_SECTION_ALIGN, self.section_alignment)
        struct.pack_into("<I", out, _OPT_FILE_ALIGN, self.file_alignment)
        struct.pack_into("<I", out, _OPT_SIZE_OF_IMAGE, self.size_of_image)
        struct.pack_into("<I", out, _OPT_SIZE_OF_HEADERS, self.size_of_headers)
        return bytes(out)


@dataclass(frozen=True)
class SectionHeader:
    name: bytes
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_pointer: int
    characteristics: int
    # relocation/line-number pointers and counts, kept verbatim
    extra: bytes = bytes(12)

    @property
    def label(self) -> str:
        return self.name.rstrip(b"\x00").decode("latin-1")

    @classmethod
    def unpack(cls, raw: bytes) -> "SectionHeader":
        name, vsize, va, rsize, rptr, extra, chars = _SECTION.unpack(raw)
        return cls(name, vsize, va, rsize, rptr, chars, extra)

    def pack(self) -> bytes:
        return _SECTION.pack(
            self.name,
            self.virtual_size,
            self.virtual_address,
            self.raw_size,
            self.raw_pointer,
            self.extra,
            self.characteristics,
        )


@dataclass(frozen=True)
class PeFile:
    raw_length: int
    dos_header: DosHeader
    dos_stub: bytes
    coff_header: CoffHeader
    optional_header: OptionalHeader
    section_table: tuple[SectionHeader, ...]
    section_data: tuple[bytes, ...]
    # bytes between the section table and the first section's raw data
    header_tail: bytes = b""
    # per section: unclaimed bytes immediately preceding its raw data
    gaps: tuple[bytes, ...] = field(default=())
    overlay: bytes = b""

    @property
    def pe_offset(self) -> int:
        return self.dos_header.pe_offset

    @property
    def section_table_offset(self) -> int:
        return self.pe_offset + len(PE_SIGNATURE) + COFF_SIZE + len(self.optional_header.raw)

    @property
    def section_table_end(self) -> int:
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.section_table)

    @property
    def header_span(self) -> int:
        return self.section_table_end + len(self.header_tail)

    def file_order(self) -> list[int]:
        """Indices of data-bearing sections sorted by raw pointer."""
        idx = [i for i, s in enumerate(self.section_table) if s.raw_size > 0]
        return sorted(idx, key=lambda i: self.section_table[i].raw_pointer)

    def layout_length(self) -> int:
        n = self.header_span
        n += sum(len(g) for g in self.gaps)
        n += sum(len(d) for d in self.section_data)
        return n + len(self.overlay)

    def overlay_offset(self) -> int:
        return self.layout_length() - len(self.overlay)

    def evolve(self, **changes) -> "PeFile":
        return replace(self, **changes)


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def parse(data: bytes) -> PeFile:
    """Decode ``data`` into a :class:`PeFile`; raise on anything malformed."""
    data = bytes(data)
    size = len(data)
    if size < DOS_HEADER_SIZE:
        raise TruncatedHeader(f"file is {size} bytes, DOS header needs {DOS_HEADER_SIZE}")
    if data[:2] != MZ_MAGIC:
        raise MissingMzMagic(f"expected 'MZ' at offset 0, found {data[:2]!r}")

    pe_offset = _u32(data, E_LFANEW_OFFSET)
    if pe_offset < DOS_HEADER_SIZE or pe_offset + len(PE_SIGNATURE) > size:
        raise BadPeOffset(f"pe_offset 0x{pe_offset:x} outside [0x40, 0x{size:x})")
    if data[pe_offset : pe_offset + 4] != PE_SIGNATURE:
        raise BadPeOffset(f"no PE signature at 0x{pe_offset:x}")

    coff_off = pe_offset + len(PE_SIGNATURE)
    if coff_off + COFF_SIZE > size:
        raise TruncatedHeader("COFF header runs past end of file")
    coff = CoffHeader(*_COFF.unpack_from(data, coff_off))

    opt_off = coff_off + COFF_SIZE
    opt_size = coff.size_of_optional_header
    if opt_size < _OPT_MIN_SIZE:
        raise TruncatedHeader(f"optional header of {opt_size} bytes is too short")
    if opt_off + opt_size > size:
        raise TruncatedHeader("optional header runs past end of file")
    opt = OptionalHeader.unpack(data[opt_off : opt_off + opt_size])
    if opt.magic not in (PE32_MAGIC, PE32_PLUS_MAGIC):
        raise BadOptionalHeader(f"unknown optional header magic 0x{opt.magic:x}")
    if opt.file_alignment == 0 or opt.section_alignment == 0:
        raise BadOptionalHeader("zero file or section alignment")

    table_off = opt_off + opt_size
    table_end = table_off + SECTION_HEADER_SIZE * coff.number_of_sections
    if table_end > size:
        raise TruncatedHeader("section table runs past end of file")
    table = tuple(
        SectionHeader.unpack(data[o : o + SECTION_HEADER_SIZE])
        for o in range(table_off, table_end, SECTION_HEADER_SIZE)
    )

    for i, s in enumerate(table):
        if s.raw_size == 0:
            continue
        if s.raw_pointer + s.raw_size > size:
            raise SectionOutOfBounds(
                f"section {i} ({s.label}) raw data [0x{s.raw_pointer:x}, "
                f"0x{s.raw_pointer + s.raw_size:x}) exceeds file length 0x{size:x}"
            )
        if s.raw_pointer < table_end:
            raise SectionOutOfBounds(f"section {i} ({s.label}) raw data overlaps the headers")

    order = sorted((i for i, s in enumerate(table) if s.raw_size > 0), key=lambda i: table[i].raw_pointer)
    gaps = [b""] * len(table)
    section_data = [b""] * len(table)
    if order:
        cursor = table[order[0]].raw_pointer
    else:
        cursor = min(max(table_end, opt.size_of_headers), size)
    header_tail = data[table_end:cursor]
    for i in order:
        s = table[i]
        if s.raw_pointer < cursor:
            raise SectionOutOfBounds(f"section {i} ({s.label}) raw data overlaps a preceding section")
        gaps[i] = data[cursor : s.raw_pointer]
        section_data[i] = data[s.raw_pointer : s.raw_pointer + s.raw_size]
        cursor = s.raw_pointer + s.raw_size

    return PeFile(
        raw_length=size,
        dos_header=DosHeader(raw=data[:DOS_HEADER_SIZE], pe_offset=pe_offset),
        dos_stub=data[DOS_HEADER_SIZE:pe_offset],
        coff_header=coff,
        optional_header=opt,
        section_table=table,
        section_data=tuple(section_data),
        header_tail=header_tail,
        gaps=tuple(gaps),
        overlay=data[cursor:],
    )


def serialize(pe: PeFile) -> bytes:
    """Lay ``pe`` out as bytes. Raises InconsistentLayout if regions collide or leave holes."""
    n = len(pe.section_table)
    if len(pe.section_data) != n or len(pe.gaps) != n:
        raise InconsistentLayout("section_table, section_data and gaps differ in length")
    if pe.pe_offset != DOS_HEADER_SIZE + len(pe.dos_stub):
        raise InconsistentLayout(
            f"pe_offset 0x{pe.pe_offset:x} does not follow the {len(pe.dos_stub)}-byte DOS stub"
        )
    if len(pe.optional_header.raw) != pe.coff_header.size_of_optional_header:
        raise InconsistentLayout("optional header length disagrees with the COFF header")

    out = bytearray()
    out += pe.dos_header.pack()
    out += pe.dos_stub
    out += PE_SIGNATURE
    out += pe.coff_header.pack()
    out += pe.optional_header.pack()
    for s in pe.section_table:
        out += s.pack()
    out += pe.header_tail

    for i in pe.file_order():
        s = pe.section_table[i]
        if len(pe.section_data[i]) != s.raw_size:
            raise InconsistentLayout(f"section {i} holds {len(pe.section_data[i])} bytes, header says {s.raw_size}")
        start = len(out) + len(pe.gaps[i])
        if start > s.raw_pointer:
            raise InconsistentLayout(f"section {i} ({s.label}) overlaps the preceding region")
        if start < s.raw_pointer:
            raise InconsistentLayout(f"unaccounted bytes before section {i} ({s.label})")
        out += pe.gaps[i]
        out += pe.section_data[i]
    for i, s in enumerate(pe.section_table):
        if s.raw_size == 0 and (pe.section_data[i] or pe.gaps[i]):
            raise InconsistentLayout(f"section {i} has no raw size but carries bytes")
    out += pe.overlay
    return bytes(out)


class Violation(NamedTuple):
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def validate(pe: PeFile) -> list[Violation]:
    """Report every broken layout invariant; an empty list means the file is clean."""
    report: list[Violation] = []
    opt = pe.optional_header
    if pe.dos_header.magic != MZ_MAGIC:
        report.append(Violation("mz_magic", "DOS header does not start with 'MZ'"))
    if pe.pe_offset != DOS_HEADER_SIZE + len(pe.dos_stub):
        report.append(Violation("pe_offset", "pe_offset does not point past the DOS stub"))
    if pe.coff_header.number_of_sections != len(pe.section_table):
        report.append(
            Violation(
                "section_count",
                f"COFF header declares {pe.coff_header.number_of_sections} sections, "
                f"table has {len(pe.section_table)}",
            )
        )
    if opt.file_alignment == 0 or opt.section_alignment == 0:
        report.append(Violation("alignment", "zero file or section alignment"))
        return report

    length = pe.layout_length()
    if opt.size_of_headers < pe.section_table_end:
        report.append(Violation("size_of_headers", "size_of_headers does not cover the section table"))

    image_end = 0
    spans = []
    for i, s in enumerate(pe.section_table):
        tag = f"section {i} ({s.label})"
        if len(s.name) != 8:
            report.append(Violation("section_name", f"{tag} name is {len(s.name)} bytes, expected 8"))
        if s.virtual_address % opt.section_alignment:
            report.append(
                Violation("virtual_alignment", f"{tag} virtual_address 0x{s.virtual_address:x} "
                          f"not a multiple of section_alignment 0x{opt.section_alignment:x}")
            )
        image_end = max(image_end, s.virtual_address + max(s.virtual_size, s.raw_size))
        if s.raw_size == 0:
            continue
        if s.raw_pointer % opt.file_alignment:
            report.append(
                Violation("raw_alignment", f"{tag} raw_pointer 0x{s.raw_pointer:x} "
                          f"not a multiple of file_alignment 0x{opt.file_alignment:x}")
            )
        if s.raw_pointer + s.raw_size > length:
            report.append(Violation("bounds", f"{tag} raw data extends past end of file"))
        if s.raw_pointer < opt.size_of_headers:
            report.append(Violation("header_overlap", f"{tag} raw data overlaps the headers"))
        if i < len(pe.section_data) and len(pe.section_data[i]) != s.raw_size:
            report.append(Violation("data_length", f"{tag} carries {len(pe.section_data[i])} bytes"))
        spans.append((s.raw_pointer, s.raw_pointer + s.raw_size, i))

    spans.sort()
    for (a0, a1, i), (b0, b1, j) in zip(spans, spans[1:]):
        if b0 < a1:
            report.append(Violation("overlap", f"sections {i} and {j} share raw bytes"))

    if opt.size_of_image < align_up(image_end, opt.section_alignment):
        report.append(Violation("size_of_image", f"size_of_image 0x{opt.size_of_image:x} "
                                f"does not cover sections ending at 0x{image_end:x}"))
    return report

"""Functionality-preserving perturbation injection.

Two manipulations are supported: appending bytes after the end of the file
(padding) and inserting a new, inert section whose raw data sits right before
the first original section (inject-section). Every injection returns an
:class:`InjectionRecord` that pins down exactly where the perturbation lives,
which is what makes separation and re-injection exact.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

from fgam import pe_format
from fgam.errors import InvalidSpec, LengthMismatch, NoHeaderSlack, RangeOutOfBounds
from fgam.pe_format import (
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_MEM_READ,
    SECTION_HEADER_SIZE,
    PeFile,
    SectionHeader,
    align_up,
)

DEFAULT_SECTION_NAME = b".rsrc"
INERT_CHARACTERISTICS = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ


class Method(str, enum.Enum):
    PADDING = "padding"
    INJECT_SECTION = "inject-section"


class Placement(str, enum.Enum):
    BEFORE_FIRST_SECTION = "before-first-section"


@dataclass(frozen=True)
class InjectionSpec:
    method: Method
    amount: int
    section_name: bytes = DEFAULT_SECTION_NAME
    placement: Placement = Placement.BEFORE_FIRST_SECTION

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "placement", Placement(self.placement))
        if self.amount <= 0:
            raise InvalidSpec(f"injection amount must be positive, got {self.amount}")
        if len(self.section_name) > 8:
            raise InvalidSpec(f"section name {self.section_name!r} longer than 8 bytes")

    @property
    def padded_name(self) -> bytes:
        return self.section_name.ljust(8, b"\x00")


@dataclass(frozen=True)
class InjectionRecord:
    method: Method
    ranges: tuple[tuple[int, int], ...]
    rounded_amount: int
    section_name: bytes = DEFAULT_SECTION_NAME

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "section_name", bytes(self.section_name).rstrip(b"\x00"))

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "ranges": [list(r) for r in self.ranges],
            "rounded_amount": self.rounded_amount,
            "section_name": self.section_name.decode("latin-1"),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionRecord":
        return cls(
            method=Method(d["method"]),
            ranges=tuple((int(a), int(b)) for a, b in d["ranges"]),
            rounded_amount=int(d["rounded_amount"]),
            section_name=d.get("section_name", DEFAULT_SECTION_NAME.decode()).encode("latin-1"),
        )

    def spec(self) -> InjectionSpec:
        return InjectionSpec(self.method, self.rounded_amount, self.section_name)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "InjectionRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _pad(pe: PeFile, spec: InjectionSpec, payload: bytes) -> tuple[PeFile, InjectionRecord]:
    start = pe.layout_length()
    out = pe.evolve(overlay=pe.overlay + payload, raw_length=start + len(payload))
    return out, InjectionRecord(Method.PADDING, ((start, len(payload)),), len(payload))


def _inject_section(pe: PeFile, spec: InjectionSpec, payload: bytes) -> tuple[PeFile, InjectionRecord]:
    opt = pe.optional_header
    order = pe.file_order()
    if not order:
        raise InvalidSpec("inject-section needs at least one section with raw data")
    first = pe.section_table[order[0]].raw_pointer
    new_table_end = pe.section_table_end + SECTION_HEADER_SIZE
    slot = pe.header_tail[:SECTION_HEADER_SIZE]
    if new_table_end > first or len(slot) < SECTION_HEADER_SIZE or any(slot):
        raise NoHeaderSlack(
            f"section table ends at 0x{pe.section_table_end:x}; first section raw data at "
            f"0x{first:x} leaves no zeroed room for another {SECTION_HEADER_SIZE}-byte header"
        )

    rounded = align_up(len(payload), opt.file_alignment)
    region = payload + bytes(rounded - len(payload))
    last_va_end = max(
        (s.virtual_address + align_up(max(s.virtual_size, s.raw_size, 1), opt.section_alignment)
         for s in pe.section_table),
        default=align_up(opt.size_of_headers, opt.section_alignment),
    )
    new_va = align_up(last_va_end, opt.section_alignment)
    header = SectionHeader(
        name=spec.padded_name,
        virtual_size=rounded,
        virtual_address=new_va,
        raw_size=rounded,
        raw_pointer=first,
        characteristics=INERT_CHARACTERISTICS,
    )
    shifted = tuple(
        s if s.raw_size == 0 else
        pe_format.SectionHeader(s.name, s.virtual_size, s.virtual_address, s.raw_size,
                                s.raw_pointer + rounded, s.characteristics, s.extra)
        for s in pe.section_table
    )
    coff = pe.coff_header
    sym = coff.pointer_to_symbol_table
    if sym >= first:
        sym += rounded
    coff = pe_format.CoffHeader(coff.machine, coff.number_of_sections + 1, coff.time_date_stamp, sym,
                                coff.number_of_symbols, coff.size_of_optional_header, coff.characteristics)
    new_opt = pe_format.OptionalHeader(
        raw=opt.raw,
        magic=opt.magic,
        entry_point=opt.entry_point,
        section_alignment=opt.section_alignment,
        file_alignment=opt.file_alignment,
        size_of_image=max(opt.size_of_image, align_up(new_va + rounded, opt.section_alignment)),
        size_of_headers=max(opt.size_of_headers, align_up(new_table_end, opt.file_alignment)),
    )
    out = pe.evolve(
        raw_length=pe.layout_length() + rounded,
        coff_header=coff,
        optional_header=new_opt,
        section_table=shifted + (header,),
        section_data=pe.section_data + (region,),
        header_tail=pe.header_tail[SECTION_HEADER_SIZE:],
        gaps=pe.gaps + (b"",),
    )
    record = InjectionRecord(Method.INJECT_SECTION, ((first, rounded),), rounded, spec.padded_name)
    return out, record


def inject(pe: PeFile, spec: InjectionSpec, payload: bytes) -> tuple[PeFile, InjectionRecord]:
    """Inject ``payload`` into ``pe`` with the manipulation named by ``spec``."""
    payload = bytes(payload)
    if len(payload) != spec.amount:
        raise InvalidSpec(f"payload is {len(payload)} bytes, spec asks for {spec.amount}")
    if spec.method is Method.PADDING:
        return _pad(pe, spec, payload)
    return _inject_section(pe, spec, payload)


def separate(adversarial: bytes, record: InjectionRecord) -> bytes:
    """Pull the perturbation bytes back out of an injected file."""
    for off, length in record.ranges:
        if off < 0 or length < 0 or off + length > len(adversarial):
            raise RangeOutOfBounds(f"range ({off}, {length}) outside a {len(adversarial)}-byte file")
    return b"".join(bytes(adversarial[off : off + length]) for off, length in record.ranges)


def reinject(pe: PeFile, record: InjectionRecord, new_payload: bytes) -> bytes:
    """Rebuild the injected file from the pristine ``pe`` with ``new_payload`` in place."""
    new_payload = bytes(new_payload)
    if len(new_payload) != record.rounded_amount:
        raise LengthMismatch(f"payload is {len(new_payload)} bytes, record holds {record.rounded_amount}")
    out, again = inject(pe, record.spec(), new_payload)
    if again.ranges != record.ranges:
        raise LengthMismatch("record does not describe an injection into this file")
    return pe_format.serialize(out)

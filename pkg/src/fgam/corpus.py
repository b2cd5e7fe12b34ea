"""Deterministic synthetic PE corpus in two learnable classes.

Files are inert data wrapped in valid PE headers. Label 1 ("malware"
analogue) mixes code-like bytes with large high-entropy blobs and carries few
sections; label 0 ("benign" analogue) is dominated by low-entropy structure
(strings, zero runs, pointer tables) spread over more, conventionally named
sections. The class mixtures overlap on purpose so detectors land in the
90-99% accuracy band rather than saturating.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fgam import pe_format
from fgam.errors import SpecInvalid
from fgam.pe_format import (
    IMAGE_SCN_CNT_CODE,
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_MEM_EXECUTE,
    IMAGE_SCN_MEM_READ,
    IMAGE_SCN_MEM_WRITE,
    align_up,
)

MALWARE = 1
BENIGN = 0
LABEL_NAMES = {MALWARE: "malware", BENIGN: "benign"}

FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
IMAGE_BASE = 0x400000

_DOS_STUB = bytes.fromhex("0e1fba0e00b409cd21b8014ccd21") + b"This program cannot be run in DOS mode.\r\r\n$"
_DOS_STUB = _DOS_STUB + bytes(64 - len(_DOS_STUB))

_CODE = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ
_RDATA = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ
_DATA = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE

# opcode-ish alphabet with a skewed frequency profile (~5 bits/byte)
_OPCODES = np.array(
    [0x00, 0x8B, 0x89, 0x48, 0xFF, 0xE8, 0x83, 0x4C, 0x24, 0x45, 0x0F, 0x85, 0x74, 0xC3, 0x55, 0x8D,
     0x33, 0xC0, 0x01, 0x10, 0x08, 0x04, 0x75, 0xEB, 0x50, 0x53, 0x56, 0x57, 0x5D, 0x5E, 0x5F, 0xCC,
     0x90, 0xB8, 0x3B, 0x2B, 0x84, 0xC7, 0x44, 0x0C, 0x14, 0x18, 0x20, 0x28, 0x30, 0x40, 0x41, 0x49],
    dtype=np.uint8,
)
_OPCODE_P = 1.0 / np.arange(1, len(_OPCODES) + 1) ** 0.9
_OPCODE_P /= _OPCODE_P.sum()

_WORDS = (
    b"error file open read write buffer window message string value system "
    b"format version config user data table index handle process thread memory "
    b"Microsoft Corporation kernel32 dll GetProcAddress LoadLibrary CreateFile "
).split()


@dataclass(frozen=True)
class CorpusSpec:
    n_malware: int = 200
    n_benign: int = 200
    min_size: int = 4 * 1024
    max_size: int = 60 * 1024
    seed: int = 0
    split_ratio: float = 0.7
    pe32_plus_fraction: float = 0.2
    overlay_fraction: float = 0.1

    def check(self) -> None:
        if self.n_malware < 1 or self.n_benign < 1:
            raise SpecInvalid("both classes need at least one file")
        if not 0 < self.split_ratio < 1:
            raise SpecInvalid(f"split_ratio {self.split_ratio} outside (0, 1)")
        if not 2048 <= self.min_size <= self.max_size:
            raise SpecInvalid(f"bad size range [{self.min_size}, {self.max_size}]")
        if not (0 <= self.pe32_plus_fraction <= 1 and 0 <= self.overlay_fraction <= 1):
            raise SpecInvalid("fractions must lie in [0, 1]")


@dataclass(frozen=True)
class Sample:
    id: str
    label: int
    data: bytes
    seed: int

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


# -- byte texture generators --------------------------------------------------

def _code(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.choice(_OPCODES, size=n, p=_OPCODE_P)


def _random(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 256, size=n, dtype=np.uint8)


def _text(rng: np.random.Generator, n: int) -> np.ndarray:
    out = bytearray()
    while len(out) < n:
        out += _WORDS[rng.integers(len(_WORDS))]
        out += b"\x00" if rng.random() < 0.2 else b" "
    return np.frombuffer(bytes(out[:n]), dtype=np.uint8)


def _zeros(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.zeros(n, dtype=np.uint8)


def _table(rng: np.random.Generator, n: int) -> np.ndarray:
    base = int(rng.integers(0x1000, 0x8000)) + IMAGE_BASE
    step = int(rng.choice([4, 8, 16, 32]))
    words = base + step * np.arange(-(-n // 4), dtype=np.uint64)
    return np.frombuffer(words.astype("<u4").tobytes()[:n], dtype=np.uint8)


_TEXTURES = {"code": _code, "random": _random, "text": _text, "zeros": _zeros, "table": _table}

# block-type mixtures per class; overlapping supports keep the task imperfect
_MIXTURES = {
    MALWARE: {"code": 0.36, "random": 0.55, "text": 0.03, "zeros": 0.03, "table": 0.03},
    BENIGN: {"code": 0.40, "random": 0.05, "text": 0.25, "zeros": 0.15, "table": 0.15},
}


def _fill(rng: np.random.Generator, n: int, label: int) -> bytes:
    mix = _MIXTURES[label]
    kinds = list(mix)
    probs = np.array([mix[k] for k in kinds])
    parts = []
    remaining = n
    while remaining > 0:
        size = min(remaining, int(rng.integers(256, 4097)))
        kind = kinds[rng.choice(len(kinds), p=probs)]
        parts.append(_TEXTURES[kind](rng, size))
        remaining -= size
    return np.concatenate(parts).tobytes()


# -- PE assembly --------------------------------------------------------------

@dataclass(frozen=True)
class SectionPlan:
    name: str
    data: bytes
    characteristics: int
    virtual_size: int | None = None


def _optional_header(pe32_plus: bool, entry_point: int, size_of_image: int,
                     size_of_headers: int, code_size: int, subsystem: int) -> bytes:
    size = 240 if pe32_plus else 224
    raw = bytearray(size)
    struct.pack_into("<HBB", raw, 0, 0x20B if pe32_plus else 0x10B, 14, 0)
    struct.pack_into("<I", raw, 4, code_size)
    struct.pack_into("<I", raw, 16, entry_point)
    struct.pack_into("<I", raw, 20, SECTION_ALIGNMENT)
    if pe32_plus:
        struct.pack_into("<Q", raw, 24, 0x140000000)
    else:
        struct.pack_into("<II", raw, 24, 0, IMAGE_BASE)
    struct.pack_into("<II", raw, 32, SECTION_ALIGNMENT, FILE_ALIGNMENT)
    struct.pack_into("<HHHHHH", raw, 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<II", raw, 56, size_of_image, size_of_headers)
    struct.pack_into("<HH", raw, 68, subsystem, 0x8140)
    if pe32_plus:
        struct.pack_into("<QQQQ", raw, 72, 0x100000, 0x1000, 0x100000, 0x1000)
        struct.pack_into("<I", raw, 108, 16)
    else:
        struct.pack_into("<IIII", raw, 72, 0x100000, 0x1000, 0x100000, 0x1000)
        struct.pack_into("<I", raw, 92, 16)
    return bytes(raw)


def assemble_pe(
    sections: list[SectionPlan],
    *,
    pe32_plus: bool = False,
    size_of_headers: int = 0x400,
    overlay: bytes = b"",
    timestamp: int = 0x5F000000,
    entry_offset: int = 0,
    subsystem: int = 2,
) -> bytes:
    """Build a valid PE image from section plans.

    Raw data is padded to FILE_ALIGNMENT and placed contiguously after the
    headers; virtual addresses follow in SECTION_ALIGNMENT steps.
    """
    pe_offset = 0x40 + len(_DOS_STUB)
    opt_size = 240 if pe32_plus else 224
    table_end = pe_offset + 4 + 20 + opt_size + 40 * len(sections)
    if table_end > size_of_headers:
        raise SpecInvalid(f"{len(sections)} sections do not fit in {size_of_headers} header bytes")

    headers, blobs = [], []
    raw_ptr = size_of_headers
    va = SECTION_ALIGNMENT
    for plan in sections:
        raw = plan.data + bytes(align_up(len(plan.data), FILE_ALIGNMENT) - len(plan.data))
        vsize = plan.virtual_size if plan.virtual_size is not None else len(plan.data)
        headers.append(pe_format.SectionHeader(
            name=plan.name.encode("latin-1")[:8].ljust(8, b"\x00"),
            virtual_size=vsize,
            virtual_address=va,
            raw_size=len(raw),
            raw_pointer=raw_ptr,
            characteristics=plan.characteristics,
        ))
        blobs.append(raw)
        raw_ptr += len(raw)
        va += align_up(max(vsize, len(raw), 1), SECTION_ALIGNMENT)

    code = [h for h in headers if h.characteristics & IMAGE_SCN_CNT_CODE]
    first_code = code[0] if code else headers[0]
    entry = first_code.virtual_address + entry_offset
    coff = pe_format.CoffHeader(
        machine=0x8664 if pe32_plus else 0x14C,
        number_of_sections=len(sections),
        time_date_stamp=timestamp,
        pointer_to_symbol_table=0,
        number_of_symbols=0,
        size_of_optional_header=opt_size,
        characteristics=0x22 if pe32_plus else 0x102,
    )
    opt = _optional_header(pe32_plus, entry, va, size_of_headers,
                           sum(h.raw_size for h in code), subsystem)

    dos = bytearray(64)
    dos[:2] = b"MZ"
    struct.pack_into("<HHHHH", dos, 2, 0x90, 3, 0, 4, 0)
    struct.pack_into("<H", dos, 0x18, 0x40)
    struct.pack_into("<I", dos, 0x3C, pe_offset)

    out = bytearray(dos) + _DOS_STUB + pe_format.PE_SIGNATURE + coff.pack() + opt
    for h in headers:
        out += h.pack()
    out += bytes(size_of_headers - len(out))
    for blob in blobs:
        out += blob
    return bytes(out + overlay)


_BENIGN_LAYOUT = [(".text", _CODE), (".rdata", _RDATA), (".data", _DATA), (".rsrc", _RDATA), (".reloc", _RDATA)]
_MALWARE_NAMES = [(".text", _CODE), (".data", _DATA), (".code", _CODE), ("UPX1", _DATA)]


def make_sample(label: int, seed: int, index: int, spec: CorpusSpec) -> Sample:
    rng = np.random.default_rng([seed, index])
    target = int(rng.integers(spec.min_size, spec.max_size + 1))
    overlay_len = int(rng.integers(16, 512)) if rng.random() < spec.overlay_fraction else 0
    if label == MALWARE:
        n_sec = int(rng.integers(1, 4))
        picks = [_MALWARE_NAMES[0]] + [_MALWARE_NAMES[i] for i in rng.choice(np.arange(1, 4), n_sec - 1, replace=False)]
    else:
        text, rdata, data, rsrc, reloc = _BENIGN_LAYOUT
        picks = [text, rdata] + ([data] if rng.random() < 0.7 else []) + [rsrc]
        picks += [reloc] if rng.random() < 0.5 else []
        n_sec = len(picks)
    # reserve worst-case alignment padding and the overlay so the file never exceeds target
    # and keep enough body that truncated dirichlet shares still reach min_size
    body = max(target - 0x400 - overlay_len - n_sec * (FILE_ALIGNMENT + 64),
               spec.min_size - 0x400 - overlay_len + n_sec, FILE_ALIGNMENT)
    weights = rng.dirichlet(np.full(n_sec, 2.0))
    sizes = np.maximum((weights * body).astype(int), 64)
    plans = [SectionPlan(name, _fill(rng, int(sz), label), chars) for (name, chars), sz in zip(picks, sizes)]
    overlay = _fill(rng, overlay_len, label) if overlay_len else b""
    data = assemble_pe(
        plans,
        pe32_plus=bool(rng.random() < spec.pe32_plus_fraction),
        overlay=overlay,
        timestamp=int(rng.integers(0x50000000, 0x65000000)),
        entry_offset=int(rng.integers(0, 64)) * 16,
    )
    return Sample(id=f"{LABEL_NAMES[label]}_{index:05d}", label=label, data=data, seed=seed)


def generate(spec: CorpusSpec) -> list[Sample]:
    """Generate the labeled corpus; identical output for identical specs."""
    spec.check()
    samples = [make_sample(MALWARE, spec.seed, i, spec) for i in range(spec.n_malware)]
    samples += [make_sample(BENIGN, spec.seed, 100_000 + i, spec) for i in range(spec.n_benign)]
    return samples


def no_slack_pe(seed: int = 0) -> bytes:
    """A valid PE whose header region cannot hold another section header."""
    rng = np.random.default_rng(seed)
    plans = [SectionPlan(name, _fill(rng, 1500, BENIGN), chars) for name, chars in _BENIGN_LAYOUT[:3]]
    # 0x80 + 24 + 224 + 3*40 = 0x1F0 leaves 16 bytes before 0x200
    return assemble_pe(plans, size_of_headers=0x200)


def _train_count(n: int, ratio: float) -> int:
    if n < 2:
        return n
    return min(max(int(np.floor(ratio * n + 0.5)), 1), n - 1)


def split(samples: list[Sample], ratio: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Stratified, seed-deterministic train/test split.

    The overall train count is ``round_half_up(ratio * N)`` clamped to
    ``[1, N - 1]``; per-class quotas use largest-remainder allocation so each
    class keeps its proportion within one file.
    """
    if not 0 < ratio < 1:
        raise SpecInvalid(f"ratio {ratio} outside (0, 1)")
    labels = sorted({s.label for s in samples})
    by_label = {lab: [s for s in samples if s.label == lab] for lab in labels}
    n_train = _train_count(len(samples), ratio)
    quotas = {lab: ratio * len(by_label[lab]) for lab in labels}
    take = {lab: int(np.floor(q)) for lab, q in quotas.items()}
    leftover = n_train - sum(take.values())
    for lab in sorted(labels, key=lambda lab: (-(quotas[lab] - take[lab]), lab)):
        if leftover <= 0:
            break
        if take[lab] < len(by_label[lab]):
            take[lab] += 1
            leftover -= 1

    rng = np.random.default_rng(seed)
    train, test = [], []
    for lab in labels:
        group = by_label[lab]
        order = rng.permutation(len(group))
        train += [group[i] for i in order[: take[lab]]]
        test += [group[i] for i in order[take[lab]:]]
    return train, test


MANIFEST_FIELDS = ("id", "label", "size", "seed", "sha256")


def write_corpus(samples: list[Sample], directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.tsv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            (directory / f"{s.id}.exe").write_bytes(s.data)
            writer.writerow([s.id, LABEL_NAMES[s.label], len(s.data), s.seed, s.sha256])
    return manifest


def read_corpus(directory: Path) -> list[Sample]:
    directory = Path(directory)
    labels = {v: k for k, v in LABEL_NAMES.items()}
    out = []
    with (directory / "manifest.tsv").open(newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            data = (directory / f"{row['id']}.exe").read_bytes()
            if hashlib.sha256(data).hexdigest() != row["sha256"]:
                raise SpecInvalid(f"{row['id']}: sha256 mismatch against manifest")
            out.append(Sample(row["id"], labels[row["label"]], data, int(row["seed"])))
    return out

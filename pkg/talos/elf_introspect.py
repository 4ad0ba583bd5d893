"""ELF64 introspection: headers, memory map, symbols, relocations.

The parser is total over arbitrary input. Every table size and offset is
validated against the file length before it is read, and every failure
surfaces as an ElfError subclass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntFlag
import hashlib
import struct

from .codec import lp, lp_str, u8, u16, u32, u64
from .const import U64_MAX
from .exceptions import (
    BadElfMagic,
    CorruptStringTable,
    MissingTextSection,
    OutOfBoundsOffset,
    OverlappingSegments,
    TruncatedHeader,
    UnsupportedClass,
)
from .sccfg import SysCallGraph, graph_canonical_bytes

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1

ET_EXEC = 2
EM_X86_64 = 62

PT_LOAD = 1

SHT_NULL = 0
SHT_PROGBITS = 1
SHT_SYMTAB = 2
SHT_STRTAB = 3
SHT_RELA = 4
SHT_NOBITS = 8
SHT_REL = 9
SHT_DYNSYM = 11

SHF_WRITE = 0x1
SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4
SHF_INFO_LINK = 0x40

SHN_UNDEF = 0
SHN_LORESERVE = 0xFF00

EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
PHDR = struct.Struct("<IIQQQQQQ")
SHDR = struct.Struct("<IIQQQQIIQQ")
SYM = struct.Struct("<IBBHQQ")
RELA = struct.Struct("<QQq")
REL = struct.Struct("<QQ")


class Perm(IntFlag):
    """Segment permissions, bit-compatible with ELF p_flags."""

    NONE = 0
    X = 1
    W = 2
    R = 4

    @property
    def rwx(self) -> str:
        """Return the permissions as an rwx string."""
        return "".join(
            ch if self & bit else "-" for ch, bit in (("r", Perm.R), ("w", Perm.W), ("x", Perm.X))
        )

    @classmethod
    def parse(cls, text: str) -> Perm:
        """Parse an rwx string."""
        perm = cls.NONE
        for ch, bit in zip(text, (cls.R, cls.W, cls.X), strict=False):
            if ch != "-":
                perm |= bit
        return perm


@dataclass(frozen=True)
class ProgramHeader:
    """One program header entry."""

    p_type: int
    flags: Perm
    offset: int
    vaddr: int
    filesz: int
    memsz: int
    align: int


@dataclass(frozen=True)
class SectionRecord:
    """One section header with its resolved name."""

    name: str
    vaddr: int
    size: int
    flags: Perm
    file_offset: int
    sh_type: int = SHT_PROGBITS
    link: int = 0
    info: int = 0
    entsize: int = 0
    raw_flags: int = 0

    @property
    def file_size(self) -> int:
        """Return the bytes this section occupies in the file."""
        return 0 if self.sh_type == SHT_NOBITS else self.size


@dataclass(frozen=True)
class ElfImage:
    """Parsed ELF64 little-endian image."""

    raw: bytes
    elf_class: int
    entry_point: int
    elf_type: int
    machine: int
    program_headers: tuple[ProgramHeader, ...]
    section_headers: tuple[SectionRecord, ...]
    name: str = ""

    @property
    def sections(self) -> tuple[SectionRecord, ...]:
        """Return the section records, including the null section."""
        return self.section_headers

    def section_named(self, name: str) -> SectionRecord | None:
        """Return the first section called name."""
        return next((s for s in self.section_headers if s.name == name), None)

    def section_data(self, section: SectionRecord) -> bytes:
        """Return the file bytes of a section."""
        return self.raw[section.file_offset : section.file_offset + section.file_size]


def _check_range(raw: bytes, offset: int, size: int, what: str) -> None:
    if offset > len(raw) or size > len(raw) - offset:
        raise OutOfBoundsOffset(
            f"{what} at {offset:#x}+{size:#x} exceeds file size {len(raw):#x}"
        )


def _cstring(table: bytes, offset: int, what: str) -> str:
    if offset >= len(table):
        raise CorruptStringTable(f"{what} name index {offset} past table end {len(table)}")
    end = table.find(b"\x00", offset)
    if end < 0:
        raise CorruptStringTable(f"{what} name at {offset} is not terminated")
    return table[offset:end].decode("utf-8", errors="replace")


def parse_elf(raw: bytes, name: str = "") -> ElfImage:
    """Parse and bounds-check an ELF64 little-endian image."""
    raw = bytes(raw)
    if raw[:4] != ELF_MAGIC:
        raise BadElfMagic("missing ELF magic")
    if len(raw) < EHDR.size:
        raise TruncatedHeader(f"file has {len(raw)} bytes, header needs {EHDR.size}")
    (
        ident,
        e_type,
        e_machine,
        _version,
        e_entry,
        e_phoff,
        e_shoff,
        _flags,
        _ehsize,
        e_phentsize,
        e_phnum,
        e_shentsize,
        e_shnum,
        e_shstrndx,
    ) = EHDR.unpack_from(raw)
    if ident[4] != ELFCLASS64:
        raise UnsupportedClass(f"ELF class {ident[4]} is not ELF64")
    if ident[5] != ELFDATA2LSB:
        raise UnsupportedClass(f"ELF data encoding {ident[5]} is not little-endian")

    program_headers: list[ProgramHeader] = []
    if e_phnum:
        if e_phentsize < PHDR.size:
            raise TruncatedHeader(f"program header entry size {e_phentsize}")
        _check_range(raw, e_phoff, e_phnum * e_phentsize, "program header table")
        for index in range(e_phnum):
            p_type, p_flags, p_offset, p_vaddr, _paddr, p_filesz, p_memsz, p_align = (
                PHDR.unpack_from(raw, e_phoff + index * e_phentsize)
            )
            if p_type == PT_LOAD:
                _check_range(raw, p_offset, p_filesz, f"segment {index}")
            program_headers.append(
                ProgramHeader(
                    p_type=p_type,
                    flags=Perm(p_flags & 0x7),
                    offset=p_offset,
                    vaddr=p_vaddr,
                    filesz=p_filesz,
                    memsz=p_memsz,
                    align=p_align,
                )
            )

    headers: list[tuple[int, ...]] = []
    if e_shnum:
        if e_shentsize < SHDR.size:
            raise TruncatedHeader(f"section header entry size {e_shentsize}")
        _check_range(raw, e_shoff, e_shnum * e_shentsize, "section header table")
        for index in range(e_shnum):
            header = SHDR.unpack_from(raw, e_shoff + index * e_shentsize)
            if header[1] not in (SHT_NOBITS, SHT_NULL):
                _check_range(raw, header[4], header[5], f"section {index}")
            headers.append(header)

    names = b""
    if headers and e_shstrndx != SHN_UNDEF:
        if e_shstrndx >= len(headers):
            raise OutOfBoundsOffset(f"section name table index {e_shstrndx}")
        strtab = headers[e_shstrndx]
        names = raw[strtab[4] : strtab[4] + strtab[5]] if strtab[1] != SHT_NOBITS else b""

    sections = []
    for header in headers:
        (sh_name, sh_type, sh_flags, sh_addr, sh_offset, sh_size) = header[:6]
        (sh_link, sh_info, _align, sh_entsize) = header[6:]
        perm = Perm.NONE
        if sh_flags & SHF_ALLOC:
            perm |= Perm.R
        if sh_flags & SHF_WRITE:
            perm |= Perm.W
        if sh_flags & SHF_EXECINSTR:
            perm |= Perm.X
        sections.append(
            SectionRecord(
                name=_cstring(names, sh_name, "section") if names else "",
                vaddr=sh_addr,
                size=sh_size,
                flags=perm,
                file_offset=sh_offset,
                sh_type=sh_type,
                link=sh_link,
                info=sh_info,
                entsize=sh_entsize,
                raw_flags=sh_flags,
            )
        )

    return ElfImage(
        raw=raw,
        elf_class=ident[4],
        entry_point=e_entry,
        elf_type=e_type,
        machine=e_machine,
        program_headers=tuple(program_headers),
        section_headers=tuple(sections),
        name=name,
    )


@dataclass(frozen=True)
class MemoryRegion:
    """One mapped range of the memory map."""

    start: int
    end: int
    permissions: Perm
    backing: str


@dataclass(frozen=True)
class MemoryMap:
    """Loadable segments in address order."""

    entries: tuple[MemoryRegion, ...] = field(default_factory=tuple)


def build_memory_map(img: ElfImage, base_vaddr: int = 0, backing: str | None = None) -> MemoryMap:
    """Derive the memory map of the loadable segments."""
    label = img.name if backing is None else backing
    regions = []
    for header in img.program_headers:
        if header.p_type != PT_LOAD or header.memsz == 0:
            continue
        start = base_vaddr + header.vaddr
        end = start + header.memsz
        if end > U64_MAX:
            raise OutOfBoundsOffset(f"segment at {start:#x} wraps the address space")
        regions.append(MemoryRegion(start, end, header.flags, label))
    regions.sort(key=lambda region: region.start)
    for prev, cur in zip(regions, regions[1:], strict=False):
        if cur.start < prev.end:
            raise OverlappingSegments(
                f"{prev.start:#x}-{prev.end:#x} overlaps {cur.start:#x}-{cur.end:#x}"
            )
    return MemoryMap(tuple(regions))


@dataclass(frozen=True)
class SymbolRecord:
    """One symbol table entry."""

    name: str
    value: int
    size: int
    section_index: int


@dataclass(frozen=True)
class RelocationRecord:
    """One relocation entry."""

    offset: int
    symbol_index: int
    reloc_type: int
    addend: int


def _symbol_table(img: ElfImage) -> SectionRecord | None:
    for kind in (SHT_SYMTAB, SHT_DYNSYM):
        for section in img.section_headers:
            if section.sh_type == kind:
                return section
    return None


def _symbol_count(section: SectionRecord) -> int:
    entsize = section.entsize or SYM.size
    if entsize < SYM.size:
        raise CorruptStringTable(f"symbol entry size {entsize}")
    return section.size // entsize


def extract_symbols(img: ElfImage) -> list[SymbolRecord]:
    """Return symbols in table order, skipping the null entry."""
    table = _symbol_table(img)
    if table is None:
        return []
    if table.link >= len(img.section_headers):
        raise CorruptStringTable(f"symbol string table index {table.link}")
    strings = img.section_data(img.section_headers[table.link])
    entsize = table.entsize or SYM.size
    symbols = []
    for index in range(1, _symbol_count(table)):
        st_name, _info, _other, st_shndx, st_value, st_size = SYM.unpack_from(
            img.raw, table.file_offset + index * entsize
        )
        if st_shndx != SHN_UNDEF and st_shndx < SHN_LORESERVE and st_shndx >= len(
            img.section_headers
        ):
            raise OutOfBoundsOffset(f"symbol {index} section index {st_shndx}")
        symbols.append(
            SymbolRecord(
                name=_cstring(strings, st_name, "symbol"),
                value=st_value,
                size=st_size,
                section_index=st_shndx,
            )
        )
    return symbols


def extract_relocations(img: ElfImage) -> list[RelocationRecord]:
    """Return relocations from every REL/RELA section in table order."""
    records = []
    for section in img.section_headers:
        if section.sh_type not in (SHT_RELA, SHT_REL):
            continue
        layout = RELA if section.sh_type == SHT_RELA else REL
        entsize = section.entsize or layout.size
        if entsize < layout.size:
            raise OutOfBoundsOffset(f"relocation entry size {entsize}")
        limit = 0
        if 0 < section.link < len(img.section_headers):
            limit = _symbol_count(img.section_headers[section.link])
        for index in range(section.size // entsize):
            fields = layout.unpack_from(img.raw, section.file_offset + index * entsize)
            r_offset, r_info = fields[0], fields[1]
            addend = fields[2] if layout is RELA else 0
            symbol_index = r_info >> 32
            if symbol_index and symbol_index >= limit:
                raise OutOfBoundsOffset(f"relocation {index} symbol index {symbol_index}")
            records.append(
                RelocationRecord(
                    offset=r_offset,
                    symbol_index=symbol_index,
                    reloc_type=r_info & 0xFFFFFFFF,
                    addend=addend,
                )
            )
    return records


def text_section_hash(img: ElfImage) -> bytes:
    """Return SHA-256 of the .text file bytes."""
    text = img.section_named(".text")
    if text is None:
        raise MissingTextSection(img.name or "<memory>")
    return hashlib.sha256(img.section_data(text)).digest()


@dataclass(frozen=True)
class PersistentReference:
    """Hash binding static layout to expected control flow."""

    digest: bytes
    symbols_hash: bytes
    segments_hash: bytes
    syscall_graph_hash: bytes


def symbols_canonical_bytes(symbols: list[SymbolRecord]) -> bytes:
    """Encode symbols sorted by (value, name)."""
    ordered = sorted(symbols, key=lambda s: (s.value, s.name, s.size, s.section_index))
    parts = [u32(len(ordered))]
    for symbol in ordered:
        parts.append(
            lp_str(symbol.name) + u64(symbol.value) + u64(symbol.size) + u16(symbol.section_index)
        )
    return b"".join(parts)


def memory_map_canonical_bytes(segments: MemoryMap) -> bytes:
    """Encode memory map entries in address order."""
    ordered = sorted(segments.entries, key=lambda r: (r.start, r.end))
    parts = [u32(len(ordered))]
    for region in ordered:
        parts.append(
            u64(region.start) + u64(region.end) + u8(int(region.permissions)) + lp(region.backing.encode())
        )
    return b"".join(parts)


def persistent_reference(
    symbols: list[SymbolRecord], segments: MemoryMap, graph: SysCallGraph
) -> PersistentReference:
    """Compute the persistent reference hash."""
    symbols_hash = hashlib.sha256(symbols_canonical_bytes(symbols)).digest()
    segments_hash = hashlib.sha256(memory_map_canonical_bytes(segments)).digest()
    graph_hash = hashlib.sha256(graph_canonical_bytes(graph)).digest()
    return PersistentReference(
        digest=hashlib.sha256(symbols_hash + segments_hash + graph_hash).digest(),
        symbols_hash=symbols_hash,
        segments_hash=segments_hash,
        syscall_graph_hash=graph_hash,
    )


def introspect_reference(
    elf_bytes: bytes, backing: str, graph: SysCallGraph, base_vaddr: int = 0
) -> PersistentReference:
    """Parse an image and compute its persistent reference in one step."""
    img = parse_elf(elf_bytes, name=backing)
    return persistent_reference(
        extract_symbols(img), build_memory_map(img, base_vaddr), graph
    )

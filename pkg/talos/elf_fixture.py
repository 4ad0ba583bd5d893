"""Fixture generator: minimal ELF64 files from a line-oriented description.

Description lines (``#`` starts a comment)::

    entry   <vaddr>
    section <name> <vaddr> <size> <rwx> <hex-bytes|zero>
    symbol  <name> <value> <size> <section|UND>
    reloc   <offset> <symindex> <type> <addend>

Sections whose permissions include ``r`` are allocated and get one PT_LOAD
program header each. ``zero`` makes a NOBITS section. Hex data shorter
than the declared size is zero-padded. Symbol indices in ``reloc`` lines
count from 1 in declaration order (index 0 is the null symbol).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .elf_introspect import (
    EHDR,
    ELF_MAGIC,
    ELFCLASS64,
    ELFDATA2LSB,
    EM_X86_64,
    ET_EXEC,
    PHDR,
    PT_LOAD,
    RELA,
    SHDR,
    SHF_ALLOC,
    SHF_EXECINSTR,
    SHF_INFO_LINK,
    SHF_WRITE,
    SHT_NOBITS,
    SHT_PROGBITS,
    SHT_REL,
    SHT_RELA,
    SHT_STRTAB,
    SHT_SYMTAB,
    SYM,
    ElfImage,
    Perm,
    extract_relocations,
    extract_symbols,
)
from .exceptions import FixtureSpecError

STB_GLOBAL = 1
STT_NOTYPE = 0
STT_OBJECT = 1
STT_FUNC = 2
UNDEFINED_SECTION = "UND"

_GENERATED_SECTIONS = frozenset({".symtab", ".strtab", ".rela.text", ".shstrtab"})


@dataclass(frozen=True)
class FixtureSection:
    """Section line of a description."""

    name: str
    vaddr: int
    size: int
    perms: Perm
    data: bytes | None

    @property
    def nobits(self) -> bool:
        """Return whether the section has no file bytes."""
        return self.data is None


@dataclass(frozen=True)
class FixtureSymbol:
    """Symbol line of a description."""

    name: str
    value: int
    size: int
    section: str


@dataclass(frozen=True)
class FixtureReloc:
    """Relocation line of a description."""

    offset: int
    symbol_index: int
    reloc_type: int
    addend: int


@dataclass
class FixtureDescription:
    """Parsed fixture description."""

    sections: list[FixtureSection] = field(default_factory=list)
    symbols: list[FixtureSymbol] = field(default_factory=list)
    relocs: list[FixtureReloc] = field(default_factory=list)
    entry: int | None = None


def _int(token: str, lineno: int) -> int:
    try:
        return int(token, 0)
    except ValueError as err:
        raise FixtureSpecError(f"line {lineno}: bad number {token!r}") from err


def parse_description(text: str) -> FixtureDescription:
    """Parse fixture description text."""
    desc = FixtureDescription()
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *args = line.split()
        if keyword == "entry" and len(args) == 1:
            desc.entry = _int(args[0], lineno)
        elif keyword == "section" and len(args) == 5:
            name, vaddr, size, rwx, content = args
            if len(rwx) != 3 or any(ch not in "rwx-" for ch in rwx):
                raise FixtureSpecError(f"line {lineno}: bad permissions {rwx!r}")
            size_value = _int(size, lineno)
            data: bytes | None = None
            if content != "zero":
                try:
                    data = bytes.fromhex(content)
                except ValueError as err:
                    raise FixtureSpecError(f"line {lineno}: bad hex data") from err
                if len(data) > size_value:
                    raise FixtureSpecError(f"line {lineno}: data exceeds section size")
                data = data.ljust(size_value, b"\x00")
            desc.sections.append(
                FixtureSection(name, _int(vaddr, lineno), size_value, Perm.parse(rwx), data)
            )
        elif keyword == "symbol" and len(args) == 4:
            name, value, size, section = args
            desc.symbols.append(
                FixtureSymbol(name, _int(value, lineno), _int(size, lineno), section)
            )
        elif keyword == "reloc" and len(args) == 4:
            offset, symindex, rtype, addend = (_int(a, lineno) for a in args)
            desc.relocs.append(FixtureReloc(offset, symindex, rtype, addend))
        else:
            raise FixtureSpecError(f"line {lineno}: cannot parse {line!r}")
    names = [s.name for s in desc.sections]
    if len(set(names)) != len(names):
        raise FixtureSpecError("duplicate section names")
    for symbol in desc.symbols:
        if symbol.section != UNDEFINED_SECTION and symbol.section not in names:
            raise FixtureSpecError(f"symbol {symbol.name} names unknown section")
    for reloc in desc.relocs:
        if not 0 <= reloc.symbol_index <= len(desc.symbols):
            raise FixtureSpecError(f"relocation symbol index {reloc.symbol_index}")
    return desc


class _StringTable:
    def __init__(self) -> None:
        self.data = bytearray(b"\x00")

    def add(self, name: str) -> int:
        offset = len(self.data)
        self.data += name.encode() + b"\x00"
        return offset


def _align(value: int, alignment: int = 8) -> int:
    return (value + alignment - 1) // alignment * alignment


def build_elf(desc: FixtureDescription) -> bytes:
    """Write an ELF64 little-endian executable for the description."""
    loadable = [s for s in desc.sections if "r" in s.perms.rwx]
    body = bytearray()
    data_start = _align(EHDR.size + PHDR.size * len(loadable))

    def place(data: bytes, alignment: int = 8) -> int:
        offset = _align(data_start + len(body), alignment)
        body.extend(b"\x00" * (offset - data_start - len(body)))
        body.extend(data)
        return offset

    # (name, type, flags, addr, offset, size, link, info, align, entsize)
    headers: list[tuple[str, int, int, int, int, int, int, int, int, int]] = []
    section_offsets: dict[str, int] = {}
    for section in desc.sections:
        flags = 0
        if "r" in section.perms.rwx:
            flags |= SHF_ALLOC
        if section.perms & Perm.W:
            flags |= SHF_WRITE
        if section.perms & Perm.X:
            flags |= SHF_EXECINSTR
        offset = place(section.data or b"")
        section_offsets[section.name] = offset
        headers.append(
            (
                section.name,
                SHT_NOBITS if section.nobits else SHT_PROGBITS,
                flags,
                section.vaddr,
                offset,
                section.size,
                0,
                0,
                8,
                0,
            )
        )

    section_index = {s.name: i + 1 for i, s in enumerate(desc.sections)}
    symtab_index = 0
    if desc.symbols:
        strtab = _StringTable()
        entries = bytearray(SYM.size)
        for symbol in desc.symbols:
            shndx = section_index.get(symbol.section, 0)
            kind = STT_NOTYPE
            if shndx:
                target = desc.sections[shndx - 1]
                kind = STT_FUNC if target.perms & Perm.X else STT_OBJECT
            entries += SYM.pack(
                strtab.add(symbol.name),
                (STB_GLOBAL << 4) | kind,
                0,
                shndx,
                symbol.value,
                symbol.size,
            )
        symtab_index = len(headers) + 1
        symtab_offset = place(bytes(entries))
        strtab_offset = place(bytes(strtab.data), 1)
        headers.append(
            (".symtab", SHT_SYMTAB, 0, 0, symtab_offset, len(entries), symtab_index + 1, 1, 8, SYM.size)
        )
        headers.append(
            (".strtab", SHT_STRTAB, 0, 0, strtab_offset, len(strtab.data), 0, 0, 1, 0)
        )

    if desc.relocs:
        entries = b"".join(
            RELA.pack(r.offset, (r.symbol_index << 32) | r.reloc_type, r.addend)
            for r in desc.relocs
        )
        text_index = section_index.get(".text", 0)
        headers.append(
            (
                ".rela.text",
                SHT_RELA,
                SHF_INFO_LINK if text_index else 0,
                0,
                place(entries),
                len(entries),
                symtab_index,
                text_index,
                8,
                RELA.size,
            )
        )

    shstrtab = _StringTable()
    name_offsets = [shstrtab.add(h[0]) for h in headers]
    shstrtab_name = shstrtab.add(".shstrtab")
    shstrtab_offset = place(bytes(shstrtab.data), 1)
    shstrndx = len(headers) + 1

    table = bytearray(SHDR.size)
    for name_offset, header in zip(name_offsets, headers, strict=True):
        table += SHDR.pack(name_offset, *header[1:])
    table += SHDR.pack(
        shstrtab_name, SHT_STRTAB, 0, 0, shstrtab_offset, len(shstrtab.data), 0, 0, 1, 0
    )
    shoff = place(bytes(table))

    phdrs = b"".join(
        PHDR.pack(
            PT_LOAD,
            int(section.perms),
            section_offsets[section.name],
            section.vaddr,
            section.vaddr,
            0 if section.nobits else section.size,
            section.size,
            1,
        )
        for section in loadable
    )
    text = next((s for s in desc.sections if s.name == ".text"), None)
    entry = desc.entry if desc.entry is not None else (text.vaddr if text else 0)
    ident = ELF_MAGIC + bytes([ELFCLASS64, ELFDATA2LSB, 1, 0]) + bytes(8)
    header = EHDR.pack(
        ident,
        ET_EXEC,
        EM_X86_64,
        1,
        entry,
        EHDR.size if loadable else 0,
        shoff,
        0,
        EHDR.size,
        PHDR.size,
        len(loadable),
        SHDR.size,
        len(headers) + 2,
        shstrndx,
    )
    image = bytearray(header + phdrs)
    image += bytes(data_start - len(image))
    image += body
    return bytes(image)


def generate_elf(spec_path: Path, out_path: Path) -> bytes:
    """Build an ELF from a description file and write it to out_path."""
    elf = build_elf(parse_description(spec_path.read_text()))
    out_path.write_bytes(elf)
    return elf


def describe_elf(img: ElfImage) -> list[str]:
    """Recover description lines from a parsed image."""
    lines = [f"entry {img.entry_point:#x}"]
    for section in img.section_headers[1:]:
        if section.name in _GENERATED_SECTIONS or section.sh_type in (
            SHT_SYMTAB,
            SHT_STRTAB,
            SHT_RELA,
            SHT_REL,
        ):
            continue
        if section.sh_type == SHT_NOBITS:
            content = "zero"
        else:
            content = img.section_data(section).rstrip(b"\x00").hex() or "00"
        lines.append(
            f"section {section.name} {section.vaddr:#x} {section.size:#x} "
            f"{section.flags.rwx} {content}"
        )
    for symbol in extract_symbols(img):
        if symbol.section_index and symbol.section_index < len(img.section_headers):
            where = img.section_headers[symbol.section_index].name
        else:
            where = UNDEFINED_SECTION
        lines.append(f"symbol {symbol.name} {symbol.value:#x} {symbol.size:#x} {where}")
    lines.extend(
        f"reloc {r.offset:#x} {r.symbol_index} {r.reloc_type} {r.addend}"
        for r in extract_relocations(img)
    )
    return lines

#!/usr/bin/env python3
"""Regenerates include/nyoforge/unicode_data.hpp from Python's unicodedata.

The header carries the three tables needed for NFC normalization:
canonical combining classes (as ranges), canonical decompositions
(at most two code points each), and primary composition pairs.
Hangul syllables are handled algorithmically at runtime and are
excluded here.
"""

import sys
import unicodedata

HANGUL_S_BASE = 0xAC00
HANGUL_S_LAST = 0xD7A3


def is_surrogate(cp: int) -> bool:
    return 0xD800 <= cp <= 0xDFFF


def canonical_decomposition(cp: int):
    if HANGUL_S_BASE <= cp <= HANGUL_S_LAST:
        return None
    raw = unicodedata.decomposition(chr(cp))
    if not raw or raw.startswith("<"):
        return None
    parts = [int(p, 16) for p in raw.split()]
    assert 1 <= len(parts) <= 2, hex(cp)
    return parts


def main(out_path: str) -> None:
    ccc_ranges = []  # (first, last, ccc)
    for cp in range(0x110000):
        if is_surrogate(cp):
            continue
        ccc = unicodedata.combining(chr(cp))
        if ccc == 0:
            continue
        if ccc_ranges and ccc_ranges[-1][1] == cp - 1 and ccc_ranges[-1][2] == ccc:
            ccc_ranges[-1] = (ccc_ranges[-1][0], cp, ccc)
        else:
            ccc_ranges.append((cp, cp, ccc))

    decomp = []  # (cp, a, b) with b == 0 for singleton decompositions
    for cp in range(0x110000):
        if is_surrogate(cp):
            continue
        parts = canonical_decomposition(cp)
        if parts is None:
            continue
        a = parts[0]
        b = parts[1] if len(parts) == 2 else 0
        decomp.append((cp, a, b))

    # Primary composites: two-element canonical decompositions that actually
    # recompose under NFC (this filters the composition exclusions and
    # non-starter decompositions).
    comp = []
    for cp, a, b in decomp:
        if b == 0:
            continue
        if unicodedata.normalize("NFC", chr(a) + chr(b)) == chr(cp):
            comp.append(((a << 21) | b, cp))
    comp.sort()

    with open(out_path, "w", encoding="utf-8") as f:
        w = f.write
        w("#pragma once\n\n")
        w("// Generated by scripts/gen_unicode_data.py from Python unicodedata "
          f"(Unicode {unicodedata.unidata_version}). Do not edit by hand.\n\n")
        w("#include <cstdint>\n\n")
        w("namespace nyoforge::unicode_data {\n\n")

        w("struct CccRange { uint32_t first; uint32_t last; uint8_t ccc; };\n")
        w("struct Decomp { uint32_t cp; uint32_t a; uint32_t b; };  // b == 0: singleton\n")
        w("struct Comp { uint64_t key; uint32_t composite; };      // key = (a << 21) | b\n\n")

        w(f"inline constexpr CccRange kCccRanges[{len(ccc_ranges)}] = {{\n")
        for first, last, ccc in ccc_ranges:
            w(f"    {{0x{first:X}, 0x{last:X}, {ccc}}},\n")
        w("};\n\n")

        w(f"inline constexpr Decomp kDecomp[{len(decomp)}] = {{\n")
        for cp, a, b in decomp:
            w(f"    {{0x{cp:X}, 0x{a:X}, 0x{b:X}}},\n")
        w("};\n\n")

        w(f"inline constexpr Comp kComp[{len(comp)}] = {{\n")
        for key, composite in comp:
            w(f"    {{0x{key:X}ull, 0x{composite:X}}},\n")
        w("};\n\n")
        w("}  // namespace nyoforge::unicode_data\n")

    print(f"wrote {out_path}: {len(ccc_ranges)} ccc ranges, "
          f"{len(decomp)} decompositions, {len(comp)} composition pairs")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "include/nyoforge/unicode_data.hpp")

#!/usr/bin/env python3
"""Regenerates tests/data/nfc_vectors.txt.

Each line is `<input codepoints>TAB<nfc codepoints>` in hex, covering
composition, reordering, Hangul, singletons, and seeded random fuzz.
"""

import random
import sys
import unicodedata


def fmt(s: str) -> str:
    return " ".join(f"{ord(c):04X}" for c in s)


def main(out_path: str) -> None:
    cases = []

    def add(s: str) -> None:
        cases.append((s, unicodedata.normalize("NFC", s)))

    # Latin composition and ordering.
    add("é")                  # e + acute -> é
    add("ȩ́")            # acute then cedilla (needs reorder)
    add("ȩ́")            # cedilla then acute
    add("Å")             # A + ring -> Å
    add("Å")                   # already composed
    add("Å")                   # Angstrom sign (singleton -> Å)
    add("Ω")                   # Ohm sign (singleton -> Ω)
    add("q̣̇")            # classic UAX15 example
    add("ḍ̇")             # d-dot-above + dot-below
    # Hangul.
    add("가")             # L + V -> 가
    add("각")       # L + V + T -> 각
    add("각")             # LV + T -> LVT
    add("각")                   # already LVT
    add("ᄀ가")       # blocked L
    # Greek, Cyrillic, CJK compat.
    add("ά")
    add("й")
    add("豈")                   # CJK compatibility ideograph (singleton)
    # Composition exclusions stay decomposed.
    add("क़")             # -> stays (U+0958 is excluded)
    add("क़")                   # excluded singleton-ish: decomposes, never recomposes
    # Degenerate combining-mark-only strings.
    add("́")
    add("́̀")
    # Long reorder chains.
    add("a" + "̧̖́̊")

    rng = random.Random(20240601)
    interesting = (
        list(range(0x20, 0x7F))
        + [0x00E9, 0x0301, 0x0300, 0x0327, 0x0323, 0x0316, 0x030A, 0x0306,
           0x00C5, 0x212B, 0x1E0B, 0x03B1, 0x0438, 0x4E2D, 0x6587,
           0x1100, 0x1161, 0x11A8, 0xAC00, 0xAC01, 0x0915, 0x093C,
           0x1F600, 0x10348, 0xFB01, 0x00DF, 0x3042]
    )
    for _ in range(400):
        n = rng.randint(1, 12)
        s = "".join(chr(rng.choice(interesting)) for _ in range(n))
        add(s)
    for _ in range(200):
        n = rng.randint(1, 8)
        chars = []
        for _ in range(n):
            while True:
                cp = rng.randint(1, 0x2FFFF)
                if not (0xD800 <= cp <= 0xDFFF):
                    break
            chars.append(chr(cp))
        add("".join(chars))

    with open(out_path, "w", encoding="utf-8") as f:
        for src, nfc in cases:
            f.write(f"{fmt(src)}\t{fmt(nfc)}\n")
    print(f"wrote {out_path}: {len(cases)} vectors")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/nfc_vectors.txt")

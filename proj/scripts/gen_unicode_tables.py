#!/usr/bin/env python3
"""Generate the code point range tables used by the BPE pre-tokenizer.

Writes src/unicode_tables.inc with three sorted range arrays matching the
`\\p{L}`, `\\p{N}` and `\\s` classes of the `regex` module.
"""
import pathlib
import sys

import regex


def ranges(pattern):
    rx = regex.compile(pattern)
    out, start = [], None
    for cp in range(0x110000):
        hit = bool(rx.match(chr(cp)))
        if hit and start is None:
            start = cp
        elif not hit and start is not None:
            out.append((start, cp - 1))
            start = None
    if start is not None:
        out.append((start, 0x10FFFF))
    return out


def emit(name, rs):
    body = ",\n".join(f"    {{0x{a:X}, 0x{b:X}}}" for a, b in rs)
    return f"inline constexpr CodepointRange {name}[] = {{\n{body}\n}};\n"


def main():
    root = pathlib.Path(__file__).resolve().parent.parent
    out = root / "src" / "unicode_tables.inc"
    text = "// Generated by scripts/gen_unicode_tables.py; do not edit.\n"
    text += f"// regex module {regex.__version__}\n\n"
    text += emit("kLetterRanges", ranges(r"\p{L}"))
    text += emit("kNumberRanges", ranges(r"\p{N}"))
    text += emit("kSpaceRanges", ranges(r"\s"))
    out.write_text(text)
    print(f"wrote {out}", file=sys.stderr)


if __name__ == "__main__":
    main()

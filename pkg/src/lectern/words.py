"""The single word-counting rule every module shares.

Duration planning, mock speech timing and speaking-rate reporting must all
count words identically or the passes drift apart, so this is the only
place the rule lives:

* the text is split on whitespace;
* every Han character counts as one word (CJK prose has no spaces);
* a token's non-Han residue counts as one word unless it is made of
  punctuation only.

"hello, world!" -> 2,  "你好世界" -> 4,  "42." -> 1.
"""

from __future__ import annotations

import unicodedata

_HAN_RANGES = (
    (0x3400, 0x4DBF),   # CJK extension A
    (0x4E00, 0x9FFF),   # CJK unified ideographs
    (0xF900, 0xFAFF),   # CJK compatibility ideographs
)


def _is_han(ch: str) -> bool:
    code = ord(ch)
    return any(lo <= code <= hi for lo, hi in _HAN_RANGES)


def _is_punctuation(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def count_words(text: str) -> int:
    total = 0
    for token in text.split():
        residue_has_word = False
        for ch in token:
            if _is_han(ch):
                total += 1
            elif not _is_punctuation(ch):
                residue_has_word = True
        if residue_has_word:
            total += 1
    return total

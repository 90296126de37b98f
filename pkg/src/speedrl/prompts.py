"""Text-prompt ingestion and cleaning.

Prompts do not condition the toy generator (it has no text encoder); this
pipeline only exercises the cleaning rules and reports their statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InputError, ReadError

MIN_WORDS = 7
ASCII_ALPHA_MIN_FRAC = 0.5
DROP_REASONS = ("too_short", "non_english", "emoji_only")
REPORT_COLUMNS = ("source", "total", "kept", *DROP_REASONS, "non_english_heuristic")
NON_ENGLISH_HEURISTIC = f"ascii_alpha_fraction<{ASCII_ALPHA_MIN_FRAC}"

# Emoji, pictographs, dingbats and the joiners/modifiers that glue them together.
EMOJI_RANGES = (
    (0x1F000, 0x1FAFF),  # mahjong .. symbols and pictographs extended-A
    (0x2600, 0x27BF),    # misc symbols, dingbats
    (0x2300, 0x23FF),    # misc technical (watch, hourglass, ...)
    (0x2B00, 0x2BFF),    # arrows, stars, squares
    (0x2190, 0x21FF),    # arrows
    (0x25A0, 0x25FF),    # geometric shapes
    (0x2100, 0x214F),    # letterlike symbols (TM, info)
    (0x3030, 0x3030), (0x303D, 0x303D), (0x3297, 0x3299),
    (0x00A9, 0x00A9), (0x00AE, 0x00AE), (0x203C, 0x203C), (0x2049, 0x2049),
    (0x200D, 0x200D),    # zero-width joiner
    (0x20E3, 0x20E3),    # combining enclosing keycap
    (0xFE00, 0xFE0F),    # variation selectors
    (0xE0020, 0xE007F),  # tag characters (subdivision flags)
)


@dataclass(frozen=True)
class PromptRecord:
    text: str
    source: str
    word_count: int
    kept: bool = True
    drop_reason: str = "none"

    def __post_init__(self):
        if self.kept != (self.drop_reason == "none"):
            raise InputError("kept must be true exactly when drop_reason is 'none'")


def is_emoji(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in EMOJI_RANGES)


def strip_emoji(text: str) -> str:
    return "".join(ch for ch in text if not is_emoji(ch))


def is_emoji_only(text: str) -> bool:
    return any(is_emoji(ch) for ch in text) and not strip_emoji(text).strip()


def ascii_alpha_fraction(text: str) -> float | None:
    """Share of ASCII letters among all alphabetic characters; None if there are none."""
    alpha = [ch for ch in text if ch.isalpha()]
    if not alpha:
        return None
    return sum(ch.isascii() for ch in alpha) / len(alpha)


def word_count(text: str) -> int:
    return len(text.split())


def classify(text: str) -> str:
    """Drop reason for one prompt. Checks run emoji_only, non_english, too_short."""
    if is_emoji_only(text):
        return "emoji_only"
    frac = ascii_alpha_fraction(text)
    if frac is not None and frac < ASCII_ALPHA_MIN_FRAC:
        return "non_english"
    if word_count(text) < MIN_WORDS:
        return "too_short"
    return "none"


def load_prompts(path: str | Path) -> list[PromptRecord]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ReadError(f"cannot read prompt file {path}: {exc.strerror}") from None
    out = []
    for raw in data.splitlines():
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            text = raw.decode("utf-8", errors="replace")
            out.append(PromptRecord(text, path.stem, word_count(text), False, "non_english"))
            continue
        out.append(PromptRecord(text, path.stem, word_count(text)))
    return out


@dataclass
class DropReport:
    rows: dict[str, dict[str, int]]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            self.write(fh)

    def write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for source, counts in self.rows.items():
            w.writerow([source, counts["total"], counts["kept"], *(counts[r] for r in DROP_REASONS),
                        NON_ENGLISH_HEURISTIC])


def preprocess(records: Sequence[PromptRecord]) -> tuple[list[PromptRecord], list[PromptRecord], DropReport]:
    """Apply the cleaning rules. Returns (kept, dropped, report).

    A record already dropped at load time keeps its reason.
    """
    kept, dropped = [], []
    rows: dict[str, dict[str, int]] = {}
    for rec in records:
        reason = rec.drop_reason if not rec.kept else classify(rec.text)
        rec = replace(rec, kept=reason == "none", drop_reason=reason)
        counts = rows.setdefault(rec.source, {"total": 0, "kept": 0, **{r: 0 for r in DROP_REASONS}})
        counts["total"] += 1
        if rec.kept:
            counts["kept"] += 1
            kept.append(rec)
        else:
            counts[reason] += 1
            dropped.append(rec)
    return kept, dropped, DropReport(rows)


def load_many(paths: Iterable[str | Path]) -> list[PromptRecord]:
    out: list[PromptRecord] = []
    for p in paths:
        out.extend(load_prompts(p))
    return out

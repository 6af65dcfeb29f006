"""Text frontend: normalization, lexicon ingestion, and word-level mixing.

Transcripts are lowercased, numbers and a small abbreviation table are
spelled out, and anything outside the symbol inventory is dropped. Each word
of a normalized utterance is then rendered either as characters (mask 0) or,
when the lexicon knows it, as phonemes (mask 1); spaces and punctuation are
always characters with mask 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOCAB_SIZE = 49

PAD = "<pad>"
PUNCTUATION = [".", ",", "?", "!", ";", ":", "-"]
CHAR_SYMBOLS = [PAD] + list("abcdefghijklmnopqrstuvwxyz") + [" ", "'"] + PUNCTUATION

ARPABET = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER",
    "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW",
    "OY", "P", "R", "S", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
    "SIL",
]
PHONE_SYMBOLS = [PAD] + ARPABET


class MalformedLine(ValueError):
    def __init__(self, line_no, detail):
        super().__init__(f"line {line_no}: {detail}")
        self.line_no = line_no


class MissingFile(FileNotFoundError):
    pass


class EmptyUtterance(ValueError):
    pass


def _padded(symbols):
    out = list(symbols)
    i = 0
    while len(out) < VOCAB_SIZE:
        out.append(f"<r{i}>")
        i += 1
    return out


@dataclass(frozen=True)
class SymbolInventory:
    char_symbols: tuple = tuple(_padded(CHAR_SYMBOLS))
    phone_symbols: tuple = tuple(_padded(PHONE_SYMBOLS))

    @property
    def vocab_size(self):
        return max(len(self.char_symbols), len(self.phone_symbols))

    @property
    def char_to_id(self):
        return {s: i for i, s in enumerate(self.char_symbols)}

    @property
    def phone_to_id(self):
        return {s: i for i, s in enumerate(self.phone_symbols)}


INVENTORY = SymbolInventory()
_CHAR_SET = set(CHAR_SYMBOLS[1:])
_PHONE_SET = set(ARPABET)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

_ABBREVIATIONS = {
    "dr": "doctor",
    "mr": "mister",
    "mrs": "missus",
    "ms": "miss",
    "st": "saint",
    "jr": "junior",
    "sr": "senior",
    "prof": "professor",
    "capt": "captain",
    "etc": "et cetera",
    "vs": "versus",
}

_ONES = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
    "sixteen", "seventeen", "eighteen", "nineteen",
]
_TENS = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy",
         "eighty", "ninety"]
_ORDINAL_IRREGULAR = {
    "one": "first", "two": "second", "three": "third", "five": "fifth",
    "eight": "eighth", "nine": "ninth", "twelve": "twelfth",
}


def _two_digits(n):
    if n < 20:
        return _ONES[n]
    word = _TENS[n // 10]
    return word if n % 10 == 0 else f"{word} {_ONES[n % 10]}"


def _three_digits(n):
    if n < 100:
        return _two_digits(n)
    head = f"{_ONES[n // 100]} hundred"
    return head if n % 100 == 0 else f"{head} {_two_digits(n % 100)}"


def number_words(n):
    """Spell out 0..9999; four-digit values read as year-style pairs and
    anything larger digit by digit."""
    if n < 1000:
        return _three_digits(n)
    if n < 10000:
        if n % 1000 == 0:
            return f"{_ONES[n // 1000]} thousand"
        hi, lo = divmod(n, 100)
        if lo == 0:
            return f"{_two_digits(hi)} hundred"
        if lo < 10:
            return f"{_two_digits(hi)} oh {_ONES[lo]}"
        return f"{_two_digits(hi)} {_two_digits(lo)}"
    return " ".join(_ONES[int(d)] for d in str(n))


def ordinal_words(n):
    words = number_words(n).split()
    last = words[-1]
    if last in _ORDINAL_IRREGULAR:
        words[-1] = _ORDINAL_IRREGULAR[last]
    elif last.endswith("y"):
        words[-1] = last[:-1] + "ieth"
    else:
        words[-1] = last + "th"
    return " ".join(words)


_ABBREV_RE = re.compile(
    r"\b(" + "|".join(_ABBREVIATIONS) + r")\.(?=\s|$)", re.IGNORECASE
)
_ORDINAL_RE = re.compile(r"\b(\d+)(st|nd|rd|th)\b", re.IGNORECASE)
_GROUPED_RE = re.compile(r"\b\d{1,3}(?:,\d{3})+\b")
_DIGITS_RE = re.compile(r"\d+")
_SPACE_RE = re.compile(r"\s+")


def normalize_text(raw):
    """Lowercase, expand abbreviations/ordinals/cardinals, drop everything
    outside the symbol inventory, and collapse whitespace. Total on any
    input string."""
    text = _ABBREV_RE.sub(lambda m: _ABBREVIATIONS[m.group(1).lower()], raw)
    text = _ORDINAL_RE.sub(lambda m: ordinal_words(int(m.group(1))), text)
    text = _GROUPED_RE.sub(lambda m: m.group(0).replace(",", ""), text)
    text = _DIGITS_RE.sub(lambda m: number_words(int(m.group(0))), text)
    text = text.lower()
    text = "".join(c if c in _CHAR_SET else " " for c in text)
    return _SPACE_RE.sub(" ", text).strip()


# ---------------------------------------------------------------------------
# lexicon
# ---------------------------------------------------------------------------

_STRESS_RE = re.compile(r"^([A-Z]+)[0-2]$")


@dataclass
class Lexicon:
    entries: dict = field(default_factory=dict)
    duplicate_count: int = 0

    def __contains__(self, word):
        return word in self.entries

    def get(self, word):
        return self.entries.get(word)


def load_lexicon(path):
    """Parse ``word<TAB>ph1 ph2 ...`` lines; stress digits are stripped,
    duplicates keep the first entry."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    lex = Lexicon()
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise MalformedLine(line_no, "no tab separator")
            word, _, rest = line.partition("\t")
            word = word.strip().lower()
            if not word or any(c.isspace() for c in word):
                raise MalformedLine(line_no, f"bad word field {word!r}")
            phones = []
            for p in rest.split():
                p = p.upper()
                m = _STRESS_RE.match(p)
                if m:
                    p = m.group(1)
                if p not in _PHONE_SET:
                    raise MalformedLine(line_no, f"unknown phoneme {p!r}")
                phones.append(p)
            if not phones:
                raise MalformedLine(line_no, "empty phoneme list")
            if word in lex.entries:
                lex.duplicate_count += 1
            else:
                lex.entries[word] = phones
    return lex


# ---------------------------------------------------------------------------
# utterances and mixing
# ---------------------------------------------------------------------------

@dataclass
class UtteranceRecord:
    id: str
    raw_text: str
    normalized_text: str
    audio_path: Path | None = None
    char_words: list = field(default_factory=list)
    phone_words: list | None = None


@dataclass
class MixedSequence:
    symbols: list
    mask: list
    word_spans: list

    def __len__(self):
        return len(self.symbols)

    def symbol_array(self):
        return np.asarray(self.symbols, dtype=np.intp)

    def mask_array(self):
        return np.asarray(self.mask, dtype=np.intp)


_WORD_CHARS = set("abcdefghijklmnopqrstuvwxyz'")


def segment_text(text):
    """Split normalized text into (text, kind) segments, kind in
    {word, space, punct}. Hyphens separate words."""
    segments = []
    i = 0
    while i < len(text):
        c = text[i]
        if c in _WORD_CHARS:
            j = i
            while j < len(text) and text[j] in _WORD_CHARS:
                j += 1
            segments.append((text[i:j], "word"))
            i = j
        elif c == " ":
            segments.append((" ", "space"))
            i += 1
        else:
            segments.append((c, "punct"))
            i += 1
    return segments


def make_record(utt_id, raw_text, audio_path=None, phone_words=None):
    normalized = normalize_text(raw_text)
    words = [s for s, kind in segment_text(normalized) if kind == "word"]
    return UtteranceRecord(utt_id, raw_text, normalized, audio_path, words, phone_words)


def _render(record, lexicon, choose_phones):
    """Assemble a MixedSequence; ``choose_phones(word_index, phones)`` decides
    the representation for each word that has a pronunciation."""
    inv = INVENTORY
    char_ids = inv.char_to_id
    phone_ids = inv.phone_to_id
    segments = segment_text(record.normalized_text)
    if not any(kind == "word" for _, kind in segments):
        raise EmptyUtterance(record.id)
    symbols, mask, spans = [], [], []
    word_index = 0
    for text, kind in segments:
        start = len(symbols)
        if kind == "word":
            phones = None
            if record.phone_words is not None and word_index < len(record.phone_words):
                phones = record.phone_words[word_index]
            if phones is None:
                phones = lexicon.get(text) if lexicon is not None else None
            if phones is not None and choose_phones(word_index, phones):
                symbols.extend(phone_ids[p] for p in phones)
                mask.extend([1] * len(phones))
                spans.append((start, len(symbols), "phone"))
            else:
                symbols.extend(char_ids[c] for c in text)
                mask.extend([0] * len(text))
                spans.append((start, len(symbols), "char"))
            word_index += 1
        else:
            symbols.append(char_ids[text])
            mask.append(0)
            spans.append((start, len(symbols), kind))
    return MixedSequence(symbols, mask, spans)


def mix_words(record, lexicon, p_phone, rng):
    """Random word-level mixing: each in-lexicon word becomes phonemes with
    probability p_phone, everything else characters. One draw is consumed
    per word that has a pronunciation."""
    if not 0.0 <= p_phone <= 1.0:
        raise ValueError(f"p_phone {p_phone} outside [0, 1]")
    return _render(record, lexicon, lambda i, ph: rng.random() < p_phone)


def encode_fixed(record, lexicon, mode):
    """Deterministic rendering: ``chars`` forces characters everywhere,
    ``pwcb`` uses phonemes for every in-lexicon word with character backoff."""
    if mode == "chars":
        return _render(record, lexicon, lambda i, ph: False)
    if mode == "pwcb":
        return _render(record, lexicon, lambda i, ph: True)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

def load_manifest(manifest_path, wav_dir=None):
    """Parse pipe-delimited ``id|raw_text|normalized_text`` lines into
    records; the normalized column is recomputed with our pipeline."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(str(manifest_path))
    if wav_dir is None:
        wav_dir = manifest_path.parent / "wavs"
    records = []
    with manifest_path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("|")
            if len(parts) < 2:
                raise MalformedLine(line_no, "expected id|raw_text[|normalized]")
            utt_id, raw = parts[0], parts[1]
            rec = make_record(utt_id, raw, Path(wav_dir) / f"{utt_id}.wav")
            records.append(rec)
    return records

"""CHAT transcript parsing and cleaning into ASR-ready token lists.

Cleaning keeps what was actually said (retraced words, repetitions, fillers,
fragments, IPA forms), turns laughter into ``<LAU>``, and drops every other
CHAT annotation. Anything that still looks like markup after the rules run is
discarded rather than passed through.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

LAUGHTER = "<LAU>"
_LAU_SENTINEL = "\ue000"

DIAGNOSIS_GROUPS = ("aphasia", "control", "unknown")


class ChatError(ValueError):
    pass


class MalformedHeader(ChatError):
    pass


class OrphanTier(ChatError):
    pass


@dataclass(frozen=True)
class Participant:
    speaker_code: str
    role: str
    diagnosis_group: str = "unknown"
    aq: Optional[float] = None


@dataclass(frozen=True)
class RawUtterance:
    speaker_code: str
    text: str
    start_ms: Optional[int] = None
    end_ms: Optional[int] = None


@dataclass(frozen=True)
class CleanUtterance:
    speaker_code: str
    tokens: tuple
    start_ms: Optional[int] = None
    end_ms: Optional[int] = None

    def to_json(self) -> str:
        obj = {"speaker": self.speaker_code, "tokens": list(self.tokens),
               "start_ms": self.start_ms, "end_ms": self.end_ms}
        return json.dumps(obj, ensure_ascii=False)


@dataclass
class ChatDocument:
    participants: List[Participant] = field(default_factory=list)
    utterances: List[RawUtterance] = field(default_factory=list)

    def participant(self, code: str) -> Optional[Participant]:
        for p in self.participants:
            if p.speaker_code == code:
                return p
        return None


# ---------------------------------------------------------------- parsing

_BULLET_RE = re.compile(r"[•\x15](\d+)_(\d+)[•\x15]")
_MAIN_RE = re.compile(r"^\*([A-Za-z0-9]+):\s?(.*)$")


def _diagnosis(group_field: str) -> str:
    g = group_field.strip().lower()
    if not g:
        return "unknown"
    if g == "control":
        return "control"
    return "aphasia"


def _parse_aq(custom: str) -> Optional[float]:
    try:
        return float(custom.strip())
    except ValueError:
        return None


def _join_continuations(lines: Iterable[str]) -> List[str]:
    out: List[str] = []
    for line in lines:
        if line.startswith("\t") and out:
            out[-1] = out[-1] + " " + line.strip()
        else:
            out.append(line.rstrip("\n").rstrip("\r"))
    return out


def parse_chat(file_contents: str) -> ChatDocument:
    """Parse the header, main tiers and media bullets of a CHAT file.

    Dependent tiers (``%mor``, ``%gra`` ...) and other header lines are skipped.
    """
    lines = _join_continuations(file_contents.replace("\r\n", "\n").split("\n"))
    participants: dict = {}
    ids: dict = {}
    saw_participants = False
    utterances: List[RawUtterance] = []
    for line in lines:
        if line.startswith("@Participants:"):
            saw_participants = True
            body = line.split(":", 1)[1]
            for entry in body.split(","):
                parts = entry.split()
                if not parts:
                    continue
                code = parts[0]
                role = parts[-1] if len(parts) > 1 else ""
                participants[code] = role
        elif line.startswith("@ID:"):
            fields = line.split(":", 1)[1].strip().split("|")
            fields += [""] * (10 - len(fields))
            code = fields[2].strip()
            if code:
                ids[code] = (_diagnosis(fields[5]), _parse_aq(fields[9]))
        elif line.startswith("*"):
            m = _MAIN_RE.match(line)
            if not m:
                raise MalformedHeader(f"unparseable main tier: {line!r}")
            code, text = m.group(1), m.group(2)
            if not saw_participants:
                raise MalformedHeader("main tier before @Participants header")
            if code not in participants:
                raise OrphanTier(f"speaker {code!r} is not declared in @Participants")
            start = end = None
            bullet = _BULLET_RE.search(text)
            if bullet:
                start, end = int(bullet.group(1)), int(bullet.group(2))
                if end <= start:
                    raise ChatError(f"media bullet with end <= start: {bullet.group(0)!r}")
                text = _BULLET_RE.sub(" ", text)
            utterances.append(RawUtterance(code, " ".join(text.split()), start, end))
    if not saw_participants:
        raise MalformedHeader("missing @Participants header")
    people = []
    for code, role in participants.items():
        group, aq = ids.get(code, ("unknown", None))
        people.append(Participant(code, role, group, aq))
    return ChatDocument(people, utterances)


# ---------------------------------------------------------------- cleaning

# bracketed codes: retracing, repetition, error codes, comments, explanations,
# overlap, pre/postcodes, paralinguistics. All are dropped; their scoped words
# (the <...> groups) stay.
_BRACKET_RE = re.compile(r"\[[^\]]*\]")
_PAUSE_RE = re.compile(r"\(\s*\.{1,3}\s*\)|\(\s*\d+(?::\d+)?\.\d*\s*\)")
_LAUGH_RE = re.compile(r"&=laugh\w*")
_FILLER_RE = re.compile(r"&-(\S+)")
_FRAGMENT_RE = re.compile(r"&\+(\S+)")
_NONWORD_RE = re.compile(r"&~(\S+)")
_OTHER_AMP_RE = re.compile(r"&\S*")
_TERMINATOR_RE = re.compile(r"(?<!\S)\+\S*")
_IPA_RE = re.compile(r"(\S+?)@u\b")
_FORM_MARKER_RE = re.compile(r"(\S+?)@[A-Za-z:$]+(?!\S)")
_UNINTELLIGIBLE = {"xxx", "yyy", "www", "xx", "yy"}
_CA_CHARS = "↑↓≠‡„“”⌈⌉⌊⌋∆∇°☺⁇§≈≡∙ˈˌ‹›«»∾⁑⤇⤆"
_CA_RE = re.compile("[" + re.escape(_CA_CHARS) + '"]')
_EDGE_PUNCT = ".?!,;:"
_FORBIDDEN = set("[]<>&%@")


def _clean_token(tok: str) -> Optional[str]:
    if tok == _LAU_SENTINEL:
        return LAUGHTER
    if tok.startswith("0"):
        # omitted word: never spoken
        return None
    tok = tok.replace("(", "").replace(")", "")
    tok = tok.strip(_EDGE_PUNCT)
    # prosodic marks inside words: lengthening ':' and syllable pause '^'
    tok = tok.replace(":", "").replace("^", "")
    if not tok or tok.lower() in _UNINTELLIGIBLE:
        return None
    if not any(ch.isalnum() for ch in tok):
        return None
    if _FORBIDDEN.intersection(tok):
        return None
    return tok


def clean_text(text: str) -> List[str]:
    """Apply the cleaning rules to one main-tier string and return its tokens."""
    s = _BULLET_RE.sub(" ", text)
    s = re.sub(r"(?<!\S)" + re.escape(LAUGHTER) + r"(?!\S)", " " + _LAU_SENTINEL + " ", s)
    s = _BRACKET_RE.sub(" ", s)
    s = _LAUGH_RE.sub(" " + _LAU_SENTINEL + " ", s)
    s = _PAUSE_RE.sub(" ", s)
    s = _FILLER_RE.sub(r"\1", s)
    s = _FRAGMENT_RE.sub(r"\1", s)
    s = _NONWORD_RE.sub(r"\1", s)
    s = _OTHER_AMP_RE.sub(" ", s)
    s = _TERMINATOR_RE.sub(" ", s)
    s = s.replace("<", " ").replace(">", " ")
    s = _IPA_RE.sub(r"\1", s)
    s = _FORM_MARKER_RE.sub(r"\1", s)
    s = _CA_RE.sub("", s)
    tokens = []
    for tok in s.split():
        tok = _clean_token(tok)
        if tok is not None:
            tokens.append(tok)
    return tokens


def clean_utterance(raw: RawUtterance) -> Optional[CleanUtterance]:
    tokens = clean_text(raw.text)
    if not tokens:
        return None
    return CleanUtterance(raw.speaker_code, tuple(tokens), raw.start_ms, raw.end_ms)


def clean_document(doc: ChatDocument, jobs: int = 1) -> List[CleanUtterance]:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cleaned = list(pool.map(clean_utterance, doc.utterances))
    else:
        cleaned = [clean_utterance(u) for u in doc.utterances]
    return [c for c in cleaned if c is not None]


def to_jsonl(utterances: Sequence[CleanUtterance]) -> str:
    return "".join(u.to_json() + "\n" for u in utterances)

"""Corpus I/O and token-level encoding.

Reads and writes brat standoff annotations, tokenizes with exact character
offsets, splits sentences, and converts between character spans and BIO
label sequences. All offsets refer to newline-normalized text (CRLF and
lone CR become LF at load time).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from . import DataError

# The 29 PHI classes of the MEDDOCAN annotation guidelines.
DEFAULT_PHI_CLASSES = (
    "NOMBRE_SUJETO_ASISTENCIA",
    "NOMBRE_PERSONAL_SANITARIO",
    "PROFESION",
    "HOSPITAL",
    "INSTITUCION",
    "CALLE",
    "TERRITORIO",
    "PAIS",
    "CENTRO_SALUD",
    "EDAD_SUJETO_ASISTENCIA",
    "FECHAS",
    "NUMERO_TELEFONO",
    "NUMERO_FAX",
    "CORREO_ELECTRONICO",
    "ID_SUJETO_ASISTENCIA",
    "ID_CONTACTO_ASISTENCIAL",
    "ID_ASEGURAMIENTO",
    "ID_TITULACION_PERSONAL_SANITARIO",
    "ID_EMPLEO_PERSONAL_SANITARIO",
    "OTROS_SUJETO_ASISTENCIA",
    "SEXO_SUJETO_ASISTENCIA",
    "FAMILIARES_SUJETO_ASISTENCIA",
    "URL_WEB",
    "DIREC_PROT_INTERNET",
    "IDENTIF_VEHICULOS_NRSERIE_PLACAS",
    "IDENTIF_DISPOSITIVOS_NRSERIE",
    "NUMERO_BENEF_PLAN_SALUD",
    "IDENTIF_BIOMETRICOS",
    "OTRO_NUMERO_IDENTIF",
)


@dataclass(frozen=True, order=True)
class PhiSpan:
    """A sensitive span: [start, end) character offsets, class label, surface text."""

    start: int
    end: int
    label: str
    text: str


@dataclass
class AnnotatedDocument:
    doc_id: str
    text: str
    spans: list[PhiSpan] = field(default_factory=list)


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


@dataclass
class Sentence:
    tokens: list[Token]

    @property
    def start(self) -> int:
        return self.tokens[0].start

    @property
    def end(self) -> int:
        return self.tokens[-1].end


def normalize_newlines(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def validate_spans(text: str, spans: list[PhiSpan], classes=None) -> None:
    """Check bounds, surface fidelity, label inventory and non-overlap."""
    inventory = set(DEFAULT_PHI_CLASSES if classes is None else classes)
    prev: PhiSpan | None = None
    for s in sorted(spans):
        if not (0 <= s.start < s.end <= len(text)):
            raise DataError(f"span ({s.start},{s.end}) out of bounds for text of length {len(text)}")
        if text[s.start : s.end] != s.text:
            raise DataError(
                f"span ({s.start},{s.end}) surface {s.text!r} does not match document text "
                f"{text[s.start:s.end]!r}"
            )
        if s.label not in inventory:
            raise DataError(f"span ({s.start},{s.end}) has unknown label {s.label!r}")
        if prev is not None and s.start < prev.end:
            raise DataError(f"overlapping spans ({prev.start},{prev.end}) and ({s.start},{s.end})")
        prev = s


_ANN_LINE = re.compile(r"^(T\d+)\t(\S+) (\d+) (\d+)\t(.*)$")


def parse_standoff(text_content: str, ann_content: str, doc_id: str = "doc", classes=None) -> AnnotatedDocument:
    """Parse a brat .txt/.ann pair into an annotated document.

    Only text-bound (T) annotations are supported; discontinuous spans,
    attributes, relations and events are rejected.
    """
    text = normalize_newlines(text_content)
    inventory = set(DEFAULT_PHI_CLASSES if classes is None else classes)
    spans: list[PhiSpan] = []
    ids: dict[tuple[int, int], str] = {}
    for lineno, raw in enumerate(normalize_newlines(ann_content).split("\n"), start=1):
        line = raw.rstrip()
        if not line:
            continue
        m = _ANN_LINE.match(line)
        if m is None:
            parts = line.split("\t")
            if parts[0].startswith("T") and len(parts) >= 2 and ";" in parts[1]:
                raise DataError(f"ann line {lineno}: discontinuous spans are unsupported")
            raise DataError(f"ann line {lineno}: not a text-bound annotation: {line!r}")
        tid, label, start_s, end_s, surface = m.groups()
        start, end = int(start_s), int(end_s)
        if not (0 <= start < end <= len(text)):
            raise DataError(f"{tid}: offsets ({start},{end}) out of bounds")
        if text[start:end] != surface:
            raise DataError(f"{tid}: surface text {surface!r} does not match document substring {text[start:end]!r}")
        if label not in inventory:
            raise DataError(f"{tid}: unknown label {label!r}")
        spans.append(PhiSpan(start, end, label, surface))
        ids[(start, end)] = tid
    spans.sort()
    for a, b in zip(spans, spans[1:]):
        if b.start < a.end:
            raise DataError(f"{ids[(a.start, a.end)]} and {ids[(b.start, b.end)]} overlap")
    return AnnotatedDocument(doc_id=doc_id, text=text, spans=spans)


def write_standoff(doc: AnnotatedDocument, classes=None) -> str:
    """Serialize spans as brat text-bound lines, T1..Tn in span order."""
    validate_spans(doc.text, doc.spans, classes)
    for s in doc.spans:
        if "\n" in s.text:
            raise DataError(f"span ({s.start},{s.end}) crosses a line break; cannot round-trip standoff")
    lines = [
        f"T{i}\t{s.label} {s.start} {s.end}\t{s.text}\n"
        for i, s in enumerate(sorted(doc.spans), start=1)
    ]
    return "".join(lines)


# Maximal runs of Unicode letters/digits; any other non-space char alone.
_TOKEN = re.compile(r"[^\W_]+|\S")
_BLANK_LINE = re.compile(r"\n[ \t]*\n")
_TERMINATORS = frozenset(".!?")


def tokenize(text: str) -> list[Token]:
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN.finditer(text)]


def split_sentences(tokens: list[Token], text: str) -> list[Sentence]:
    """Break after '.', '!' or '?' tokens and at blank lines.

    A terminator only closes a sentence when followed by whitespace or the
    end of text, so dots inside emails, URLs and IP addresses do not split
    the spans that contain them.
    """
    sentences: list[Sentence] = []
    current: list[Token] = []
    for i, tok in enumerate(tokens):
        current.append(tok)
        boundary = tok.text in _TERMINATORS and (tok.end == len(text) or text[tok.end].isspace())
        if not boundary and i + 1 < len(tokens):
            boundary = _BLANK_LINE.search(text, tok.end, tokens[i + 1].start) is not None
        if boundary:
            sentences.append(Sentence(current))
            current = []
    if current:
        sentences.append(Sentence(current))
    return sentences


def sentences_of(text: str) -> list[Sentence]:
    return split_sentences(tokenize(text), text)


def encode_bio(sentence: Sentence, spans: list[PhiSpan], warnings: list[str] | None = None) -> list[str]:
    """Project spans onto the sentence's tokens as B-/I-/O labels.

    A span boundary that falls inside a token is snapped outward to the
    token's boundaries; each snap appends a message to ``warnings`` when a
    list is supplied. Spans not touching this sentence are ignored.
    """
    labels = ["O"] * len(sentence.tokens)
    for span in spans:
        hit = [i for i, t in enumerate(sentence.tokens) if t.start < span.end and t.end > span.start]
        if not hit:
            continue
        first, last = sentence.tokens[hit[0]], sentence.tokens[hit[-1]]
        if warnings is not None and (span.start != first.start or span.end != last.end):
            warnings.append(
                f"span {span.label}@({span.start},{span.end}) snapped to token boundaries "
                f"({first.start},{last.end})"
            )
        labels[hit[0]] = f"B-{span.label}"
        for i in hit[1:]:
            labels[i] = f"I-{span.label}"
    return labels


def decode_bio(sentence: Sentence, labels: list[str], text: str) -> list[PhiSpan]:
    """Turn a BIO sequence back into character spans.

    An I-X with no live span of class X acts as B-X (repair rule), so any
    label sequence decodes.
    """
    if len(labels) != len(sentence.tokens):
        raise DataError(f"decode_bio: {len(labels)} labels for {len(sentence.tokens)} tokens")
    spans: list[PhiSpan] = []
    open_label: str | None = None
    open_start = open_end = 0

    def close():
        nonlocal open_label
        if open_label is not None:
            spans.append(PhiSpan(open_start, open_end, open_label, text[open_start:open_end]))
            open_label = None

    for tok, lab in zip(sentence.tokens, labels):
        if lab == "O":
            close()
            continue
        prefix, cls = lab.split("-", 1)
        if prefix == "I" and open_label == cls:
            open_end = tok.end
        else:
            close()
            open_label = cls
            open_start, open_end = tok.start, tok.end
    close()
    return spans


def load_split(split_dir: str | Path, classes=None) -> list[AnnotatedDocument]:
    """Load ``<doc_id>.txt`` (+ optional ``.ann``) pairs from a directory."""
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise DataError(f"not a corpus directory: {split_dir}")
    docs = []
    for txt_path in sorted(split_dir.glob("*.txt")):
        ann_path = txt_path.with_suffix(".ann")
        ann = ann_path.read_text(encoding="utf-8") if ann_path.exists() else ""
        docs.append(
            parse_standoff(txt_path.read_text(encoding="utf-8"), ann, doc_id=txt_path.stem, classes=classes)
        )
    return docs


def write_split(split_dir: str | Path, docs: list[AnnotatedDocument], classes=None) -> None:
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    for doc in docs:
        (split_dir / f"{doc.doc_id}.txt").write_text(doc.text, encoding="utf-8")
        (split_dir / f"{doc.doc_id}.ann").write_text(write_standoff(doc, classes), encoding="utf-8")

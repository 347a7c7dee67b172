"""Extraction backends over (note, category) pairs.

Backends: rigid word-match baseline, gold-consulting mock oracle, seeded
noisy mock, and two wire backends (chat-completion and text-completion)
speaking OpenAI-style HTTP+JSON. Sentence evidence is aggregated to a
note-level binary verdict; a note is positive iff at least one evidence
sentence is found.
"""

from __future__ import annotations

import json
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from .corpus import Corpus, GoldLabel, Note
from .taxonomy import SymptomCategory, taxonomy

DEFAULT_CHAR_LIMIT = 6000
SYSTEM_MESSAGE = "You are a medical AI assistant."

BACKEND_KINDS = ("keyword", "chat", "entailment", "mock", "noisy_mock")
STATUSES = ("ok", "unparseable", "backend_error", "truncated_ok")


class _Unparseable:
    def __repr__(self):
        return "UNPARSEABLE"

    def __bool__(self):
        return False


UNPARSEABLE = _Unparseable()


@dataclass(frozen=True)
class EvidenceSpan:
    quote: str
    start: int | None = None  # byte offsets into the note's UTF-8 encoding
    end: int | None = None


@dataclass(frozen=True)
class Detection:
    note_id: str
    category_id: str
    present: bool
    evidence: tuple[EvidenceSpan, ...]
    backend_id: str
    status: str
    raw_response: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"bad status {self.status!r}")
        if self.present and self.status not in ("ok", "truncated_ok"):
            raise ValueError("positive detection must have ok/truncated_ok status")


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    kind: str
    endpoint: str | None = None
    model_name: str = ""
    char_limit: int = DEFAULT_CHAR_LIMIT
    max_retries: int = 4
    timeout: float = 30.0
    parallelism: int = 1
    fp_rate: float = 0.0
    fn_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.char_limit < 1 or self.parallelism < 1:
            raise ValueError("char_limit and parallelism must be >= 1")


# ---------------------------------------------------------------------------
# Truncation

def truncate(text: str, char_limit: int = DEFAULT_CHAR_LIMIT) -> tuple[str, bool]:
    """Cap text at char_limit Unicode scalar values, preferring to cut at the
    previous whitespace when one lies within 200 characters of the limit."""
    if char_limit < 1:
        raise ValueError("char_limit must be >= 1")
    if len(text) <= char_limit:
        return text, False
    cut = text[:char_limit]
    ws = max(cut.rfind(" "), cut.rfind("\n"), cut.rfind("\t"))
    if ws >= char_limit - 200 and ws > 0:
        cut = cut[:ws]
    return cut, True


# ---------------------------------------------------------------------------
# Prompt construction

@dataclass(frozen=True)
class ChatPrompt:
    messages: tuple[tuple[str, str], ...]  # (role, content)

    def __post_init__(self):
        roles = [r for r, _ in self.messages]
        if not roles or roles[0] != "system" or roles[-1] != "user":
            raise ValueError("prompt must open with system and end with user")
        for i, role in enumerate(roles[1:]):
            want = "user" if i % 2 == 0 else "assistant"
            if role != want:
                raise ValueError("user/assistant roles must alternate")

    def render(self) -> str:
        """Human-readable transcript; used for golden-file comparison."""
        return "".join(f"{role.capitalize()}: {content}\n" for role, content in self.messages)

    def to_wire(self) -> list[dict]:
        return [{"role": r, "content": c} for r, c in self.messages]


#: Shot is (exemplar note text, supporting quote or None for a negative).
Shot = tuple[str, str | None]

_SHOT_NEG_DEMOGRAPHIC = (
    "Chez Dias is 15 y.o. Latina woman. Chief Complaints: SoB, Overeating, Acid Reflux."
)
_SHOT_NEG_FLYER = (
    "Does your child skip school? Are they running around town? "
    "Do you think they are using drugs? Call the Hospital to find out the best ways "
    "of taking care of your teenager or visit our website."
)
_SHOT_POSITIVES: dict[str, tuple[str, str]] = {
    "not_going_to_school": (
        "Jeff has not been able to go out of house due to his fear of crashing "
        "during an episode. He had to be home-schooled this year.",
        "He had to be home-schooled this year.",
    ),
    "neglecting_activities": (
        "Alice had to drop out of the knitting club this year. She is anxious about "
        "the exams and fears that her family might be angry at her if she fails.",
        "Alice had to drop out of the knitting club this year.",
    ),
}


def default_shots(category: SymptomCategory) -> list[Shot]:
    """Canonical three in-context exemplars: negative, positive, negative."""
    if category.category_id in _SHOT_POSITIVES:
        note, quote = _SHOT_POSITIVES[category.category_id]
    else:
        from .synth import _templates  # surface forms double as exemplars

        sent = _templates()["categories"][category.category_id]["paraphrase"][0]
        note, quote = sent, sent
    return [(_SHOT_NEG_DEMOGRAPHIC, None), (note, quote), (_SHOT_NEG_FLYER, None)]


def build_chat_prompt(
    category: SymptomCategory, note_text: str, shots: list[Shot]
) -> ChatPrompt:
    if len(shots) != 3:
        raise ValueError(f"chat prompts require exactly 3 shots, got {len(shots)}")
    messages: list[tuple[str, str]] = [("system", SYSTEM_MESSAGE)]
    for shot_note, quote in shots:
        messages.append(("user", f"Here is an EHR note: '{shot_note}' {category.chat_query}"))
        messages.append(("assistant", "No." if quote is None else f"Yes: '{quote}'"))
    messages.append(("user", f"Here is an EHR note: '{note_text}' {category.chat_query}"))
    return ChatPrompt(tuple(messages))


def build_entailment_prompt(category: SymptomCategory, note_text: str) -> str:
    return (
        f"Premise: This is an EHR note: {note_text}. "
        f"Hypothesis: {category.hypothesis} "
        "Does the premise entail the hypothesis?"
    )


# ---------------------------------------------------------------------------
# Response parsing (total: every string maps to exactly one outcome)

_FIRST_TOKEN_RE = re.compile(r"\s*([A-Za-z]+)")
_QUOTED_RE = re.compile(r"'([^']*)'|\"([^\"]*)\"")


def parse_chat_response(raw: str):
    """Returns (present, quote) or UNPARSEABLE."""
    m = _FIRST_TOKEN_RE.match(raw)
    if not m:
        return UNPARSEABLE
    token = m.group(1).lower()
    if token == "no":
        return False, None
    if token != "yes":
        return UNPARSEABLE
    line = raw.strip().splitlines()[0]
    _, colon, rest = line.partition(":")
    if colon:
        qm = _QUOTED_RE.search(rest)
        if qm:
            return True, qm.group(1) if qm.group(1) is not None else qm.group(2)
        rest = rest.strip()
        return True, rest or None
    remainder = line[m.end() :].strip(" .,;") or None
    return True, remainder


_ENTAIL_TRUE = {"yes", "entailment"}
_ENTAIL_FALSE = {"no", "not", "neutral", "contradiction"}


def parse_entailment_response(raw: str):
    """Returns a boolean or UNPARSEABLE."""
    m = _FIRST_TOKEN_RE.match(raw)
    if not m:
        return UNPARSEABLE
    token = m.group(1).lower()
    if token in _ENTAIL_TRUE:
        return True
    if token in _ENTAIL_FALSE:
        return False
    return UNPARSEABLE


# ---------------------------------------------------------------------------
# Evidence helpers

_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_RE.split(text) if s.strip()]


def byte_span(text: str, substring_char_start: int, substring: str) -> tuple[int, int]:
    start = len(text[:substring_char_start].encode("utf-8"))
    return start, start + len(substring.encode("utf-8"))


def resolve_evidence(note_text: str, quote: str) -> EvidenceSpan:
    """First case-insensitive exact match of the quote; unresolved quotes
    are kept without offsets (backends may paraphrase)."""
    idx = note_text.lower().find(quote.lower())
    if idx < 0:
        return EvidenceSpan(quote=quote)
    start, end = byte_span(note_text, idx, note_text[idx : idx + len(quote)])
    return EvidenceSpan(quote=quote, start=start, end=end)


# ---------------------------------------------------------------------------
# Backends

def keyword_match(note_text: str, category: SymptomCategory) -> frozenset[str] | None:
    """Note-level whole-word case-insensitive match; returns the first
    keyword set whose words all occur, else None."""
    for word_set in category.keywords:
        if all(
            re.search(rf"\b{re.escape(w)}\b", note_text, re.IGNORECASE) for w in word_set
        ):
            return word_set
    return None


def _keyword_detect(backend: BackendConfig, note: Note, category: SymptomCategory) -> Detection:
    matched = keyword_match(note.text, category)
    if matched is None:
        return Detection(note.note_id, category.category_id, False, (), backend.backend_id, "ok")
    evidence: tuple[EvidenceSpan, ...] = ()
    fallback = None
    for sent in split_sentences(note.text):
        low = sent.lower()
        has = [re.search(rf"\b{re.escape(w)}\b", low) for w in matched]
        if all(has):
            evidence = (resolve_evidence(note.text, sent),)
            break
        if fallback is None and any(has):
            fallback = sent
    if not evidence and fallback is not None:
        evidence = (resolve_evidence(note.text, fallback),)
    return Detection(
        note.note_id, category.category_id, True, evidence, backend.backend_id, "ok"
    )


def _gold_evidence(note: Note, gold: GoldLabel) -> tuple[EvidenceSpan, ...]:
    raw = note.text.encode("utf-8")
    return tuple(
        EvidenceSpan(quote=raw[s.start : s.end].decode("utf-8"), start=s.start, end=s.end)
        for s in gold.evidence
    )


def _mock_detect(
    backend: BackendConfig,
    note: Note,
    category: SymptomCategory,
    gold_map: dict[tuple[str, str], GoldLabel],
) -> Detection:
    gold = gold_map.get((note.note_id, category.category_id))
    present = bool(gold and gold.present)
    verdict = present
    if backend.kind == "noisy_mock":
        rng = random.Random(f"{backend.seed}:{note.note_id}:{category.category_id}")
        if verdict:
            if rng.random() < backend.fn_rate:
                verdict = False
        else:
            if rng.random() < backend.fp_rate:
                verdict = True
    evidence = _gold_evidence(note, gold) if (verdict and present and gold) else ()
    return Detection(
        note.note_id, category.category_id, verdict, evidence, backend.backend_id, "ok"
    )


class WireClient:
    """Thread-safe HTTP client for chat/completion endpoints with retries."""

    def __init__(self, backend: BackendConfig):
        self.backend = backend
        endpoint = os.environ.get("SYMSCREEN_ENDPOINT") or backend.endpoint
        if not endpoint:
            raise ValueError(f"backend {backend.backend_id} has no endpoint")
        headers = {}
        api_key = os.environ.get("SYMSCREEN_API_KEY")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=endpoint.rstrip("/"), timeout=backend.timeout, headers=headers
        )

    def close(self):
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.backend.max_retries + 1):
            try:
                resp = self._client.post(path, json=payload)
                resp.raise_for_status()
                return resp.json()
            except (httpx.HTTPError, json.JSONDecodeError) as e:
                last_exc = e
                if attempt < self.backend.max_retries:
                    delay = 0.5 * (2**attempt) * (1 + random.random() * 0.25)
                    time.sleep(delay)
        raise BackendCallError(str(last_exc))

    def chat(self, prompt: ChatPrompt) -> str:
        payload = {
            "model": self.backend.model_name,
            "messages": prompt.to_wire(),
            "temperature": 0,
            "max_tokens": 128,
            "stop": ["\n"],
        }
        data = self._post("/v1/chat/completions", payload)
        return data["choices"][0]["message"]["content"]

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.backend.model_name,
            "prompt": prompt,
            "temperature": 0,
            "max_tokens": 128,
            "stop": ["\n"],
        }
        data = self._post("/v1/completions", payload)
        return data["choices"][0]["text"]


class BackendCallError(RuntimeError):
    pass


def _wire_detect(
    backend: BackendConfig,
    note: Note,
    category: SymptomCategory,
    client: WireClient,
    shots: list[Shot] | None = None,
) -> Detection:
    text, was_truncated = truncate(note.text, backend.char_limit)
    ok_status = "truncated_ok" if was_truncated else "ok"
    try:
        if backend.kind == "chat":
            prompt = build_chat_prompt(category, text, shots or default_shots(category))
            raw = client.chat(prompt)
            parsed = parse_chat_response(raw)
            if parsed is UNPARSEABLE:
                return Detection(
                    note.note_id, category.category_id, False, (), backend.backend_id,
                    "unparseable", raw_response=raw,
                )
            present, quote = parsed
            evidence = (resolve_evidence(note.text, quote),) if (present and quote) else ()
            return Detection(
                note.note_id, category.category_id, present, evidence, backend.backend_id,
                ok_status if present else "ok", raw_response=raw,
            )
        else:  # entailment
            prompt = build_entailment_prompt(category, text)
            raw = client.complete(prompt)
            parsed = parse_entailment_response(raw)
            if parsed is UNPARSEABLE:
                return Detection(
                    note.note_id, category.category_id, False, (), backend.backend_id,
                    "unparseable", raw_response=raw,
                )
            return Detection(
                note.note_id, category.category_id, bool(parsed), (), backend.backend_id,
                ok_status if parsed else "ok", raw_response=raw,
            )
    except BackendCallError as e:
        return Detection(
            note.note_id, category.category_id, False, (), backend.backend_id,
            "backend_error", raw_response=str(e),
        )


def detect(
    backend: BackendConfig,
    note: Note,
    category: SymptomCategory,
    gold_map: dict[tuple[str, str], GoldLabel] | None = None,
    client: WireClient | None = None,
    shots: list[Shot] | None = None,
) -> Detection:
    if backend.kind == "keyword":
        return _keyword_detect(backend, note, category)
    if backend.kind in ("mock", "noisy_mock"):
        if gold_map is None:
            raise ValueError("mock backends require the corpus gold labels")
        return _mock_detect(backend, note, category, gold_map)
    if client is None:
        client = WireClient(backend)
    return _wire_detect(backend, note, category, client, shots)


def run_extraction(
    backend: BackendConfig,
    corpus: Corpus,
    categories: tuple[SymptomCategory, ...] | None = None,
) -> list[Detection]:
    """One detection per (note, category), sorted by (note_id, category_id);
    output is independent of execution order and parallelism."""
    cats = categories if categories is not None else taxonomy()
    gold_map = corpus.gold_map() if backend.kind in ("mock", "noisy_mock") else None
    client = WireClient(backend) if backend.kind in ("chat", "entailment") else None
    tasks = [(note, cat) for note in corpus.notes for cat in cats]
    try:
        if backend.parallelism > 1:
            with ThreadPoolExecutor(max_workers=backend.parallelism) as pool:
                results = list(
                    pool.map(
                        lambda t: detect(backend, t[0], t[1], gold_map=gold_map, client=client),
                        tasks,
                    )
                )
        else:
            results = [
                detect(backend, note, cat, gold_map=gold_map, client=client)
                for note, cat in tasks
            ]
    finally:
        if client is not None:
            client.close()
    results.sort(key=lambda d: (d.note_id, d.category_id))
    return results


# ---------------------------------------------------------------------------
# detections.jsonl

def detections_to_jsonl(detections: list[Detection]) -> str:
    lines = []
    for d in detections:
        lines.append(
            json.dumps(
                {
                    "note_id": d.note_id,
                    "category_id": d.category_id,
                    "present": d.present,
                    "evidence": [
                        {"quote": e.quote, "start": e.start, "end": e.end} for e in d.evidence
                    ],
                    "backend_id": d.backend_id,
                    "status": d.status,
                    "raw_response": d.raw_response,
                },
                ensure_ascii=False,
            )
        )
    return "".join(line + "\n" for line in lines)


def write_detections(detections: list[Detection], path: str | Path) -> None:
    Path(path).write_text(detections_to_jsonl(detections), encoding="utf-8", newline="\n")


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(detection_from_record(rec))
    return out


def detection_from_record(rec: dict) -> Detection:
    return Detection(
        note_id=rec["note_id"],
        category_id=rec["category_id"],
        present=bool(rec["present"]),
        evidence=tuple(
            EvidenceSpan(quote=e["quote"], start=e.get("start"), end=e.get("end"))
            for e in rec.get("evidence", [])
        ),
        backend_id=rec.get("backend_id", ""),
        status=rec.get("status", "ok"),
        raw_response=rec.get("raw_response"),
    )

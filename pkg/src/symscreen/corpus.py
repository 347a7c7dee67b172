"""Corpus model and ingest: patients, notes, gold labels, PHQ mining,
cohort statistics, and case-control matching.

File formats (all UTF-8, LF-terminated JSON lines; unknown fields are
ignored on read and never emitted on write):

  patients.jsonl  patient_id, birth_date, gender ("F"|"M"|"O"), is_case,
                  diagnosis_date (nullable)
  notes.jsonl     note_id, patient_id, date, department, text
  gold.jsonl      note_id, category_id, present, evidence [{start, end}]
"""

from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

GENDERS = ("F", "M", "O")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Patient:
    patient_id: str
    birth_date: dt.date
    gender: str
    is_case: bool
    diagnosis_date: dt.date | None = None

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise CorpusError(f"bad gender {self.gender!r} for {self.patient_id}")
        if self.is_case and self.diagnosis_date is None:
            raise CorpusError(f"case {self.patient_id} lacks diagnosis_date")


@dataclass(frozen=True)
class Note:
    note_id: str
    patient_id: str
    date: dt.date
    department: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusError(f"note {self.note_id} has empty text")


@dataclass(frozen=True)
class Span:
    start: int  # byte offsets into the note's UTF-8 encoding
    end: int


@dataclass(frozen=True)
class GoldLabel:
    note_id: str
    category_id: str
    present: bool
    evidence: tuple[Span, ...] = ()


@dataclass(frozen=True)
class PHQInstance:
    total_score: int | None
    items_answered: int
    kind: str  # "PHQ9" | "PHQ2" | "partial"
    malformed: bool = False
    note_id: str | None = None


@dataclass
class Corpus:
    patients: dict[str, Patient] = field(default_factory=dict)
    notes: list[Note] = field(default_factory=list)
    gold: list[GoldLabel] = field(default_factory=list)

    def notes_by_patient(self) -> dict[str, list[Note]]:
        out: dict[str, list[Note]] = {p: [] for p in self.patients}
        for n in self.notes:
            out[n.patient_id].append(n)
        return out

    def gold_map(self) -> dict[tuple[str, str], GoldLabel]:
        return {(g.note_id, g.category_id): g for g in self.gold}

    def note(self, note_id: str) -> Note:
        for n in self.notes:
            if n.note_id == note_id:
                return n
        raise KeyError(note_id)

    def validate(self) -> None:
        seen_notes: set[str] = set()
        for n in self.notes:
            if n.note_id in seen_notes:
                raise CorpusError(f"duplicate note_id {n.note_id}")
            seen_notes.add(n.note_id)
            if n.patient_id not in self.patients:
                raise CorpusError(f"dangling patient reference: note {n.note_id}")
        for g in self.gold:
            if g.note_id not in seen_notes:
                raise CorpusError(f"gold label references unknown note {g.note_id}")


# ---------------------------------------------------------------------------
# JSONL ingest / emit

def _parse_date(s: str) -> dt.date:
    return dt.date.fromisoformat(s)


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path.name}:{lineno}: malformed line ({e.msg})") from None


def ingest(path: str | Path) -> Corpus:
    """Load a corpus directory (patients.jsonl, notes.jsonl, optional gold.jsonl)."""
    root = Path(path)
    if not root.exists():
        raise CorpusError(f"no such corpus path: {root}")
    corpus = Corpus()

    ppath = root / "patients.jsonl"
    if ppath.exists():
        for lineno, rec in _read_jsonl(ppath):
            try:
                p = Patient(
                    patient_id=rec["patient_id"],
                    birth_date=_parse_date(rec["birth_date"]),
                    gender=rec["gender"],
                    is_case=bool(rec["is_case"]),
                    diagnosis_date=_parse_date(rec["diagnosis_date"])
                    if rec.get("diagnosis_date")
                    else None,
                )
            except (KeyError, ValueError, TypeError) as e:
                raise CorpusError(f"patients.jsonl:{lineno}: malformed line ({e})") from None
            if p.patient_id in corpus.patients:
                raise CorpusError(f"patients.jsonl:{lineno}: duplicate patient_id {p.patient_id}")
            corpus.patients[p.patient_id] = p

    npath = root / "notes.jsonl"
    dangling: list[str] = []
    if npath.exists():
        seen: set[str] = set()
        for lineno, rec in _read_jsonl(npath):
            try:
                n = Note(
                    note_id=rec["note_id"],
                    patient_id=rec["patient_id"],
                    date=_parse_date(rec["date"]),
                    department=rec.get("department", ""),
                    text=rec["text"],
                )
            except (KeyError, ValueError, TypeError) as e:
                raise CorpusError(f"notes.jsonl:{lineno}: malformed line ({e})") from None
            if n.note_id in seen:
                raise CorpusError(f"notes.jsonl:{lineno}: duplicate note_id {n.note_id}")
            seen.add(n.note_id)
            if n.patient_id not in corpus.patients:
                dangling.append(n.note_id)
            corpus.notes.append(n)
    if dangling:
        raise CorpusError(f"dangling patient references in notes: {', '.join(dangling)}")

    gpath = root / "gold.jsonl"
    if gpath.exists():
        corpus.gold.extend(g for _, g in read_gold(gpath))
    corpus.validate()
    return corpus


def read_gold(path: str | Path):
    for lineno, rec in _read_jsonl(Path(path)):
        try:
            g = GoldLabel(
                note_id=rec["note_id"],
                category_id=rec["category_id"],
                present=bool(rec["present"]),
                evidence=tuple(Span(e["start"], e["end"]) for e in rec.get("evidence", [])),
            )
        except (KeyError, TypeError) as e:
            raise CorpusError(f"gold.jsonl:{lineno}: malformed line ({e})") from None
        yield lineno, g


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "patients.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for p in corpus.patients.values():
            fh.write(
                json.dumps(
                    {
                        "patient_id": p.patient_id,
                        "birth_date": p.birth_date.isoformat(),
                        "gender": p.gender,
                        "is_case": p.is_case,
                        "diagnosis_date": p.diagnosis_date.isoformat()
                        if p.diagnosis_date
                        else None,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    with open(root / "notes.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for n in corpus.notes:
            fh.write(
                json.dumps(
                    {
                        "note_id": n.note_id,
                        "patient_id": n.patient_id,
                        "date": n.date.isoformat(),
                        "department": n.department,
                        "text": n.text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    write_gold(corpus.gold, root / "gold.jsonl")


def write_gold(gold: list[GoldLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(gold_to_jsonl(gold))


def gold_to_jsonl(gold: list[GoldLabel]) -> str:
    lines = []
    for g in gold:
        lines.append(
            json.dumps(
                {
                    "note_id": g.note_id,
                    "category_id": g.category_id,
                    "present": g.present,
                    "evidence": [{"start": s.start, "end": s.end} for s in g.evidence],
                },
                ensure_ascii=False,
            )
        )
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# PHQ pattern mining

PHQ_MARKER = "PHQ-9 Total Score:"
_SCORE_RE = re.compile(r"\s*(\d{1,2})")
_ITEMS_RE = re.compile(r"Items Answered:\s*(\d)")


def parse_phq(note_text: str, assume_full: bool = True) -> list[PHQInstance]:
    """Mine PHQ instances from a note by scanning for the total-score marker.

    A score must be parseable within 16 characters of the marker, else the
    instance is kept but flagged malformed. An adjacent ``Items Answered: k``
    (within 64 chars after the score) gives the completion count; absent
    that, ``assume_full`` decides PHQ-9 vs partial.
    """
    out: list[PHQInstance] = []
    start = 0
    while True:
        idx = note_text.find(PHQ_MARKER, start)
        if idx < 0:
            break
        tail = note_text[idx + len(PHQ_MARKER) :]
        m = _SCORE_RE.match(tail[:16])
        score: int | None = None
        malformed = False
        if m and int(m.group(1)) <= 27:
            score = int(m.group(1))
        else:
            malformed = True
        after = tail[m.end() if m else 0 :][:64]
        im = _ITEMS_RE.search(after)
        if im:
            items = int(im.group(1))
        elif score is not None and assume_full:
            items = 9
        else:
            items = 0
        if items == 9:
            kind = "PHQ9"
        elif items >= 2:
            kind = "PHQ2"
        else:
            kind = "partial"
        out.append(
            PHQInstance(total_score=score, items_answered=items, kind=kind, malformed=malformed)
        )
        start = idx + len(PHQ_MARKER)
    return out


def corpus_phq_instances(corpus: Corpus, assume_full: bool = True) -> list[PHQInstance]:
    out = []
    for n in corpus.notes:
        for inst in parse_phq(n.text, assume_full=assume_full):
            out.append(
                PHQInstance(
                    total_score=inst.total_score,
                    items_answered=inst.items_answered,
                    kind=inst.kind,
                    malformed=inst.malformed,
                    note_id=n.note_id,
                )
            )
    return out


# ---------------------------------------------------------------------------
# Cohort statistics

@dataclass(frozen=True)
class CohortStatsRow:
    age_bin: int  # -1 marks the average row
    n_patients: float
    n_visits_with_phq: float
    n_patients_with_phq: float
    pct_at_least_one_phq: float
    pct_at_least_one_phq9: float
    pct_at_least_one_phq2: float
    pct_at_least_two_phq: float
    pct_at_least_two_phq9: float
    pct_at_least_two_phq2: float


def _age_years(birth: dt.date, on: dt.date) -> int:
    years = on.year - birth.year
    if (on.month, on.day) < (birth.month, birth.day):
        years -= 1
    return years


def cohort_stats(
    corpus: Corpus, assume_full: bool = True, denominator: str = "with_phq"
) -> list[CohortStatsRow]:
    """Per-age-bin PHQ completion statistics plus a final average row.

    Percentages are relative to patients with any recorded PHQ marker by
    default; ``denominator="cohort"`` switches to the full bin population.
    """
    if denominator not in ("with_phq", "cohort"):
        raise ValueError("denominator must be 'with_phq' or 'cohort'")
    by_patient = corpus.notes_by_patient()
    # per-patient PHQ instances (well-formed only counted for score stats)
    bins: dict[int, list[str]] = {}
    inst_by_patient: dict[str, list[PHQInstance]] = {}
    notes_with_phq: dict[str, int] = {}
    for pid, notes in by_patient.items():
        if not notes:
            continue
        last = max(n.date for n in notes)
        age = _age_years(corpus.patients[pid].birth_date, last)
        bins.setdefault(age, []).append(pid)
        insts = []
        nvisits = 0
        for n in notes:
            found = parse_phq(n.text, assume_full=assume_full)
            if found:
                nvisits += 1
            insts.extend(found)
        inst_by_patient[pid] = insts
        notes_with_phq[pid] = nvisits

    def pct(num: int, den: int) -> float:
        return 100.0 * num / den if den else 0.0

    rows: list[CohortStatsRow] = []
    for age in sorted(bins):
        pids = bins[age]
        recorded = [p for p in pids if inst_by_patient[p]]
        den = len(pids) if denominator == "cohort" else len(recorded)

        def count(pred) -> int:
            return sum(1 for p in pids if pred(inst_by_patient[p]))

        ok = lambda insts: [i for i in insts if not i.malformed]  # noqa: E731
        rows.append(
            CohortStatsRow(
                age_bin=age,
                n_patients=len(pids),
                n_visits_with_phq=sum(notes_with_phq[p] for p in pids),
                n_patients_with_phq=len(recorded),
                pct_at_least_one_phq=pct(count(lambda i: len(ok(i)) >= 1), den),
                pct_at_least_one_phq9=pct(
                    count(lambda i: sum(1 for x in ok(i) if x.kind == "PHQ9") >= 1), den
                ),
                pct_at_least_one_phq2=pct(
                    count(lambda i: sum(1 for x in ok(i) if x.kind == "PHQ2") >= 1), den
                ),
                pct_at_least_two_phq=pct(count(lambda i: len(ok(i)) >= 2), den),
                pct_at_least_two_phq9=pct(
                    count(lambda i: sum(1 for x in ok(i) if x.kind == "PHQ9") >= 2), den
                ),
                pct_at_least_two_phq2=pct(
                    count(lambda i: sum(1 for x in ok(i) if x.kind == "PHQ2") >= 2), den
                ),
            )
        )
    if rows:
        n = len(rows)
        rows.append(
            CohortStatsRow(
                age_bin=-1,
                n_patients=sum(r.n_patients for r in rows) / n,
                n_visits_with_phq=sum(r.n_visits_with_phq for r in rows) / n,
                n_patients_with_phq=sum(r.n_patients_with_phq for r in rows) / n,
                pct_at_least_one_phq=sum(r.pct_at_least_one_phq for r in rows) / n,
                pct_at_least_one_phq9=sum(r.pct_at_least_one_phq9 for r in rows) / n,
                pct_at_least_one_phq2=sum(r.pct_at_least_one_phq2 for r in rows) / n,
                pct_at_least_two_phq=sum(r.pct_at_least_two_phq for r in rows) / n,
                pct_at_least_two_phq9=sum(r.pct_at_least_two_phq9 for r in rows) / n,
                pct_at_least_two_phq2=sum(r.pct_at_least_two_phq2 for r in rows) / n,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Case-control matching

def months_before(date: dt.date, months: int) -> dt.date:
    month = date.month - months
    year = date.year
    while month < 1:
        month += 12
        year -= 1
    day = min(date.day, [31, 29 if year % 4 == 0 and (year % 100 != 0 or year % 400 == 0) else 28,
                         31, 30, 31, 30, 31, 31, 30, 31, 30, 31][month - 1])
    return dt.date(year, month, day)


MATCH_BIRTH_WINDOW_DAYS = 30
MATCH_VISIT_WINDOW_MONTHS = 18


def control_eligible(case: Patient, control: Patient, control_notes: list[Note]) -> bool:
    """All four matching predicates for one (case, control) candidate pair."""
    if control.is_case or control.gender != case.gender:
        return False
    if abs((control.birth_date - case.birth_date).days) > MATCH_BIRTH_WINDOW_DAYS:
        return False
    dx = case.diagnosis_date
    assert dx is not None
    if control.diagnosis_date is not None and control.diagnosis_date <= dx:
        return False
    window_start = months_before(dx, MATCH_VISIT_WINDOW_MONTHS)
    return any(window_start <= n.date <= dx for n in control_notes)


def match_controls(
    cases: list[Patient],
    pool: list[Patient],
    notes_by_patient: dict[str, list[Note]],
) -> tuple[list[tuple[Patient, Patient]], list[Patient]]:
    """Greedily match each case to one distinct eligible control.

    Cases are processed in ascending diagnosis-date order; ties between
    candidate controls break on smallest birth-date gap, then patient_id.
    Unmatched cases are returned separately, not raised.
    """
    pairs: list[tuple[Patient, Patient]] = []
    unmatched: list[Patient] = []
    used: set[str] = set()
    for case in sorted(cases, key=lambda p: (p.diagnosis_date, p.patient_id)):
        best = None
        for cand in pool:
            if cand.patient_id in used:
                continue
            if not control_eligible(case, cand, notes_by_patient.get(cand.patient_id, [])):
                continue
            key = (abs((cand.birth_date - case.birth_date).days), cand.patient_id)
            if best is None or key < best[0]:
                best = (key, cand)
        if best is None:
            unmatched.append(case)
        else:
            used.add(best[1].patient_id)
            pairs.append((case, best[1]))
    return pairs, unmatched

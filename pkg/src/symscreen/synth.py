"""Seeded synthetic corpus generator with planted note-level ground truth.

Each planted symptom is realized as a direct surface form, a paraphrase
(with probability paraphrase_rate), or a negated form (with probability
negation_rate; negated plants are gold-negative). Surface forms live in
``data/templates.toml``. Generation is fully deterministic for a fixed
spec: equal specs produce byte-identical corpora.
"""

from __future__ import annotations

import datetime as dt
import random
import tomllib
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .corpus import Corpus, GoldLabel, Note, Patient, Span
from .taxonomy import category_ids

# Per-note plant probabilities for case and control patients, derived from
# the reported per-category note counts and case/control shares of the
# 3,000 + 3,000 note screening dataset.
_NOTE_COUNTS = {
    "not_going_to_school": (91, 0.59),
    "neglecting_activities": (210, 0.60),
    "no_motivation": (68, 0.79),
    "feeling_depressed": (280, 0.86),
    "feeling_anxious": (271, 0.78),
    "feeling_down": (411, 0.83),
    "irritability": (109, 0.67),
    "mh_concerns": (433, 0.63),
    "sleep_problems": (396, 0.66),
    "high_appetite": (57, 0.74),
    "low_appetite": (291, 0.68),
    "weight_change": (107, 0.60),
    "little_energy": (271, 0.63),
    "self_loathing": (234, 0.88),
    "abnormal_behavior": (88, 0.65),
    "suicidal_thoughts": (279, 0.85),
}
_N_NOTES_PER_ARM = 3000

DEFAULT_CASE_RATES = {
    cid: n * share / _N_NOTES_PER_ARM for cid, (n, share) in _NOTE_COUNTS.items()
}
DEFAULT_CONTROL_RATES = {
    cid: n * (1 - share) / _N_NOTES_PER_ARM for cid, (n, share) in _NOTE_COUNTS.items()
}

_FIRST_NAMES = [
    "Alex", "Bailey", "Casey", "Devon", "Emery", "Finley", "Harper", "Jordan",
    "Kendall", "Logan", "Morgan", "Parker", "Quinn", "Riley", "Sage", "Taylor",
]
_DEPARTMENTS = [
    "Primary Care", "Adolescent Medicine", "Endocrinology", "Pediatrics", "Gastroenterology",
]


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    n_cases: int
    n_controls: int
    notes_per_patient: tuple[int, int] = (4, 12)
    category_rates_case: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_CASE_RATES)
    )
    category_rates_control: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_CONTROL_RATES)
    )
    paraphrase_rate: float = 0.3
    negation_rate: float = 0.1
    distractor_rate: float = 0.3
    phq_rate: float = 0.3

    def __post_init__(self):
        if self.n_cases < 1 or self.n_controls < 1:
            raise ValueError("need at least one case and one control")
        for name in ("paraphrase_rate", "negation_rate", "distractor_rate", "phq_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} out of [0,1]")
        known = set(category_ids())
        for rates in (self.category_rates_case, self.category_rates_control):
            for cid, p in rates.items():
                if cid not in known:
                    raise ValueError(f"unknown category in rates: {cid}")
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"rate for {cid} out of [0,1]")


@lru_cache(maxsize=1)
def _templates() -> dict:
    text = resources.files("symscreen.data").joinpath("templates.toml").read_text("utf-8")
    return tomllib.loads(text)


def _age_years(birth: dt.date, on: dt.date) -> int:
    years = on.year - birth.year
    if (on.month, on.day) < (birth.month, birth.day):
        years -= 1
    return years


def synthesize(spec: SynthSpec) -> Corpus:
    rng = random.Random(spec.seed)
    tpl = _templates()
    cats = category_ids()
    corpus = Corpus()

    # patients: cases first, then controls with birth dates near a case's
    # (so case-control matching has candidates to work with)
    case_births: list[dt.date] = []
    for i in range(spec.n_cases):
        birth = dt.date(2005, 1, 1) + dt.timedelta(days=rng.randrange(0, 4 * 365))
        case_births.append(birth)
        diagnosis = dt.date(2021, 1, 1) + dt.timedelta(days=rng.randrange(0, 330))
        corpus.patients[f"case{i:04d}"] = Patient(
            patient_id=f"case{i:04d}",
            birth_date=birth,
            gender=rng.choice(["F", "M"]),
            is_case=True,
            diagnosis_date=diagnosis,
        )
    for i in range(spec.n_controls):
        anchor = rng.choice(case_births)
        birth = anchor + dt.timedelta(days=rng.randrange(-40, 41))
        corpus.patients[f"ctrl{i:04d}"] = Patient(
            patient_id=f"ctrl{i:04d}",
            birth_date=birth,
            gender=rng.choice(["F", "M"]),
            is_case=False,
        )

    note_seq = 0
    lo, hi = spec.notes_per_patient
    for patient in corpus.patients.values():
        rates = spec.category_rates_case if patient.is_case else spec.category_rates_control
        name = rng.choice(_FIRST_NAMES)
        n_notes = rng.randint(lo, hi)
        if patient.is_case:
            window_end = patient.diagnosis_date
        else:
            window_end = dt.date(2021, 6, 1) + dt.timedelta(days=rng.randrange(0, 180))
        for _ in range(n_notes):
            note_id = f"note{note_seq:06d}"
            note_seq += 1
            date = window_end - dt.timedelta(days=rng.randrange(0, 540))
            department = rng.choice(_DEPARTMENTS)
            sentences: list[str] = []
            opener = rng.choice(tpl["boilerplate"]["openers"]).format(
                name=name, age=_age_years(patient.birth_date, date), department=department
            )
            sentences.append(opener)

            planted: dict[str, str | None] = {}  # cid -> positive sentence or None
            for cid in cats:
                if rng.random() >= rates.get(cid, 0.0):
                    continue
                forms = tpl["categories"][cid]
                if rng.random() < spec.negation_rate:
                    sentences.append(rng.choice(forms["negated"]))
                    planted[cid] = None  # planted but gold-negative
                else:
                    kind = "paraphrase" if rng.random() < spec.paraphrase_rate else "direct"
                    sent = rng.choice(forms[kind])
                    sentences.append(sent)
                    planted[cid] = sent
            for filler in tpl["boilerplate"]["fillers"]:
                if rng.random() < spec.distractor_rate:
                    sentences.append(filler)
            if rng.random() < spec.phq_rate:
                score = rng.randint(0, 27)
                if rng.random() < 0.7:
                    sentences.append(f"PHQ-9 Total Score: {score} Items Answered: 9.")
                else:
                    sentences.append(f"PHQ-9 Total Score: {score} Items Answered: 2.")

            text = " ".join(sentences)
            corpus.notes.append(
                Note(
                    note_id=note_id,
                    patient_id=patient.patient_id,
                    date=date,
                    department=department,
                    text=text,
                )
            )
            for cid in cats:
                sent = planted.get(cid)
                if sent is not None:
                    start = len(text[: text.index(sent)].encode("utf-8"))
                    end = start + len(sent.encode("utf-8"))
                    corpus.gold.append(
                        GoldLabel(note_id, cid, True, evidence=(Span(start, end),))
                    )
                else:
                    corpus.gold.append(GoldLabel(note_id, cid, False))

    corpus.validate()
    return corpus

"""Diagnosis-criteria retrieval and report composition.

A small embedded store maps disease names to waveform criteria. Report text
for a record is built by expanding each of its diagnosis codes, retrieving
the closest disease key by cosine similarity and appending its criteria.
No generative model is involved, so reports are a pure function of inputs.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatabase, MissingFile

Embedder = Callable[[str], np.ndarray]

DEFAULT_ABBREVIATIONS = {
    "NORM": "Normal ECG",
    "SR": "Sinus Rhythm",
    "STACH": "Sinus Tachycardia",
    "SBRAD": "Sinus Bradycardia",
    "SARRH": "Sinus Arrhythmia",
    "AFIB": "Atrial Fibrillation",
    "AFLT": "Atrial Flutter",
    "PAC": "Premature Atrial Complex",
    "PVC": "Premature Ventricular Complex",
    "LBBB": "Left Bundle Branch Block",
    "CLBBB": "Complete Left Bundle Branch Block",
    "RBBB": "Right Bundle Branch Block",
    "CRBBB": "Complete Right Bundle Branch Block",
    "IRBBB": "Incomplete Right Bundle Branch Block",
    "LAFB": "Left Anterior Fascicular Block",
    "1AVB": "First Degree AV Block",
    "2AVB": "Second Degree AV Block",
    "3AVB": "Third Degree AV Block",
    "WPW": "Wolff-Parkinson-White Syndrome",
    "LVH": "Left Ventricular Hypertrophy",
    "RVH": "Right Ventricular Hypertrophy",
    "LAO/LAE": "Left Atrial Enlargement",
    "IMI": "Inferior Myocardial Infarction",
    "AMI": "Anterior Myocardial Infarction",
    "ASMI": "Anteroseptal Myocardial Infarction",
    "ISC_": "Non-specific Ischemic Changes",
    "NDT": "Non-diagnostic T Wave Abnormalities",
    "LVOLT": "Low QRS Voltages",
    "MI": "Myocardial Infarction",
    "STTC": "ST/T Change",
    "CD": "Conduction Disturbance",
    "HYP": "Hypertrophy",
}


def normalize(v: np.ndarray) -> np.ndarray:
    """Unit-L2 copy of ``v`` (rows, if 2-D). Zero vectors map to the first basis vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        n = np.linalg.norm(v)
        if n == 0:
            out = np.zeros_like(v)
            out[0] = 1.0
            return out
        return v / n
    return np.stack([normalize(r) for r in v])


class HashingEmbedder:
    """Deterministic character n-gram embedder.

    Each n-gram of the lower-cased, boundary-padded text is hashed with a
    keyed BLAKE2 digest into a signed bucket. Stable across processes and
    platforms, so it stands in for a sentence-embedding model in tests.
    """

    def __init__(self, dim: int = 256, ngram_range: tuple[int, int] = (2, 4), seed: int = 0):
        if dim < 1:
            raise ConfigError("embedding dim must be positive")
        self.dim = dim
        self.ngram_range = ngram_range
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)

    @property
    def embedder_id(self) -> str:
        lo, hi = self.ngram_range
        return f"hashing-ngram:dim={self.dim}:n={lo}-{hi}:seed={self.seed}"

    def ngrams(self, text: str) -> list[str]:
        s = f"^{text.lower()}$"
        lo, hi = self.ngram_range
        return [s[i:i + n] for n in range(lo, hi + 1) for i in range(max(len(s) - n + 1, 0))]

    def __call__(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for g in self.ngrams(text):
            h = hashlib.blake2b(g.encode("utf-8"), digest_size=8, key=self._key).digest()
            x = int.from_bytes(h, "little")
            v[x % self.dim] += 1.0 if (x >> 63) & 1 else -1.0
        return v


class SentenceTransformerEmbedder:
    """Adapter for a pretrained sentence-embedding model (loaded lazily)."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer

        self.model_name = model_name
        self._model = SentenceTransformer(model_name)

    @property
    def embedder_id(self) -> str:
        return self.model_name

    def __call__(self, text: str) -> np.ndarray:
        return np.asarray(self._model.encode(text), dtype=np.float64)


def embedder_id(embedder: Embedder) -> str:
    return getattr(embedder, "embedder_id", repr(embedder))


@dataclass(frozen=True)
class DiagnosisEntry:
    key: str
    criteria: str

    def __post_init__(self):
        if not self.key.strip() or not self.criteria.strip():
            raise ConfigError(f"diagnosis entries need non-empty key and criteria: {self!r}")


@dataclass
class DiagnosisDB:
    entries: list[DiagnosisEntry]
    key_embeddings: np.ndarray
    embedder_id: str
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def similarities(self, query: np.ndarray) -> np.ndarray:
        return self.key_embeddings @ normalize(query)


@dataclass
class RetrievalConfig:
    similarity_threshold: float = 0.5

    def __post_init__(self):
        # thresholds above 1 are legal and disable retrieval
        if not np.isfinite(self.similarity_threshold):
            raise ConfigError(f"threshold must be finite, got {self.similarity_threshold}")


class Expansion(NamedTuple):
    phrase: str
    hit: bool


def build_diagnosis_db(entries: Iterable[DiagnosisEntry], embedder: Embedder) -> DiagnosisDB:
    entries = list(entries)
    if not entries:
        raise EmptyDatabase("cannot build a diagnosis database with no entries")
    notes = []
    seen = {}
    for i, e in enumerate(entries):
        if e.key in seen:
            notes.append(f"duplicate key {e.key!r} at entries {seen[e.key]} and {i}")
        seen.setdefault(e.key, i)
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    emb = normalize(np.stack([np.asarray(embedder(e.key), dtype=np.float64) for e in entries]))
    return DiagnosisDB(entries, emb, embedder_id(embedder), notes)


def read_diagnoses(path: str | Path) -> list[DiagnosisEntry]:
    """Read a JSONL file of ``{"key": ..., "criteria": ...}`` lines."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"diagnosis file not found: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(DiagnosisEntry(d["key"], d["criteria"]))
    return out


def read_abbreviations(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"abbreviation table not found: {path}")
    return dict(json.loads(path.read_text(encoding="utf-8")))


def expand_abbreviation(code: str, table: Mapping[str, str]) -> Expansion:
    if code in table:
        return Expansion(table[code], True)
    return Expansion(code, False)


def retrieve_criteria(
    db: DiagnosisDB,
    phrase: str,
    embedder: Embedder,
    config: RetrievalConfig | None = None,
) -> tuple[DiagnosisEntry, float] | None:
    """Best-matching entry if its cosine similarity clears the threshold.

    Ties go to the lowest entry index.
    """
    if not len(db):
        raise EmptyDatabase("retrieval from an empty database")
    config = config or RetrievalConfig()
    sims = db.similarities(embedder(phrase))
    best = int(np.argmax(sims))
    if sims[best] > config.similarity_threshold:
        return db.entries[best], float(sims[best])
    return None


_SEX_WORDS = {"m": "male", "male": "male", "f": "female", "female": "female"}


def demographics_sentence(metadata: Mapping | None) -> str:
    metadata = metadata or {}
    age = metadata.get("age")
    sex = metadata.get("sex")
    if sex is not None:
        sex = _SEX_WORDS.get(str(sex).strip().lower(), str(sex).strip())
    if age is not None and sex:
        return f"The patient is a {int(age)}-year-old {sex}."
    if age is not None:
        return f"The patient is {int(age)} years old."
    if sex:
        return f"The patient is {sex}."
    return ""


def compose_report(
    metadata: Mapping | None,
    scp_codes: Sequence[str],
    table: Mapping[str, str],
    db: DiagnosisDB,
    embedder: Embedder,
    config: RetrievalConfig | None = None,
) -> str:
    """Demographics sentence, then one section per code in input order."""
    lines = []
    demo = demographics_sentence(metadata)
    if demo:
        lines.append(demo)
    if scp_codes:
        lines.append("Diagnoses and criteria:")
        for code in scp_codes:
            name = expand_abbreviation(code, table).phrase
            hit = retrieve_criteria(db, name, embedder, config)
            lines.append(f"- {name}: {hit[0].criteria}" if hit else f"- {name}.")
    return "\n".join(lines)


def raw_report(metadata: Mapping | None, scp_codes: Sequence[str]) -> str:
    """Report without retrieval: demographics plus the bare codes."""
    demo = demographics_sentence(metadata)
    codes = ", ".join(scp_codes)
    return " ".join(s for s in (demo, f"Diagnoses: {codes}." if codes else "") if s)


def build_reports(
    manifest,
    table: Mapping[str, str],
    db: DiagnosisDB,
    embedder: Embedder,
    config: RetrievalConfig | None = None,
) -> list[dict]:
    return [
        {"record_id": e.record_id,
         "report": compose_report(e.metadata, e.report_codes, table, db, embedder, config)}
        for e in manifest
    ]


def write_reports(reports: Iterable[Mapping], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps({"record_id": r["record_id"], "report": r["report"]}) + "\n")
    return path


def read_reports(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"report file not found: {path}")
    out = {}
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["record_id"]] = d["report"]
    return out


def bundled_diagnoses() -> list[DiagnosisEntry]:
    return read_diagnoses(Path(__file__).with_name("data") / "diagnoses.jsonl")

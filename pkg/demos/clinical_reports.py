"""Turn diagnosis codes into report text by expanding abbreviations and retrieving criteria."""

from robustecg.cfr import (
    DEFAULT_ABBREVIATIONS,
    HashingEmbedder,
    RetrievalConfig,
    build_diagnosis_db,
    bundled_diagnoses,
    compose_report,
    raw_report,
    retrieve_criteria,
)

embedder = HashingEmbedder()
db = build_diagnosis_db(bundled_diagnoses(), embedder)
print(len(db), "diagnosis entries, embedder", db.embedder_id)

for phrase in ("Atrial Flutter", "atrial flutter waves", "Premature Atrial Complex", "broken toaster"):
    hit = retrieve_criteria(db, phrase, embedder)
    print(f"{phrase!r:30} ->", f"{hit[0].key} ({hit[1]:.3f})" if hit else "no match above threshold")

meta = {"age": 67, "sex": "F"}
codes = ["AFLT", "PAC", "XYZ"]
print()
print(raw_report(meta, codes))
print()
print(compose_report(meta, codes, DEFAULT_ABBREVIATIONS, db, embedder))

# a threshold above 1 turns retrieval off, leaving names only
print()
print(compose_report(meta, codes, DEFAULT_ABBREVIATIONS, db, embedder, RetrievalConfig(1.1)))

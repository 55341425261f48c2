"""
Scoring: error rates, opinion scores, code-space mixing
=======================================================

Everything here is arithmetic on stand-in data, so it runs instantly.

    python3 demos/04_evaluation.py
"""
import numpy as np

from prosody_vc.evaluation import (Rating, edit_distance, error_rates, format_table, mixing_score, mos_table,
                                   project_codes)

al = edit_distance("kitten", "sitting")
print(f"kitten -> sitting: {al.distance} edits (S={al.substitutions} I={al.insertions} D={al.deletions})")

refs = ["the red cat sat on the mat", "a warm day"]
hyps = ["the red cat sat on a mat", "a worm day"]
print(error_rates(refs, hyps).format())

# Made-up listening test: two systems, two target speakers, both rating axes.
rng = np.random.default_rng(0)
ratings = []
for target in ("TEF1", "TEM1"):
    for system, bias in (("w/o pc", 0.0), ("w pc", 0.4)):
        for axis in ("naturalness", "similarity"):
            for listener in range(40):
                score = int(np.clip(np.round(rng.normal(3.2 + bias, 0.9)), 1, 5))
                ratings.append(Rating(f"L{listener}", "u0", system, target, axis, score))
print(format_table(mos_table(ratings)))

# Codes from four speakers: separated clusters versus one shared cloud.
labels = np.repeat(np.arange(4), 30)
centers = rng.normal(size=(4, 128)) * 3
separated = centers[labels] + rng.normal(size=(120, 128)) * 0.3
shared = rng.normal(size=(120, 128))
print(f"mixing score, separated: {mixing_score(separated, labels):.3f}")
print(f"mixing score, shared:    {mixing_score(shared, labels):.3f}")
print("first projected points:", project_codes(separated)[:2].round(2))

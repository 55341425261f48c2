"""Error rates, opinion-score summaries and prosody-code projections."""
from __future__ import annotations

import csv
import math
import re
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

# ---------------------------------------------------------------------------
# edit distance


@dataclass(frozen=True)
class Alignment:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> Alignment:
    """Unit-cost Levenshtein distance with an S/I/D breakdown of one optimal alignment.

    Ties in the backtrace prefer match/substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j, s, ins, dels = n, m, 0, 0, 0
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return Alignment(int(d[n, m]), int(s), ins, dels)


_PUNCT = re.compile(r"[^\w\s']")


def normalize_for_scoring(text: str) -> str:
    """Lowercase, drop punctuation other than apostrophes, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


@dataclass(frozen=True)
class ErrorRateReport:
    cer: float
    wer: float
    char_errors: Alignment
    word_errors: Alignment
    ref_chars: int
    ref_words: int

    def format(self) -> str:
        w = self.word_errors
        return (f"CER {100 * self.cer:.3f}%  WER {100 * self.wer:.3f}%  "
                f"(words: S={w.substitutions} I={w.insertions} D={w.deletions} N={self.ref_words})")


def error_rate(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("error rate is undefined for an empty reference")
    return edit_distance(ref, hyp).distance / len(ref)


def error_rates(refs: Sequence[str], hyps: Sequence[str]) -> ErrorRateReport:
    """Corpus CER and WER: total edits over total reference length."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    totals = {"c": [0, 0, 0, 0], "w": [0, 0, 0, 0]}
    n_chars = n_words = 0
    for r, h in zip(refs, hyps):
        r, h = normalize_for_scoring(r), normalize_for_scoring(h)
        for key, a, b in (("c", list(r), list(h)), ("w", r.split(), h.split())):
            al = edit_distance(a, b)
            for k, v in enumerate((al.distance, al.substitutions, al.insertions, al.deletions)):
                totals[key][k] += v
        n_chars += len(r)
        n_words += len(r.split())
    if n_chars == 0 or n_words == 0:
        raise ValueError("error rate is undefined for an empty reference")
    ca, wa = Alignment(*totals["c"]), Alignment(*totals["w"])
    return ErrorRateReport(ca.distance / n_chars, wa.distance / n_words, ca, wa, n_chars, n_words)


def read_transcript_table(path: str | Path) -> dict[str, str]:
    """``<id><TAB><text>`` lines to a dict."""
    table = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            uid, _, text = line.partition("\t")
            table[uid.strip()] = text.strip()
    return table


# ---------------------------------------------------------------------------
# opinion scores

AXES = ("naturalness", "similarity")
RATING_FIELDS = ("listener_id", "utterance_id", "system_id", "target_speaker", "axis", "score")


@dataclass(frozen=True)
class Rating:
    listener_id: str
    utterance_id: str
    system_id: str
    target_speaker: str
    axis: str
    score: float

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown rating axis {self.axis!r}")
        if not 1.0 <= self.score <= 5.0:
            raise ValueError(f"score {self.score} outside [1, 5]")


@dataclass(frozen=True)
class MOSCell:
    key: tuple
    mean: float
    half_width: float | None  # None when n == 1
    n: int

    def format(self) -> str:
        hw = "n/a" if self.half_width is None else f"{self.half_width:.3f}"
        return f"{self.mean:.3f}±{hw}"


def mean_ci(scores: Sequence[float], z: float = 1.96) -> tuple[float, float | None]:
    """Mean and normal-approximation half-width ``z * s / sqrt(n)`` (sample stdev)."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot summarise an empty cell")
    if x.size == 1:
        return float(x[0]), None
    return float(x.mean()), float(z * x.std(ddof=1) / math.sqrt(x.size))


def mos_report(ratings: Sequence[Rating], group_by: Sequence[str] = ("system_id", "target_speaker", "axis")) -> list[MOSCell]:
    """One cell per distinct value of the ``group_by`` fields, in first-seen order."""
    cells: dict[tuple, list[float]] = defaultdict(list)
    for r in ratings:
        cells[tuple(getattr(r, g) for g in group_by)].append(r.score)
    out = []
    for key, scores in cells.items():
        mean, hw = mean_ci(scores)
        out.append(MOSCell(key, mean, hw, len(scores)))
    return out


def mos_table(ratings: Sequence[Rating], by_target: bool = True, average: bool = True) -> list[list[str]]:
    """Rows of ``[target, system, naturalness, similarity]``; an ``Average`` block pools all targets."""
    fields = ("target_speaker", "system_id", "axis") if by_target else ("system_id", "axis")
    cells = {c.key: c for c in mos_report(ratings, fields)}
    systems = list(dict.fromkeys(r.system_id for r in ratings))
    targets = list(dict.fromkeys(r.target_speaker for r in ratings)) if by_target else []
    rows = []
    for t in targets:
        for s in systems:
            vals = [cells.get((t, s, a)) for a in AXES]
            if any(vals):
                rows.append([t, s] + [v.format() if v else "-" for v in vals])
    if average or not by_target:
        pooled = {c.key: c for c in mos_report(ratings, ("system_id", "axis"))}
        for s in systems:
            vals = [pooled.get((s, a)) for a in AXES]
            rows.append(["Average" if by_target else "", s] + [v.format() if v else "-" for v in vals])
    return rows


def format_table(rows: list[list[str]], header=("Target", "System", "Naturalness", "Similarity")) -> str:
    table = [list(header)] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table)


def read_ratings(path: str | Path) -> list[Rating]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RATING_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: ratings file lacks columns {sorted(missing)}")
        return [Rating(r["listener_id"], r["utterance_id"], r["system_id"], r["target_speaker"], r["axis"],
                       float(r["score"])) for r in reader]


def write_rows_csv(path: str | Path, rows: list[list[str]], header) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# prosody-code space

def project_codes(codes: np.ndarray, method: str = "pca", seed: int = 0) -> np.ndarray:
    """Map ``(N, D)`` codes to ``(N, 2)``.

    ``pca`` is deterministic: each principal direction is signed so that its
    largest-magnitude loading is positive. ``tsne`` uses scikit-learn with
    the given seed.
    """
    x = np.asarray(codes, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need at least 3 codes to project")
    if method == "tsne":
        from sklearn.manifold import TSNE
        perplexity = min(30.0, (x.shape[0] - 1) / 3)
        return TSNE(2, perplexity=perplexity, random_state=seed, init="pca").fit_transform(x)
    if method != "pca":
        raise ValueError(f"unknown projection {method!r}")
    centered = x - x.mean(axis=0)
    if np.allclose(centered, 0.0):
        warnings.warn("all codes are identical; projecting every point to the origin", RuntimeWarning)
        return np.zeros((x.shape[0], 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    return centered @ comps.T


def mixing_score(codes: np.ndarray, labels: Sequence, k: int = 5) -> float:
    """How evenly speakers intermingle in code space, in [0, 1].

    For each code, take the fraction of its ``k`` nearest neighbours that
    share its label. The excess of the average fraction over what random
    labelling would give is normalized by its maximum; the score is one
    minus that, clipped to [0, 1]. Fully mixed gives 1, fully separated 0.
    """
    x = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("mixing score needs at least 2 speakers")
    if counts.min() < 5 or len(x) <= k:
        raise ValueError("mixing score needs at least 5 codes per speaker")
    d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    nn_idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    same = (labels[nn_idx] == labels[:, None]).mean()
    n = len(x)
    chance = float((counts * (counts - 1)).sum() / (n * (n - 1)))
    excess = (same - chance) / (1.0 - chance)
    return float(np.clip(1.0 - excess, 0.0, 1.0))


def write_codes_csv(path: str | Path, utt_ids: Sequence[str], speakers: Sequence[str], codes: np.ndarray) -> None:
    codes = np.asarray(codes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "speaker_id"] + [f"c{i}" for i in range(codes.shape[1])])
        for u, s, row in zip(utt_ids, speakers, codes):
            w.writerow([u, s] + [repr(float(v)) for v in row])


def read_codes_csv(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    ids, spk, rows = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["utterance_id", "speaker_id"]:
            raise ValueError(f"{path}: not a code export")
        for r in reader:
            ids.append(r[0])
            spk.append(r[1])
            rows.append([float(v) for v in r[2:]])
    return ids, spk, np.asarray(rows)

"""Regenerate the bundled training corpus (data/corpus.txt).

The corpus is synthetic English-like prose built from templated sentences
with a fixed seed, so the repository stays self-contained and every run
sees identical bytes. The heavy phrase reuse is intentional: a byte-level
model can learn it in minutes, which is what the training and decoding
experiments need.
"""

import argparse
from pathlib import Path

import numpy as np

SUBJECTS = [
    "the engineer", "a research assistant", "the night operator", "our pilot",
    "the cartographer", "a junior analyst", "the station keeper", "the archivist",
    "the field botanist", "a visiting scholar", "the harbor master", "the machinist",
    "the old surveyor", "a quiet librarian", "the radio operator", "the glassblower",
]

VERBS = [
    "measured", "recorded", "repaired", "inspected", "calibrated", "sketched",
    "catalogued", "transcribed", "assembled", "polished", "tested", "labelled",
    "compared", "collected", "documented", "reviewed",
]

OBJECTS = [
    "the copper instrument", "a row of sample jars", "the tide tables",
    "the signal lamp", "a stack of field notes", "the pressure gauge",
    "the star charts", "a broken compass", "the seed catalogue",
    "the telegraph relay", "a box of lenses", "the survey markers",
    "the rainfall ledger", "a set of tuning forks", "the engine manifold",
    "the herbarium sheets",
]

PLACES = [
    "in the upper workshop", "near the east jetty", "at the observatory",
    "behind the boiler room", "on the survey deck", "inside the archive vault",
    "along the canal path", "under the clock tower", "at the weather station",
    "beside the printing press",
]

TIMES = [
    "before sunrise", "after the second shift", "late in the evening",
    "during the long winter", "at the turn of the season", "on market day",
    "while the fog held", "just after the rain",
]

CONNECTIVES = [
    "Afterwards", "Meanwhile", "Later that week", "By custom", "As always",
    "Once finished", "Without delay", "In the same hour",
]

REMARKS = [
    "every reading was entered twice to guard against error",
    "the results matched the previous season almost exactly",
    "nothing unusual appeared in the margins of the ledger",
    "the apprentice carried the report to the main office",
    "a short note was pinned to the corkboard for the next crew",
    "the numbers were steady and the work went quickly",
    "two of the entries had to be crossed out and rewritten",
    "the final column was left blank until the courier returned",
]


def make_sentence(rng):
    s = rng.integers(0, 4)
    if s == 0:
        return "{} {} {} {}.".format(
            rng.choice(SUBJECTS), rng.choice(VERBS),
            rng.choice(OBJECTS), rng.choice(PLACES)).capitalize()
    if s == 1:
        return "{} {} {} {}.".format(
            rng.choice(TIMES), rng.choice(SUBJECTS), rng.choice(VERBS),
            rng.choice(OBJECTS)).capitalize()
    if s == 2:
        return "{}, {} {} {} {}.".format(
            rng.choice(CONNECTIVES), rng.choice(SUBJECTS), rng.choice(VERBS),
            rng.choice(OBJECTS), rng.choice(TIMES))
    return "{}, and {}.".format(
        "{} {} {}".format(
            rng.choice(SUBJECTS), rng.choice(VERBS),
            rng.choice(OBJECTS)).capitalize(),
        rng.choice(REMARKS))


def make_corpus(target_bytes, seed):
    rng = np.random.default_rng(seed)
    docs = []
    total = 0
    while total < target_bytes:
        n_sent = int(rng.integers(4, 12))
        doc = " ".join(make_sentence(rng) for _ in range(n_sent))
        docs.append(doc)
        total += len(doc) + 1
    return "\n".join(docs) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target-bytes", type=int, default=1_200_000)
    ap.add_argument("--seed", type=int, default=20240401)
    ap.add_argument("--out", type=Path,
                    default=Path(__file__).resolve().parent.parent / "data" / "corpus.txt")
    args = ap.parse_args()
    text = make_corpus(args.target_bytes, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text, encoding="utf-8")
    print(f"wrote {args.out} ({len(text.encode('utf-8'))} bytes)")


if __name__ == "__main__":
    main()

"""Regenerates the committed test fixtures. Deterministic; run from this directory.

Token counts use an independent implementation of the reference tokenizer:
runs of alphanumerics, or single non-space non-alphanumeric characters.
"""

import json
import random
import re
from pathlib import Path

HERE = Path(__file__).resolve().parent
TOKEN = re.compile(r"[^\W_]+|[^\w\s]|_")


def count_tokens(text):
    return len(TOKEN.findall(text))


WORDS = """
river quarry lantern harbor meadow ledger copper signal orchard furnace beacon
cellar rampart thicket glacier canyon pavilion lattice compass garrison bellows
anchor cistern parapet spindle turbine citadel vessel monsoon prairie tundra
basalt granite willow cedar juniper heron falcon otter badger lynx marten
weaver tanner mason cooper glazier cartwright chandler fletcher thatcher miller
archive ledger charter treaty census tariff levy almanac register inventory
season harvest drought frost thaw tide current breeze squall ember cinder
northern southern eastern western upper lower inner outer distant nearby
old new early late quiet busy narrow broad steep shallow deep hollow
built repaired measured recorded crossed guarded traded mapped stored carried
visited surveyed restored painted mined planted drained flooded sealed opened
slowly rarely often briefly carefully openly mostly nearly partly seldom
""".split()

RNG = random.Random(20240917)


def filler_sentence(rng, lo=8, hi=16):
    n = rng.randint(lo, hi)
    words = [rng.choice(WORDS) for _ in range(n)]
    words[0] = words[0].capitalize()
    return " ".join(words) + "."


def filler(rng, tokens):
    out, total = [], 0
    while total < tokens:
        s = filler_sentence(rng)
        out.append(s)
        total += count_tokens(s)
    return out


def exact_document(rng, target):
    """Sentences whose reference-token total is exactly `target`."""
    out, total = [], 0
    while True:
        remaining = target - total
        if remaining <= 17:
            # remaining - 1 words plus the period
            words = [rng.choice(WORDS) for _ in range(remaining - 1)]
            words[0] = words[0].capitalize()
            out.append(" ".join(words) + ".")
            break
        s = filler_sentence(rng)
        if count_tokens(s) > remaining - 3:
            continue
        out.append(s)
        total += count_tokens(s)
    text = " ".join(out)
    assert count_tokens(text) == target, count_tokens(text)
    return text


def write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def jsonl(path, rows):
    write(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def doc_1280():
    text = exact_document(random.Random(1280), 1280)
    write(HERE / "doc_1280.txt", text)


SAMPLE = [
    ("qasper-s01", "Which corpus do the authors evaluate on?", "The authors evaluate on the Harlow Corpus of court transcripts.", ["Harlow Corpus"]),
    ("qasper-s02", "How many annotators labeled the test split?", "Exactly seven annotators labeled the test split over two weeks.", ["seven", "7"]),
    ("qasper-s03", "What baseline does the proposed tagger outperform?", "The proposed tagger outperforms the Brennick baseline by four points.", ["Brennick baseline"]),
    ("qasper-s04", "Which language is the dataset written in?", "The dataset is written in Estonian and covers regional news.", ["Estonian"]),
    ("qasper-s05", "What learning rate is used for fine-tuning?", "Fine-tuning uses a learning rate of 0.0003 with linear decay.", ["0.0003"]),
]


def longbench_sample():
    rows = []
    for i, (rid, q, fact, answers) in enumerate(SAMPLE):
        rng = random.Random(500 + i)
        sents = filler(rng, 300 + 150 * i)
        pos = rng.randint(1, len(sents) - 1)
        sents.insert(pos, fact)
        rows.append({"_id": rid, "input": q, "context": " ".join(sents), "answers": answers, "dataset": "qasper-synthetic"})
    jsonl(HERE / "longbench_sample.jsonl", rows)
    write(HERE / "longbench_sample.ids", "".join(r["_id"] + "\n" for r in rows))
    return rows


SYLLABLES = "vel mor an tri stan dor kel bri sil ven oth ram zen quil fa rov ist lum par gan".split()
ATTRIBUTES = [
    ("archive key", lambda r: str(r.randint(1000, 9999))),
    ("founding year", lambda r: str(r.randint(1200, 1990))),
    ("head keeper", lambda r: (r.choice(SYLLABLES) + r.choice(SYLLABLES)).capitalize()),
    ("signal color", lambda r: r.choice(["amber", "violet", "teal", "crimson", "ochre", "indigo"])),
    ("tower height", lambda r: f"{r.randint(20, 400)} meters"),
]


def entity(rng, used):
    while True:
        name = (rng.choice(SYLLABLES) + rng.choice(SYLLABLES) + rng.choice(SYLLABLES)).capitalize()
        if name not in used:
            used.add(name)
            return name + " " + rng.choice(["Station", "Abbey", "Works", "Lighthouse", "Depot", "Mill"])


def planted():
    rng = random.Random(4242)
    used = set()
    docs, queries = [], []
    for d in range(50):
        sents = filler(rng, rng.randint(380, 700))
        # distractor: same attribute vocabulary, different entity
        attr, gen = ATTRIBUTES[d % len(ATTRIBUTES)]
        distractor = f"The {attr} of {entity(rng, used)} is {gen(rng)}."
        sents.insert(rng.randint(0, len(sents)), distractor)
        record = {"_id": f"planted-{d:02d}", "input": "", "context": None, "answers": []}
        if d % 5 != 4 and len(queries) < 20:
            attr, gen = ATTRIBUTES[len(queries) % len(ATTRIBUTES)]
            name = entity(rng, used)
            value = gen(rng)
            fact = f"The {attr} of {name} is {value}."
            sents.insert(rng.randint(1, len(sents) - 1), fact)
            q = f"What is the {attr} of {name}?"
            record["input"] = q
            record["answers"] = [value]
            queries.append({"doc_id": record["_id"], "query": q, "fact": fact, "answer": value})
        record["context"] = " ".join(sents)
        docs.append(record)
    assert len(queries) == 20
    jsonl(HERE / "planted" / "corpus.jsonl", docs)
    jsonl(HERE / "planted" / "queries.jsonl", queries)


def marker(v, k, idx):
    return {"v": v, "k": [k], "paragraph_indices": idx}


def coverage():
    full = [marker(f"Segment {i} of the fixture document describes its harbor records.", f"What do the harbor records of segment {i} describe?", [i]) for i in range(10)]
    write(HERE / "coverage" / "full_first_attempt.json", json.dumps({"marker": full}, indent=1) + "\n")

    def attempt(covered):
        ms = []
        for i in covered:
            ms.append(marker(f"Notes on ledger entry {i}.", f"What does ledger entry {i} record?", [i]))
        return "Here are the markers:\n" + json.dumps({"marker": ms}) + "\n"

    missing3 = {5, 17, 33, 50, 71, 88, 99}
    write(HERE / "coverage" / "attempt1.txt", attempt(range(90)))
    write(HERE / "coverage" / "attempt2.txt", attempt(range(92)))
    write(HERE / "coverage" / "attempt3.txt", attempt([i for i in range(100) if i not in missing3]))


if __name__ == "__main__":
    doc_1280()
    longbench_sample()
    planted()
    coverage()

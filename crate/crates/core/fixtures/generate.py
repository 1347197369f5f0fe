#!/usr/bin/env python3
"""Regenerates the bundled fixture corpus.

Vocabulary is made of invented words so the token-overlap mock model sees
exactly the overlaps each case was built with. Run from any directory:

    python3 crates/core/fixtures/generate.py
"""
import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent
rng = random.Random(20240611)

POOL = [
    ("good morning", "bonjour"),
    ("thank you very much", "merci beaucoup"),
    ("the black cat", "le chat noir"),
    ("where is the station", "où est la gare"),
    ("i like coffee", "j'aime le café"),
    ("see you tomorrow", "à demain"),
    ("the house is big", "la maison est grande"),
    ("it is raining today", "il pleut aujourd'hui"),
    ("my brother reads a book", "mon frère lit un livre"),
    ("open the window please", "ouvre la fenêtre s'il te plaît"),
    ("the sea is calm", "la mer est calme"),
    ("we eat bread", "nous mangeons du pain"),
    ("she sings well", "elle chante bien"),
    ("the train leaves at noon", "le train part à midi"),
    ("a red apple", "une pomme rouge"),
    ("the children play outside", "les enfants jouent dehors"),
    ("how much does it cost", "combien ça coûte"),
    ("the door is closed", "la porte est fermée"),
    ("i am tired", "je suis fatigué"),
    ("the sun shines", "le soleil brille"),
    ("he drinks water", "il boit de l'eau"),
    ("the garden has flowers", "le jardin a des fleurs"),
    ("we travel by boat", "nous voyageons en bateau"),
    ("the bird flies", "l'oiseau vole"),
    ("my friend is here", "mon ami est ici"),
]
POOL_TOKENS = {t for en, _ in POOL for t in en.split()}

CONSONANTS = "bcdfgklmnprstvz"
VOWELS = "aeiou"
used = set(POOL_TOKENS)


def word():
    while True:
        w = "".join(rng.choice(CONSONANTS) + rng.choice(VOWELS) for _ in range(rng.choice([2, 3])))
        w += rng.choice(CONSONANTS)
        if w not in used:
            used.add(w)
            return w


def words(n):
    return [word() for _ in range(n)]


FILLER = words(400)


def filler(n):
    return rng.sample(FILLER, n)


def sentence(tokens, extra=2):
    toks = list(tokens) + filler(extra)
    rng.shuffle(toks)
    return " ".join(toks)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")


def write_task(d, name, system, fields, labels):
    d.mkdir(exist_ok=True)
    body = [
        f'name = "{name}"',
        f'system_prompt = "{system}"',
        "fields = [" + ", ".join(f'"{f}"' for f in fields) + "]",
        'answer_field = "Answer"',
        "labels = [" + ", ".join(f'"{l}"' for l in labels) + "]",
        'ood_label_token = "&"',
    ]
    (d / "task.toml").write_text("\n".join(body) + "\n", encoding="utf-8")


def topic():
    """Four classes; labels 1-3 pass rarely and kill few groups, label 4
    passes always and kills many. Demo i has class i % 4, so the last demo
    is the label-4 anchor used for ties."""
    d = ROOT / "topic"
    labels = ["1", "2", "3", "4"]
    write_task(d, "topic", "Assign each news article to one of the topics 1, 2, 3 or 4.", ["Title", "Description"], labels)
    demos = []
    for pos in range(20):
        demos.append({"title": words(2), "desc": words(6), "label": labels[pos % 4]})
    write_jsonl(d / "demos.jsonl", [
        {"inputs": {"Title": " ".join(x["title"]), "Description": " ".join(x["desc"])}, "label": x["label"]} for x in demos
    ])
    by_class = {c: [p for p in range(20) if p % 4 == c] for c in range(4)}

    def head(p, n):
        return rng.sample(demos[p]["desc"][:3], n)

    def tail(p, n):
        return rng.sample(demos[p]["desc"][3:], n)

    def other(c):
        return rng.choice([p for p in range(20) if p % 4 != c])

    def any_token(p):
        return [rng.choice(demos[p]["desc"])]

    def case(tokens, c):
        return {"inputs": {"Title": " ".join(filler(2)), "Description": sentence(tokens)}, "label": labels[c]}

    per_class = 320
    rows = []
    for c in range(3):
        cases = []
        for j in by_class[c]:
            mate = rng.choice([p for p in by_class[c] if p != j])
            # kills the label mutants of j only
            cases += [case(head(j, 2) + any_token(mate), c) for _ in range(10)]
            # ... and the foreign-demonstration mutant of j
            cases += [case(head(j, 2) + any_token(other(c)), c) for _ in range(6)]
            # ... and the blurred-input mutant of j
            cases += [case(tail(j, 2) + any_token(other(c)), c) for _ in range(4)]
        while len(cases) < per_class:
            cases.append(case(head(other(c), 2), c))
        rows += cases
    anchor, rare = 19, by_class[3][:4]
    cases = []
    for j in rare:
        cases += [case(tail(j, 2) + any_token(other(3)), 3) for _ in range(14)]
    # ties with an earlier demonstration of another class: order-sensitive
    cases += [case(tail(anchor, 1) + any_token(other(3)), 3) for _ in range(28)]
    while len(cases) < per_class:
        cases.append(case(tail(anchor, 2) + any_token(other(3)), 3))
    rows += cases
    rng.shuffle(rows)
    write_jsonl(d / "dataset.jsonl", rows)


def binary(name, system, fields, labels, sizes):
    """Two balanced classes; most cases overlap one same-class demo."""
    d = ROOT / name
    write_task(d, name, system, fields, labels)
    demos = [{"inputs": {f: words(n) for f, n in zip(fields, sizes)}, "label": labels[p % 2]} for p in range(20)]
    write_jsonl(d / "demos.jsonl", [
        {"inputs": {f: " ".join(v) for f, v in x["inputs"].items()}, "label": x["label"]} for x in demos
    ])
    rows = []
    for i in range(80):
        c = i % 2
        same = i % 10 < 7
        p = rng.choice([q for q in range(20) if (q % 2 == c) == same])
        inputs = {}
        for f, n in zip(fields, sizes):
            inputs[f] = sentence(rng.sample(demos[p]["inputs"][f], 1), extra=2)
        rows.append({"inputs": inputs, "label": labels[c]})
    rng.shuffle(rows)
    write_jsonl(d / "dataset.jsonl", rows)


write_jsonl(ROOT / "ood_pool.jsonl", [{"input": en, "output": fr} for en, fr in POOL])
topic()
binary("sentiment", "Each film review below is labelled with an arrow, ← or →.", ["Review"], ["←", "→"], [8])
binary("entailment", "Decide whether each hypothesis follows from its premise. Answer ↑ or ↓.", ["Premise", "Hypothesis"], ["↑", "↓"], [8, 4])
binary("paraphrase", "Say whether the two sentences mean the same thing, using ← or →.", ["Sentence 1", "Sentence 2"], ["←", "→"], [6, 6])

"""Regenerates the bundled headline fixtures. Output is deterministic."""
import json
import random

SUBJECTS = ["the minister", "local police", "the central bank", "a rescue team", "the council",
            "farmers", "the new coach", "investors", "doctors", "the company"]
VERBS = [("announced", "announces"), ("rejected", "rejects"), ("approved", "approves"),
         ("criticized", "criticizes"), ("delayed", "delays"), ("welcomed", "welcomes")]
OBJECTS = ["a tax plan", "the peace deal", "new rules", "the budget", "a merger",
           "the strike", "higher rates", "a report"]
PLACES = ["in london", "in paris", "on monday", "on friday", "after talks", "in the capital"]


def pair(rng):
    s, (past, present), o, p = (rng.choice(SUBJECTS), rng.choice(VERBS),
                                rng.choice(OBJECTS), rng.choice(PLACES))
    source = f"{s} {past} {o} {p} , officials said ."
    target = f"{s.replace('the ', '')} {present} {o.replace('the ', '').replace('a ', '')}"
    return source, target


def write(path, pairs, prefix):
    with open(path, "w") as f:
        for i, (src, tgt) in enumerate(pairs):
            f.write(json.dumps({"id": f"{prefix}-{i:03d}", "source": src, "target": tgt}) + "\n")


rng = random.Random(7)
corpus = [pair(rng) for _ in range(195)]
corpus += [corpus[3], corpus[10], corpus[42], corpus[77], corpus[150]]
rng.shuffle(corpus)
write("headlines_200.jsonl", corpus, "h")
write("headlines_test.jsonl", [pair(rng) for _ in range(20)], "t")

overfit = [
    ("police arrest two men after bank robbery in london", "police arrest two men"),
    ("the central bank raised interest rates on monday", "bank raises rates"),
    ("heavy rain caused floods across the northern region", "floods hit north"),
    ("the president will visit china next week for talks", "president to visit china"),
    ("scientists discovered a new species of frog in brazil", "new frog species found"),
    ("the national team won the final against spain", "team beats spain"),
    ("oil prices fell sharply after the opec meeting", "oil prices fall"),
    ("a strong earthquake struck southern japan early today", "earthquake hits japan"),
    ("the company reported record profits for the quarter", "record profits reported"),
    ("thousands of workers joined the strike in paris", "workers strike in paris"),
]
write("overfit_10.jsonl", overfit, "o")

#!/usr/bin/env python3
"""Generate the committed desk corpus and benchmark prompts.

Produces ~1 MB of deterministic synthetic English-like "field journal" text
(pure ASCII) plus 20 held-out 64-byte prompts drawn from the corpus tail.
The tail region (last 64 KiB) is never used for training, matching the
holdout convention in the corpus loader.

Usage: python3 tools/gen_corpus.py [output_dir]
"""

import json
import random
import sys
from pathlib import Path

SEED = 20250810
TARGET_BYTES = 1_000_000
HOLDOUT_BYTES = 65_536
PROMPT_COUNT = 20
PROMPT_LEN = 64

CREATURES = [
    "copper finch", "marsh heron", "grey lynx", "river otter", "dune fox",
    "pale owl", "ridge hare", "moss beetle", "glass minnow", "cedar wren",
    "bank swallow", "stone crab", "meadow vole", "night moth", "reed frog",
    "harbor seal", "shore plover", "timber wasp", "vale deer", "cliff swift",
]
PLACES = [
    "the northern mill road", "the old harbor wall", "the cedar grove",
    "the eastern marsh", "the gravel spit", "the upper meadow",
    "the dry creek bed", "the lighthouse point", "the birch hollow",
    "the southern quarry", "the tide pools", "the fallow field",
]
VERBS = [
    "nests", "feeds", "shelters", "hunts", "rests", "sings", "burrows",
    "wades", "forages", "patrols", "winters", "gathers",
]
TIMES = [
    "at first light", "after the rain", "before dusk", "in late autumn",
    "through the cold months", "during the spring flood", "at low tide",
    "under a full moon", "in the dry season", "by early morning",
]
FOODS = [
    "seeds and small snails", "fallen berries", "young shoots",
    "insects along the bank", "minnows in the shallows", "acorns and grubs",
    "pond weed", "windfall apples", "dried grasses", "beetle larvae",
]
WEATHER = [
    "The wind came up from the south", "A thin fog settled over the water",
    "Frost held until midday", "The rain did not stop until evening",
    "Clouds moved fast over the ridge", "The air was still and warm",
    "A storm passed north of us", "The morning was clear and cold",
]
REMARKS = [
    "We counted {n} of them in a single hour.",
    "Tracks in the mud suggested {n} more nearby.",
    "The count fell to {n} by the end of the week.",
    "Last year we recorded {n} at the same spot.",
    "Only {n} returned after the flood.",
]
OPENERS = [
    "Day {day}.", "Entry {day}.", "Notes for day {day}.",
]

SENTENCES = [
    "The {creature} {verb} near {place} {time}.",
    "The {creature} feeds on {food} {time}.",
    "A pair of {creature}s settled along {place}.",
    "We watched the {creature} from the path above {place}.",
    "The {creature} kept to {place} while the water rose.",
    "Toward {place}, the {creature} {verb} in plain view.",
    "No sign of the {creature} today, though it usually {verb} {time}.",
]


def plural_fix(text: str) -> str:
    return text.replace("foxs", "foxes").replace("wasps", "wasps").replace(
        "lynxs", "lynxes").replace("crabs", "crabs")


def paragraph(rng: random.Random, day: int) -> str:
    parts = [rng.choice(OPENERS).format(day=day)]
    parts.append(rng.choice(WEATHER) + ".")
    for _ in range(rng.randint(3, 6)):
        template = rng.choice(SENTENCES)
        sentence = template.format(
            creature=rng.choice(CREATURES),
            verb=rng.choice(VERBS),
            place=rng.choice(PLACES),
            time=rng.choice(TIMES),
            food=rng.choice(FOODS),
        )
        parts.append(plural_fix(sentence))
        if rng.random() < 0.25:
            parts.append(rng.choice(REMARKS).format(n=rng.randint(2, 60)))
    return " ".join(parts)


def main() -> None:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("corpus")
    rng = random.Random(SEED)

    chunks = []
    total = 0
    day = 1
    while total < TARGET_BYTES:
        p = paragraph(rng, day)
        chunks.append(p)
        total += len(p) + 2
        day += 1
    text = "\n\n".join(chunks) + "\n"
    data = text.encode("ascii")

    corpus_dir = out_dir / "desk"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    (corpus_dir / "corpus.txt").write_bytes(data)

    # prompts: evenly spaced excerpts of the held-out tail, mirroring the
    # loader's holdout convention
    holdout = min(HOLDOUT_BYTES, len(data) // 8)
    tail = data[len(data) - holdout:]
    stride = (len(tail) - PROMPT_LEN) // PROMPT_COUNT
    prompts = [
        tail[i * stride: i * stride + PROMPT_LEN].decode("ascii")
        for i in range(PROMPT_COUNT)
    ]
    (out_dir / "prompts.json").write_text(json.dumps(prompts, indent=2) + "\n")

    print(f"corpus: {len(data)} bytes, {day - 1} entries -> {corpus_dir / 'corpus.txt'}")
    print(f"prompts: {len(prompts)} x {PROMPT_LEN} bytes -> {out_dir / 'prompts.json'}")


if __name__ == "__main__":
    main()

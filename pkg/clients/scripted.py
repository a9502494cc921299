"""Built-in deterministic responders for the scripted chat endpoint.

A responder is a pure function of (prompt, call index). The "synthetic" one answers
every prompt the pipelines send for the synthetic relay corpus and the scorer
datasets, so all pipelines run offline.
"""

import hashlib
import re

from clients.chat import Responder
from memory_handlers.storage import REFLECTION_MARKER
from memory_handlers.utilization import MERGE_MARKER
from pydantic_models.metrics import EMOTIONS
from utils.errors import ContractError
from utils.text import tokenize, word_count

_RELAY = re.compile(r"Station (\w+) relays to station (\w+)\.")
_TERMINAL = re.compile(r"Station (\w+) is the terminal station\.")
_START = re.compile(r"Starting from station (\w+)")
_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+")

EMOTION_WORDS = {
    "joy": "delighted",
    "acceptance": "trusting",
    "fear": "terrified",
    "surprise": "astonished",
    "sadness": "grieving",
    "disgust": "revolted",
    "anger": "furious",
    "anticipation": "eager",
}

_FILLER_NOUNS = ["parcel", "garden", "lecture", "harbor", "recipe", "ticket", "lantern"]

DETAIL_VOCAB = [
    "archive", "bridge", "census", "delta", "engine", "festival", "glacier", "harvest",
    "island", "journal", "kingdom", "library", "market", "novel", "orchard", "palace",
    "quarry", "river", "senate", "temple", "union", "valley", "winter", "yard",
    "zenith", "anchor", "border", "castle", "dynasty", "empire",
]

REFLECTION_HINTS = [
    "Keep every route sentence that says which station relays to which station.",
    "Keep every sentence that names a terminal station, word for word.",
]


NAME_HINT = "Keep every proper name mentioned in the observation."


def _reflect(prompt: str) -> str:
    """Route hints once any state in the group carries a route sentence."""
    states = re.findall(r"^State: (.*)$", prompt, flags=re.MULTILINE)
    memories = re.findall(r"^Memory: (.*)$", prompt, flags=re.MULTILINE)
    routed = [s for s in states if _RELAY.search(s) or _TERMINAL.search(s)]
    if not routed:
        return NAME_HINT
    kept = [m for m in memories if _RELAY.search(m) or _TERMINAL.search(m)]
    if len(kept) < len(routed):
        return "\n".join(REFLECTION_HINTS)
    # every route sentence already survived extraction
    return REFLECTION_HINTS[0]


def _sentences(text: str) -> list[str]:
    return [s for s in _SENTENCE_BREAK.split(text.strip()) if s]


def _last_field(prompt: str, field: str) -> str:
    values = re.findall(rf"^{field}: (.*)$", prompt, flags=re.MULTILINE)
    return values[-1] if values else ""


def _extract(prompt: str) -> str:
    lines = prompt.split("\n")[:-1]
    hint = ""
    if lines and lines[-1].startswith("Hint: "):
        hint = lines.pop()[len("Hint: ") :]
    observation = "\n".join(lines)[len("Observation: ") :]
    sentences = _sentences(observation)
    if not sentences:
        return observation
    if "route" in hint.lower():
        kept = [s for s in sentences if _RELAY.search(s) or _TERMINAL.search(s)]
        if kept:
            return " ".join(kept)
    return sentences[0]


def _merge(prompt: str) -> str:
    match = re.search(
        r"Existing Memory: (.*?)\nNew Memory: (.*?)\n" + MERGE_MARKER, prompt, re.S
    )
    if match is None:
        return ""
    merged = _sentences(match.group(1))
    for sentence in _sentences(match.group(2)):
        if sentence not in merged:
            merged.append(sentence)
    return " ".join(merged)


def route_decision(prompt: str) -> tuple[str, str]:
    """Follow relay facts in the memory context from the question's start station."""
    start = _START.search(prompt)
    if start is None:
        return "finish", "unknown"
    context = prompt.rsplit("memory as follows:\n", 1)[-1]
    relays = dict(_RELAY.findall(context))
    terminals = _TERMINAL.findall(context)
    current, seen = start.group(1), set()
    while current in relays and current not in seen:
        seen.add(current)
        current = relays[current]
    if terminals:
        return "finish", current if current in terminals else terminals[0]
    return "search", current


def _think(prompt: str) -> str:
    kind, station = route_decision(prompt)
    if kind == "finish":
        return (
            f"The memory names {station} as the end of the line, "
            "so the answer is ready."
        )
    return (
        "The memory does not reach the end of the line yet, "
        f"so looking up {station} comes next."
    )


def _act(prompt: str) -> str:
    kind, station = route_decision(prompt)
    return f"Finish[{station}]" if kind == "finish" else f"Search[{station}]"


def _emotion_sentence(prompt: str, index: int) -> str:
    listed = re.search(r"expresses these emotions: (.*?)\.\n", prompt)
    names = listed.group(1).split(", ") if listed else []
    words = [EMOTION_WORDS[name] for name in names if name in EMOTION_WORDS]
    noun = _FILLER_NOUNS[index % len(_FILLER_NOUNS)]
    return f"I feel {' and '.join(words)} about the {noun}."


def _emotion_scores(prompt: str) -> str:
    tokens = set(tokenize(_last_field(prompt, "Sentence")))
    return ", ".join("1.0" if EMOTION_WORDS[e] in tokens else "0.0" for e in EMOTIONS)


def _seed_sentence(prompt: str) -> str:
    tokens = tokenize(_last_field(prompt, "Question"))
    return f"{tokens[-1] if tokens else 'topic'}."


def _enrich(prompt: str) -> str:
    sentence = _last_field(prompt, "Sentence")
    present = set(tokenize(sentence))
    digest = hashlib.sha256(sentence.encode("utf-8")).digest()
    offset = int.from_bytes(digest[:4], "little") % len(DETAIL_VOCAB)
    added = []
    for i in range(len(DETAIL_VOCAB)):
        word = DETAIL_VOCAB[(offset + i) % len(DETAIL_VOCAB)]
        if word not in present:
            added.append(word)
        if len(added) == 2:
            break
    return f"{sentence.rstrip('.')} {' '.join(added)}."


def _importance_score(prompt: str) -> str:
    words = word_count(_last_field(prompt, "Sentence"))
    return f"{min(1.0, (words - 1) / 10):.2f}"


def synthetic_responder(prompt: str, index: int) -> str:
    if MERGE_MARKER in prompt:
        return _merge(prompt)
    if REFLECTION_MARKER in prompt:
        return _reflect(prompt)
    if "Please generate the next action accordingly" in prompt:
        return _act(prompt)
    if "Please think step by step" in prompt:
        return _think(prompt)
    if "Rate how much information" in prompt:
        return _importance_score(prompt)
    if "Score each of the eight emotions" in prompt:
        return _emotion_scores(prompt)
    if "Rewrite the seed sentence" in prompt:
        return _emotion_sentence(prompt, index)
    if "Write one short seed sentence" in prompt:
        return _seed_sentence(prompt)
    if "Enrich the sentence" in prompt:
        return _enrich(prompt)
    if prompt.startswith("Observation: "):
        return _extract(prompt)
    return "No answer."


RESPONDERS: dict[str, Responder] = {"synthetic": synthetic_responder}


def responder_by_name(name: str) -> Responder:
    try:
        return RESPONDERS[name]
    except KeyError:
        raise ContractError(
            f"unknown responder {name!r}; available: {sorted(RESPONDERS)}"
        ) from None

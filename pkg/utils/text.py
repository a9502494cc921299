import re
import string

TRUNCATION_MARKER = "[truncated]"

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCTUATION = set(string.punctuation)


def word_count(text: str) -> int:
    return len(text.split())


def truncate_words(text: str, max_words: int) -> str:
    """Cap `text` at `max_words` whitespace tokens, the last one being the marker."""
    words = text.split()
    if len(words) <= max_words:
        return text
    return " ".join(words[: max_words - 1] + [TRUNCATION_MARKER])


def normalize_answer(text: str) -> str:
    # answer normalization: lowercase, drop punctuation and articles, collapse spaces
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCTUATION)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        token = raw.strip(string.punctuation)
        if token:
            tokens.append(token)
    return tokens

import json
from pathlib import Path
from typing import Iterable, Iterator, Type, TypeVar

from pydantic import BaseModel, ValidationError

from utils.errors import ParseError

ModelT = TypeVar("ModelT", bound=BaseModel)


def iter_json_lines(payload: bytes) -> Iterator[tuple[int, dict]]:
    """Yield (line number, object) for every non-blank line, with positioned errors."""
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = payload[: exc.start].count(b"\n") + 1
        raise ParseError(f"invalid utf-8: {exc.reason}", line) from exc
    for number, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            value = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, number, exc.colno) from exc
        if not isinstance(value, dict):
            raise ParseError("expected a JSON object", number, 1)
        yield number, value


def validate_line(model: Type[ModelT], value: dict, line: int) -> ModelT:
    try:
        return model.model_validate(value)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ParseError(f"{where}: {first['msg']}", line) from exc


def dump_models(models: Iterable[BaseModel]) -> bytes:
    return b"".join(
        m.model_dump_json(by_alias=True).encode("utf-8") + b"\n" for m in models
    )


def read_models(path: str, model: Type[ModelT]) -> list[ModelT]:
    payload = Path(path).read_bytes()
    return [
        validate_line(model, value, line) for line, value in iter_json_lines(payload)
    ]


def write_models(path: str, models: Iterable[BaseModel]) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(dump_models(models))

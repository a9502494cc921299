import json
from typing import Iterable, Union

from pydantic_models.memory import MemoryStore, MemoryUnit, StepRecord, Trajectory
from utils.errors import ContractError, DimensionMismatchError, ParseError
from utils.jsonl import iter_json_lines, validate_line


def insert(store: MemoryStore, unit: MemoryUnit) -> MemoryStore:
    """Append in place; earlier units are never touched."""
    if len(unit.embedding) != store.dim:
        raise DimensionMismatchError(store.dim, len(unit.embedding))
    if store.units and unit.id <= store.units[-1].id:
        raise ContractError(
            f"unit id {unit.id} is not above the last id {store.units[-1].id}"
        )
    store.units.append(unit)
    return store


def _header(kind: str, **fields) -> bytes:
    return json.dumps({"record": kind, **fields}, separators=(",", ":")).encode("utf-8")


def _line(kind: str, model) -> bytes:
    body = model.model_dump_json()
    # splice the record tag in front of the model's own fields
    return b'{"record":"' + kind.encode() + b'",' + body[1:].encode("utf-8")


def serialize_store(store: MemoryStore) -> bytes:
    lines = [_header("store", dim=store.dim, count=len(store.units))]
    lines.extend(_line("unit", unit) for unit in store.units)
    return b"\n".join(lines) + b"\n"


def serialize_trajectory(trajectory: Trajectory) -> bytes:
    header = trajectory.model_dump(exclude={"steps", "memories"})
    header.update(
        dim=trajectory.memories.dim,
        unit_count=len(trajectory.memories.units),
        step_count=len(trajectory.steps),
    )
    lines = [_header("trajectory", **header)]
    lines.extend(_line("unit", unit) for unit in trajectory.memories.units)
    lines.extend(_line("step", step) for step in trajectory.steps)
    return b"\n".join(lines) + b"\n"


def serialize(value: Union[MemoryStore, Trajectory]) -> bytes:
    if isinstance(value, MemoryStore):
        return serialize_store(value)
    if isinstance(value, Trajectory):
        return serialize_trajectory(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def serialize_trajectories(trajectories: Iterable[Trajectory]) -> bytes:
    return b"".join(serialize_trajectory(t) for t in trajectories)


def _strip_tag(value: dict) -> dict:
    return {key: item for key, item in value.items() if key != "record"}


def _read_blocks(payload: bytes) -> list[Union[MemoryStore, Trajectory]]:
    lines = list(iter_json_lines(payload))
    blocks = []
    position = 0
    last_line = payload.count(b"\n") + 1
    while position < len(lines):
        number, head = lines[position]
        kind = head.get("record")
        if kind == "store":
            units_expected, steps_expected = head.get("count"), 0
        elif kind == "trajectory":
            units_expected = head.get("unit_count")
            steps_expected = head.get("step_count")
        else:
            raise ParseError(
                f"expected a store or trajectory header, got {kind!r}", number
            )
        if not isinstance(units_expected, int) or not isinstance(steps_expected, int):
            raise ParseError("header is missing its line counts", number)

        body = lines[position + 1 : position + 1 + units_expected + steps_expected]
        if len(body) < units_expected + steps_expected:
            raise ParseError(
                f"truncated {kind}: expected {units_expected + steps_expected} lines, "
                f"found {len(body)}",
                last_line,
            )
        units, steps = [], []
        for offset, (line, value) in enumerate(body):
            want = "unit" if offset < units_expected else "step"
            if value.get("record") != want:
                raise ParseError(f"expected a {want} line", line)
            if want == "unit":
                units.append(validate_line(MemoryUnit, _strip_tag(value), line))
            else:
                steps.append(validate_line(StepRecord, _strip_tag(value), line))

        dim = head.get("dim")
        if kind == "store":
            store = validate_line(MemoryStore, {"dim": dim}, number)
            for unit in units:
                try:
                    insert(store, unit)
                except ContractError as exc:
                    raise ParseError(str(exc), number) from exc
            blocks.append(store)
        else:
            fields = _strip_tag(head)
            for key in ("dim", "unit_count", "step_count"):
                fields.pop(key, None)
            fields["memories"] = {"dim": dim, "units": units}
            fields["steps"] = steps
            blocks.append(validate_line(Trajectory, fields, number))
        position += 1 + units_expected + steps_expected
    return blocks


def deserialize(payload: bytes) -> Union[MemoryStore, Trajectory]:
    blocks = _read_blocks(payload)
    if len(blocks) != 1:
        raise ParseError(
            f"expected exactly one store or trajectory, found {len(blocks)}", 1
        )
    return blocks[0]


def deserialize_trajectories(payload: bytes) -> list[Trajectory]:
    blocks = _read_blocks(payload)
    for block in blocks:
        if not isinstance(block, Trajectory):
            raise ParseError("trajectory log contains a bare store block", 1)
    return blocks

"""Core domain types: modality schema, availability masks and K->N tasks."""

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Sequence, Tuple

import numpy as np


class SchemaError(ValueError):
    """Mask or task does not fit the modality schema."""


class MaskParseError(ValueError):
    """Availability code contains something other than '0'/'1'."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class ModalityId:
    index: int
    name: str
    description_text: str

    def __post_init__(self):
        if self.index < 0:
            raise SchemaError(f"modality index must be >= 0, got {self.index}")
        if not self.name:
            raise SchemaError("modality name must be nonempty")
        if not self.description_text:
            raise SchemaError(f"modality {self.name!r} needs a description text")


BRAIN_TUMOR_MODALITIES = (
    ("T1n", "t1 weighted native magnetic resonance image"),
    ("T1c", "t1 weighted contrast enhanced magnetic resonance image"),
    ("T2w", "t2 weighted magnetic resonance image"),
    ("T2f", "t2 fluid attenuated inversion recovery magnetic resonance image"),
)


def make_schema(names_and_texts: Sequence[Tuple[str, str]]) -> Tuple[ModalityId, ...]:
    schema = tuple(ModalityId(i, n, t) for i, (n, t) in enumerate(names_and_texts))
    names = [m.name for m in schema]
    if len(set(names)) != len(names):
        raise SchemaError(f"duplicate modality names in schema: {names}")
    return schema


def default_schema() -> Tuple[ModalityId, ...]:
    return make_schema(BRAIN_TUMOR_MODALITIES)


def schema_lookup(schema: Sequence[ModalityId], name: str) -> ModalityId:
    for m in schema:
        if m.name == name:
            return m
    raise SchemaError(f"modality {name!r} not in schema {[m.name for m in schema]}")


@dataclass(frozen=True)
class AvailabilityMask:
    bits: Tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    def render(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    def __str__(self):
        return self.render()

    @property
    def count(self) -> int:
        return sum(self.bits)

    def indices(self) -> List[int]:
        return [i for i, b in enumerate(self.bits) if b]


def parse_mask(code: str, schema: Sequence[ModalityId]) -> AvailabilityMask:
    """Parse an availability code such as ``"1011"`` against ``schema``.

    Bit ``k`` refers to ``schema[k]``; at least one bit must be set.
    """
    bad = [ch for ch in code if ch not in "01"]
    if bad:
        raise MaskParseError(f"availability code {code!r} has non-binary characters {bad}")
    if len(code) != len(schema):
        raise SchemaError(
            f"availability code {code!r} has {len(code)} digits, schema has {len(schema)} modalities")
    if "1" not in code:
        raise SchemaError(f"availability code {code!r} marks no modality as available")
    return AvailabilityMask(tuple(ch == "1" for ch in code))


def mask_from_names(names, schema: Sequence[ModalityId]) -> AvailabilityMask:
    wanted = {n if isinstance(n, str) else n.name for n in names}
    unknown = wanted - {m.name for m in schema}
    if unknown:
        raise SchemaError(f"unknown modalities {sorted(unknown)}")
    return parse_mask("".join("1" if m.name in wanted else "0" for m in schema), schema)


@dataclass(frozen=True)
class K2NTask:
    inputs: FrozenSet[ModalityId]
    targets: FrozenSet[ModalityId]
    key_frame: ModalityId

    def __post_init__(self):
        if not self.inputs:
            raise ContractError("a task needs at least one input modality")
        if not self.targets:
            raise ContractError("a task needs at least one target modality")
        if self.key_frame not in self.inputs:
            raise ContractError(f"key frame {self.key_frame.name} is not among the inputs")

    @property
    def K(self) -> int:
        return len(self.inputs)

    @property
    def N(self) -> int:
        return len(self.targets)

    def ordered_inputs(self) -> List[ModalityId]:
        """Key frame first, then auxiliary frames in schema order."""
        rest = sorted((m for m in self.inputs if m != self.key_frame), key=lambda m: m.index)
        return [self.key_frame] + rest

    def ordered_targets(self) -> List[ModalityId]:
        return sorted(self.targets, key=lambda m: m.index)

    def describe(self) -> str:
        ins = ",".join(m.name for m in self.ordered_inputs())
        outs = ",".join(m.name for m in self.ordered_targets())
        return f"{ins}->{outs}"


def make_task(mask: AvailabilityMask, targets, schema: Sequence[ModalityId]) -> K2NTask:
    """Build the K->N task for ``mask``; the key frame is the first set bit."""
    targets = frozenset(targets)
    if not targets:
        raise ContractError("targets must be nonempty")
    if len(mask.bits) != len(schema):
        raise SchemaError("mask length does not match schema")
    idx = mask.indices()
    if not idx:
        raise SchemaError("mask has no available modality")
    inputs = frozenset(schema[i] for i in idx)
    return K2NTask(inputs=inputs, targets=targets, key_frame=schema[idx[0]])


def task_from_indices(inputs, targets, schema: Sequence[ModalityId]) -> K2NTask:
    ins = sorted(set(int(i) for i in inputs))
    return K2NTask(inputs=frozenset(schema[i] for i in ins),
                   targets=frozenset(schema[int(j)] for j in targets),
                   key_frame=schema[ins[0]])


@dataclass(frozen=True)
class PairedSample:
    """One case: co-registered 2D slices in [0, 1] keyed by modality name."""

    case_id: str
    slices: Dict[str, np.ndarray]
    mask: AvailabilityMask
    schema: Tuple[ModalityId, ...] = field(default_factory=default_schema)

    def __post_init__(self):
        if len(self.mask.bits) != len(self.schema):
            raise SchemaError(f"case {self.case_id}: mask length does not match schema")
        shapes = set()
        for m, bit in zip(self.schema, self.mask.bits):
            if bit and m.name not in self.slices:
                raise SchemaError(f"case {self.case_id}: mask marks {m.name} available but no slice given")
        for name, img in self.slices.items():
            if img.ndim != 2:
                raise SchemaError(f"case {self.case_id}: slice {name} is not 2D")
            shapes.add(img.shape)
        if len(shapes) > 1:
            raise SchemaError(f"case {self.case_id}: slices differ in shape {sorted(shapes)}")

    @property
    def shape(self) -> Tuple[int, int]:
        return next(iter(self.slices.values())).shape

    def has(self, names) -> bool:
        avail = {m.name for m, b in zip(self.schema, self.mask.bits) if b}
        return all((n if isinstance(n, str) else n.name) in avail for n in names)

    def stack(self, names) -> np.ndarray:
        return np.stack([self.slices[n if isinstance(n, str) else n.name] for n in names])


@dataclass
class FeatureMap:
    """Multi-scale features, ordered coarse to fine, each ``(B, D, h, w)``."""

    scales: list
    embedding_dim: int

    @property
    def finest(self):
        return self.scales[-1]

    @property
    def coarsest(self):
        return self.scales[0]

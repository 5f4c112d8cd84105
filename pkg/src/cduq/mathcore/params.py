"""Named parameter collections and their checkpoint format.

A checkpoint is a single JSON document ``{name: {"shape": [...], "data":
[...]}}`` with names in lexicographic order and floats rendered with 17
significant digits, which round-trips every double exactly. The writer is
hand-rolled so the byte layout is deterministic; the reader is plain
``json.loads`` plus validation.
"""

import json
import math

from ..errors import FormatError
from .tensor import Tensor


def fmt_float(x):
    """Shortest 17-significant-digit form that json reads back as a float.

    Integral values keep a trailing ".0" so "-0" survives as -0.0 instead
    of collapsing to the unsigned integer zero.
    """
    s = format(x, ".17g")
    if "." not in s and "e" not in s and "n" not in s:
        s += ".0"
    return s


class ParamStore:
    """Mapping of name -> Tensor; shapes are fixed on first assignment."""

    def __init__(self):
        self._params = {}

    def __setitem__(self, name, tensor):
        if not isinstance(tensor, Tensor):
            raise TypeError("ParamStore values must be Tensors")
        old = self._params.get(name)
        if old is not None and old.shape != tensor.shape:
            raise ValueError(
                f"shape of {name!r} is fixed at {old.shape}, got {tensor.shape}"
            )
        self._params[name] = tensor

    def replace(self, name, tensor):
        if name not in self._params:
            raise KeyError(name)
        self[name] = tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        """(name, tensor) pairs in lexicographic name order."""
        for name in self.names():
            yield name, self._params[name]

    def subset(self, prefix):
        """Names under a dotted prefix, lexicographic."""
        return [n for n in self.names() if n.startswith(prefix)]

    def num_values(self):
        return sum(t.size for t in self._params.values())

    def to_json(self):
        chunks = ["{"]
        for i, (name, t) in enumerate(self.items()):
            shape = ", ".join(str(s) for s in t.shape)
            data = ", ".join(fmt_float(x) for x in t.data)
            sep = "," if i else ""
            chunks.append(f'{sep}\n  {json.dumps(name)}: {{"shape": [{shape}], "data": [{data}]}}')
        chunks.append("\n}\n")
        return "".join(chunks)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError("checkpoint must be a JSON object")
        store = cls()
        for name, entry in doc.items():
            if not isinstance(entry, dict) or set(entry) != {"shape", "data"}:
                raise FormatError(f"bad checkpoint entry for {name!r}")
            shape = tuple(entry["shape"])
            data = entry["data"]
            if not all(isinstance(s, int) and s > 0 for s in shape):
                raise FormatError(f"bad shape for {name!r}: {shape}")
            expect = 1
            for s in shape:
                expect *= s
            if len(data) != expect:
                raise FormatError(
                    f"{name!r}: shape {shape} needs {expect} values, got {len(data)}"
                )
            values = [float(x) for x in data]
            if not all(math.isfinite(x) for x in values):
                raise FormatError(f"{name!r} contains non-finite values")
            store[name] = Tensor(shape, values)
        return store

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

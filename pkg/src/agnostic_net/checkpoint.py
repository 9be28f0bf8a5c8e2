"""Single-file, diff-friendly model checkpoints.

Layout::

    agnostic-net-checkpoint 1
    input_shape: 1 32 32
    begin architecture
    [features]
    conv 8 3
    ...
    end architecture
    param features.0.weight
    shape: 8 1 3 3
    0.1 -0.2 ...
    param features.0.bias
    ...

Parameter values use the tensor text format, so a save/load round trip is
exact (values are written with ``repr``).
"""

from __future__ import annotations

from pathlib import Path

from . import layers as L
from .dann import Architecture, Network
from .tensor import from_text, to_text

FORMAT_LINE = "agnostic-net-checkpoint 1"


class CheckpointError(ValueError):
    pass


def dumps(net: Network) -> str:
    parts = [FORMAT_LINE, "input_shape: " + " ".join(str(d) for d in net.input_shape),
             "begin architecture", net.arch.to_text().rstrip("\n"), "end architecture"]
    for name, p in net.params.params.items():
        parts.append(f"param {name}")
        parts.append(to_text(p).rstrip("\n"))
    return "\n".join(parts) + "\n"


def loads(text: str, source: str = "<string>") -> Network:
    lines = text.split("\n")
    if not lines or lines[0].strip() != FORMAT_LINE:
        raise CheckpointError(f"{source}:1: expected {FORMAT_LINE!r}")
    if len(lines) < 3 or not lines[1].startswith("input_shape:"):
        raise CheckpointError(f"{source}:2: expected 'input_shape:' line")
    input_shape = tuple(int(tok) for tok in lines[1][len("input_shape:"):].split())
    if lines[2].strip() != "begin architecture":
        raise CheckpointError(f"{source}:3: expected 'begin architecture'")
    try:
        end = lines.index("end architecture", 3)
    except ValueError:
        raise CheckpointError(f"{source}: missing 'end architecture'") from None
    arch = Architecture.parse("\n".join(lines[3:end]))
    store = L.ParamStore()
    i = end + 1
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if not line.startswith("param "):
            raise CheckpointError(f"{source}:{i + 1}: expected 'param NAME', got {line!r}")
        if i + 2 >= len(lines):
            raise CheckpointError(f"{source}:{i + 1}: truncated parameter block")
        try:
            tensor = from_text(lines[i + 1] + "\n" + lines[i + 2])
        except ValueError as exc:
            raise CheckpointError(f"{source}:{i + 2}: {exc}") from None
        store.add(line[len("param "):].strip(), tensor.data)
        i += 3
    fresh = Network(arch, input_shape, 0)
    missing = set(fresh.params.params) ^ set(store.params)
    if missing:
        raise CheckpointError(f"{source}: parameter names do not match the architecture: {sorted(missing)}")
    for name, p in fresh.params.params.items():
        if p.data.shape != store[name].data.shape:
            raise CheckpointError(f"{source}: {name} has shape {store[name].data.shape}, "
                                  f"architecture needs {p.data.shape}")
    return Network(arch, input_shape, params=store)


def save(net: Network, path) -> None:
    Path(path).write_text(dumps(net))


def load(path) -> Network:
    return loads(Path(path).read_text(), str(path))

"""Parameter checkpoints.

Layout: ``MAGIC`` (8 bytes), format version (uint32 LE), header length (uint64 LE),
a UTF-8 JSON header holding each graph's topology and parameter table, then the raw
little-endian float64 buffers of every graph in registry order.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from ..exceptions import CheckpointError, FileOperationError, ValidationError
from ..utils.io import safe_read_bytes, safe_write_bytes
from .graph import Graph

logger = logging.getLogger(__name__)

MAGIC = b"STKCKPT\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


def encode_checkpoint(graphs: Mapping[str, Graph], metadata: Optional[Dict[str, Any]] = None) -> bytes:
    header: Dict[str, Any] = {"graphs": [], "metadata": metadata or {}}
    chunks = []
    for key, graph in graphs.items():
        table = []
        for name, buf in graph.parameters().items():
            table.append({"name": name, "shape": list(buf.shape)})
            chunks.append(np.ascontiguousarray(buf, dtype="<f8").tobytes())
        header["graphs"].append({"key": key, "topology": graph.describe(), "parameters": table})
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, Graph], Dict[str, Any]]:
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError("Checkpoint is truncated")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("Not a stitchkit checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header: {e}")

    offset = start + header_len
    graphs: Dict[str, Graph] = {}
    for entry in header["graphs"]:
        try:
            graph = Graph.from_description(entry["topology"])
        except (KeyError, TypeError, ValidationError) as e:
            raise CheckpointError(f"Invalid topology for graph '{entry.get('key')}': {e}")
        for item in entry["parameters"]:
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(blob):
                raise CheckpointError(f"Checkpoint truncated inside '{item['name']}'")
            values = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            graph.set_parameter(item["name"], values)
            offset = end
        graphs[entry["key"]] = graph
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after parameter buffers")
    return graphs, header.get("metadata", {})


def save_checkpoint(
    path: Path, graphs: Mapping[str, Graph], metadata: Optional[Dict[str, Any]] = None
) -> None:
    """Write ``graphs`` (key -> graph) to ``path`` atomically."""
    safe_write_bytes(Path(path), encode_checkpoint(graphs, metadata))
    logger.debug("Saved checkpoint %s (%s)", path, ", ".join(graphs))


def load_checkpoint(path: Path) -> Tuple[Dict[str, Graph], Dict[str, Any]]:
    """Rebuild graphs and their parameters from ``path``; returns (graphs, metadata)."""
    try:
        blob = safe_read_bytes(Path(path))
    except FileOperationError as e:
        raise CheckpointError(str(e))
    return decode_checkpoint(blob)


def copy_parameters(source: Graph, target: Graph) -> None:
    """Copy every parameter of ``source`` into a topologically identical ``target``."""
    if source.describe()["nodes"] != target.describe()["nodes"]:
        raise CheckpointError(
            f"Checkpoint topology of '{source.name}' does not match graph '{target.name}'"
        )
    for name, value in source.parameters().items():
        target.set_parameter(name, value)

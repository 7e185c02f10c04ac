"""Cluster configuration: one JSON file shared by daemons, CLI, and tests.

Schema::

    {
      "coordinator": {"host": "127.0.0.1", "port": 9320},
      "journal": "state/journal.jsonl",
      "scheme": {"n": 14, "k": 10},
      "block_size": 67108864,
      "slice_size": 32768,
      "nodes": [
        {"id": "n1", "host": "127.0.0.1", "control_port": 9401,
         "data_port": 9402, "root": "state/n1", "rack": "r1"},
        ...
      ],
      "weights": {"default": 1.0, "links": [["n1", "n2", 0.5], ...]}
    }

Relative paths resolve against the config file's directory.  ``weights``
follows the same seconds-per-block convention as the path selector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .pathsel import LinkWeightMatrix


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NodeConfig:
    id: str
    host: str
    control_port: int
    data_port: int
    root: Path
    rack: str = "default"

    @property
    def control_address(self) -> tuple[str, int]:
        return self.host, self.control_port

    @property
    def data_address(self) -> tuple[str, int]:
        return self.host, self.data_port


@dataclass(frozen=True)
class ClusterConfig:
    coordinator: tuple[str, int]
    nodes: tuple[NodeConfig, ...]
    n: int
    k: int
    block_size: int
    slice_size: int
    journal: Path | None = None
    weights: LinkWeightMatrix = field(default_factory=LinkWeightMatrix)

    @classmethod
    def load(cls, path: str | Path) -> "ClusterConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load cluster config {path}: {exc}") from exc
        return cls.from_dict(doc, base=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path(".")) -> "ClusterConfig":
        try:
            coord = (doc["coordinator"]["host"], int(doc["coordinator"]["port"]))
            scheme = doc.get("scheme", {"n": 14, "k": 10})
            nodes = tuple(
                NodeConfig(
                    id=entry["id"],
                    host=entry.get("host", "127.0.0.1"),
                    control_port=int(entry["control_port"]),
                    data_port=int(entry["data_port"]),
                    root=(base / entry["root"]).resolve(),
                    rack=entry.get("rack", "default"),
                )
                for entry in doc["nodes"]
            )
        except KeyError as exc:
            raise ConfigError(f"cluster config missing field {exc}") from exc
        ids = [node.id for node in nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate node ids in cluster config")
        weights_doc = doc.get("weights", {})
        weights = LinkWeightMatrix(
            weights={(src, dst): float(w) for src, dst, w in weights_doc.get("links", [])},
            default=float(weights_doc.get("default", 1.0)),
        )
        journal = doc.get("journal")
        return cls(
            coordinator=coord,
            nodes=nodes,
            n=int(scheme["n"]),
            k=int(scheme["k"]),
            block_size=int(doc.get("block_size", 64 * 2**20)),
            slice_size=int(doc.get("slice_size", 32 * 2**10)),
            journal=(base / journal).resolve() if journal else None,
            weights=weights,
        )

    def node(self, node_id: str) -> NodeConfig:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise ConfigError(f"unknown node {node_id}")

    def topology(self) -> dict[str, str]:
        return {node.id: node.rack for node in self.nodes}

    def control_addresses(self) -> dict[str, tuple[str, int]]:
        return {node.id: node.control_address for node in self.nodes}

    def data_addresses(self) -> dict[str, tuple[str, int]]:
        return {node.id: node.data_address for node in self.nodes}

    @staticmethod
    def parse_listen(spec: str) -> tuple[str, int]:
        host, _, port = spec.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"listen address must be host:port, got {spec!r}")
        return host, int(port)

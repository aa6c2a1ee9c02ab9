"""Paths to the bundled 9-bus case, fault scenario and pre-trained networks."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

CASE = "case9.json"
FAULT = "fault9.json"
NET_C = "net_c.json"
NET_E = "net_e.json"


def data_path(name: str) -> Path:
    path = Path(str(resources.files("stabcert") / "data" / name))
    if not path.exists():
        raise FileNotFoundError(f"no bundled file named {name!r}")
    return path


def bundled_case():
    from .grid import load_case
    return load_case(data_path(CASE))


def bundled_fault():
    from .grid import load_fault
    return load_fault(data_path(FAULT))


def bundled_networks():
    """(classifier, regressor) trained on the 9-bus fault scenario."""
    from .nn import load_network
    return load_network(data_path(NET_C)), load_network(data_path(NET_E))

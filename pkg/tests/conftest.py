import pytest

from toolfuse.bench import default_registry
from toolfuse.registry import load_registry


@pytest.fixture(scope="session")
def geo():
    return default_registry()


def tool(name, category, params=None, effects=()):
    return {
        "name": name,
        "description": f"{name} tool",
        "category": category,
        "parameters": params or {},
        "effects": [{"resource": r, "mode": m} for r, m in effects],
    }


def make_registry(tools, categories=None):
    cats = categories or sorted({t["category"] for t in tools})
    return load_registry({"categories": cats, "tools": tools})

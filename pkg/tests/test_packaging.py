"""
Tests for the requirement split in setup.py
"""

import ast
from pathlib import Path

SETUP = Path(__file__).resolve().parent.parent / "setup.py"


def setup_helpers() -> dict:
    """Run the imports, constants and functions of setup.py without calling setup()"""
    tree = ast.parse(SETUP.read_text())
    tree.body = [
        node for node in tree.body
        if isinstance(node, (ast.Import, ast.FunctionDef))
        or (isinstance(node, ast.Assign) and isinstance(node.value, ast.Tuple))
    ]
    namespace = {"__file__": str(SETUP)}
    exec(compile(tree, str(SETUP), "exec"), namespace)
    return namespace


def names(requirements) -> set:
    return {r.split("==")[0].split(">=")[0] for r in requirements}


class TestRequirements:
    def test_test_only_packages_are_extras(self):
        runtime, test = setup_helpers()["read_requirements"]()
        assert {"numpy", "pandas", "matplotlib", "python-dotenv", "psutil"} <= names(runtime)
        assert names(test) == {"pytest", "black", "scikit-learn", "torch"}
        assert not names(runtime) & names(test)

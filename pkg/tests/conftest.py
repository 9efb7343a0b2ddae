from importlib import resources

import pytest

from branchshadow.ir import assemble


def snippet(name):
    return resources.files("branchshadow").joinpath("corpus", "snippets", f"{name}.ir").read_text()


@pytest.fixture(scope="session")
def select3():
    return assemble(snippet("select3"))


@pytest.fixture(scope="session")
def branchless():
    return assemble(snippet("branchless"))

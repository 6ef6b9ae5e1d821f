import numpy as np
import pytest

from gnnuq.archspace import DEFAULT_SPACE, STAGE_FIELDS, Genome
from gnnuq.molgraph import GraphStore, parse_smiles

SMALL_SMILES = ["CC(=O)O", "c1ccccc1", "C1CC1", "CCN(CC)C(=O)c1ccccc1", "O", "C#N"]


def make_genome(stages, skips=("none", "none", "none"), gather="gather-sum", space=DEFAULT_SPACE):
    """Genome from readable choices; ``stages`` is a list of dicts keyed by stage field."""
    defaults = {"hidden_dim": 8, "attention": "constant", "heads": 1, "aggregate": "sum",
                "activation": "tanh", "update": "mlp"}
    genes = []
    for st in stages:
        choice = {**defaults, **st}
        for (name, options), opts in zip(STAGE_FIELDS, space.stage_options):
            genes.append(list(opts).index(choice[name]))
    genes += [list(space.skip_options).index(s) for s in skips]
    genes.append(list(space.gather_options).index(gather))
    return Genome(tuple(genes), space.version)


@pytest.fixture(scope="session")
def small_store():
    return GraphStore.from_specs([parse_smiles(s) for s in SMALL_SMILES], 14, 28)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

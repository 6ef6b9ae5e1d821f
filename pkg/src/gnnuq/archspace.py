"""Architecture search space and genomes.

The space is a fixed chain: input -> three message-passing stages (each
with six independent choices) -> three skip-connection choices -> one
readout choice -> two dense(32) layers -> mean/variance output. A genome is
one option index per choice, 3*6 + 3 + 1 = 22 genes in the default space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import GeneOutOfRange, MalformedJson, VersionMismatch
from .rng import SplitMix64

SPACE_VERSION = 1

HIDDEN_DIMS = (8, 16, 32, 64)
ATTENTIONS = ("constant", "gat", "sym-gat", "cos", "linear", "gen-linear")
HEADS = (1, 2, 3)
AGGREGATES = ("mean", "sum", "max")
ACTIVATIONS = ("sigmoid", "tanh", "relu", "linear", "softplus", "leakyrelu", "relu6", "elu")
UPDATES = ("gru", "mlp")
SKIPS = ("none", "from-1-back", "from-2-back")
GATHERS = (
    "pool-sum", "pool-mean", "pool-max",
    "gather-sum", "gather-mean", "gather-max",
    "attn-pool-16", "attn-pool-32", "attn-pool-64",
    "attn-sum-pool", "flatten",
)

STAGE_FIELDS = (
    ("hidden_dim", HIDDEN_DIMS),
    ("attention", ATTENTIONS),
    ("heads", HEADS),
    ("aggregate", AGGREGATES),
    ("activation", ACTIVATIONS),
    ("update", UPDATES),
)

TAIL_UNITS = (32, 32)


@dataclass(frozen=True)
class Gene:
    name: str
    options: tuple

    @property
    def size(self) -> int:
        return len(self.options)


@dataclass(frozen=True)
class SearchSpace:
    """Ordered list of genes; ``n_stages`` stages then the skips, then readout.

    Option subsets can be supplied per field to build reduced spaces, e.g.
    for tests or cheaper searches.
    """

    n_stages: int = 3
    n_skips: int = 3
    stage_options: tuple = tuple(opts for _, opts in STAGE_FIELDS)
    skip_options: tuple = SKIPS
    gather_options: tuple = GATHERS
    version: int = SPACE_VERSION
    genes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        genes = []
        for s in range(self.n_stages):
            for (fname, _), opts in zip(STAGE_FIELDS, self.stage_options):
                genes.append(Gene(f"stage{s}.{fname}", tuple(opts)))
        for k in range(self.n_skips):
            genes.append(Gene(f"skip{k}", tuple(self.skip_options)))
        if self.gather_options:
            genes.append(Gene("gather", tuple(self.gather_options)))
        object.__setattr__(self, "genes", tuple(genes))

    def __len__(self) -> int:
        return len(self.genes)

    @property
    def sizes(self) -> list[int]:
        return [g.size for g in self.genes]

    def decode(self, genome: "Genome") -> dict:
        """Map a genome to named choices."""
        self.validate(genome)
        return {g.name: g.options[v] for g, v in zip(self.genes, genome.genes)}

    def validate(self, genome: "Genome") -> None:
        if len(genome.genes) != len(self.genes):
            raise GeneOutOfRange(f"genome has {len(genome.genes)} genes, space has {len(self.genes)}")
        for k, (g, v) in enumerate(zip(self.genes, genome.genes)):
            if not 0 <= v < g.size:
                raise GeneOutOfRange(f"gene {k} ({g.name}) = {v} not in [0, {g.size})")


DEFAULT_SPACE = SearchSpace()


@dataclass(frozen=True)
class Genome:
    genes: tuple[int, ...]
    space_version: int = SPACE_VERSION

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(int(v) for v in self.genes))

    def __len__(self) -> int:
        return len(self.genes)

    def hamming(self, other: "Genome") -> int:
        return sum(a != b for a, b in zip(self.genes, other.genes))


def cardinality(space: SearchSpace = DEFAULT_SPACE) -> int:
    return math.prod(space.sizes)


def random_genome(space: SearchSpace, rng: SplitMix64) -> Genome:
    return Genome(tuple(rng.below(n) for n in space.sizes), space.version)


def mutate(space: SearchSpace, parent: Genome, rng: SplitMix64) -> Genome:
    """Resample one gene, chosen uniformly, to a different option.

    Genes with a single option cannot change; if every gene is fixed the
    parent is returned unchanged.
    """
    space.validate(parent)
    mutable = [k for k, n in enumerate(space.sizes) if n > 1]
    if not mutable:
        return parent
    k = mutable[rng.below(len(mutable))]
    n = space.sizes[k]
    shift = 1 + rng.below(n - 1)
    genes = list(parent.genes)
    genes[k] = (genes[k] + shift) % n
    return Genome(tuple(genes), parent.space_version)


def genome_to_dict(genome: Genome) -> dict:
    return {"space_version": genome.space_version, "genes": list(genome.genes)}


def genome_from_dict(d, space: SearchSpace = DEFAULT_SPACE) -> Genome:
    if not isinstance(d, dict) or "space_version" not in d or "genes" not in d:
        raise MalformedJson("genome must have 'space_version' and 'genes'")
    genes = d["genes"]
    if not isinstance(genes, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in genes):
        raise MalformedJson("'genes' must be a list of integers")
    if d["space_version"] != space.version:
        raise VersionMismatch(f"genome space_version {d['space_version']} != {space.version}")
    genome = Genome(tuple(genes), d["space_version"])
    space.validate(genome)
    return genome


def encode_genome(genome: Genome) -> str:
    return json.dumps(genome_to_dict(genome))


def decode_genome(text: str, space: SearchSpace = DEFAULT_SPACE) -> Genome:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedJson(str(exc)) from exc
    return genome_from_dict(d, space)

"""Instance representation: canonical embedded data and instance file I/O."""

from collections.abc import Iterable
from fractions import Fraction
import logging
from pathlib import Path

from .artifacts import timestamp_header, write_lines_atomic
from .errors import InstanceFormatError
from .models import DEFAULT_LARGE, HcpInstance, TspInstance

logger = logging.getLogger(__name__)

CANONICAL_N = 51
CANONICAL_ORIGIN = 1
CANONICAL_SOURCE = 2
CANONICAL_SINK = 51
SOURCE_COST = 1
SINK_COST = 3
RETURN_COST = 1
PAIR_COST = 1
TRIPLE_COST = 2
EXTERNAL_COST = 1

# Replacement blocks of the 51-node instance.
CANONICAL_PAIRS = (
    (3, 4), (8, 9), (13, 14), (18, 19), (23, 24), (25, 26),
    (27, 28), (29, 30), (34, 35), (39, 40), (44, 45), (49, 50),
)  # fmt: skip
CANONICAL_TRIPLES = (
    (5, 6, 7), (10, 11, 12), (15, 16, 17), (20, 21, 22),
    (31, 32, 33), (36, 37, 38), (41, 42, 43), (46, 47, 48),
)  # fmt: skip
# Cost-1 links between blocks; each Group node has exactly one.
CANONICAL_EXTERNAL_EDGES = (
    (3, 5), (4, 10), (6, 8), (7, 13), (9, 15), (11, 18), (12, 25), (14, 20),
    (16, 23), (17, 27), (19, 21), (22, 24), (26, 38), (28, 43), (29, 31), (30, 36),
    (32, 34), (33, 39), (35, 41), (37, 44), (40, 46), (42, 49), (45, 47), (48, 50),
)  # fmt: skip

SEED_N = 23
SEED_ORIGIN = 1
SEED_SOURCE = 2
SEED_SINK = 23
SEED_GROUP_SIZE = 20
# Seed Group edges as (a, b) with Group node g_k stored as node k + 2.
SEED_GROUP_EDGES = (
    (1, 2), (1, 4), (2, 3), (2, 5), (3, 6), (4, 7), (4, 10), (5, 8),
    (6, 9), (6, 11), (7, 8), (8, 9), (10, 15), (11, 17), (12, 13), (12, 15),
    (13, 14), (13, 16), (14, 17), (15, 18), (16, 19), (17, 20), (18, 19), (19, 20),
)  # fmt: skip

# Share of a node's per-stage emission carried by one outgoing Group arc.
SPLIT_WEIGHTS = {PAIR_COST: Fraction(1, 2), TRIPLE_COST: Fraction(1, 4)}


def canonical_counterexample(large: int = DEFAULT_LARGE) -> TspInstance:
    """The embedded 51-node cost table."""
    entries: dict[tuple[int, int], int] = {(CANONICAL_ORIGIN, CANONICAL_SOURCE): SOURCE_COST}
    for g in range(3, CANONICAL_SINK):
        entries[(CANONICAL_SOURCE, g)] = SOURCE_COST
        entries[(g, CANONICAL_SINK)] = SINK_COST
    for a, b in CANONICAL_PAIRS:
        entries[(a, b)] = entries[(b, a)] = PAIR_COST
    for triple in CANONICAL_TRIPLES:
        for a in triple:
            for b in triple:
                if a != b:
                    entries[(a, b)] = TRIPLE_COST
    for a, b in CANONICAL_EXTERNAL_EDGES:
        entries[(a, b)] = entries[(b, a)] = EXTERNAL_COST
    entries[(CANONICAL_SINK, CANONICAL_ORIGIN)] = RETURN_COST
    return TspInstance.from_entries(
        CANONICAL_N,
        entries,
        large=large,
        origin=CANONICAL_ORIGIN,
        source=CANONICAL_SOURCE,
        sink=CANONICAL_SINK,
    )


def canonical_hcp_seed() -> HcpInstance:
    """The 23-node seed graph whose enlargement is the 51-node instance.

    Recovered by contracting every replacement pair/triple of the 51-node
    table back to one node.
    """
    group = range(3, 3 + SEED_GROUP_SIZE)
    arcs = {(SEED_ORIGIN, SEED_SOURCE), (SEED_SINK, SEED_ORIGIN)}
    arcs.update((SEED_SOURCE, g) for g in group)
    arcs.update((g, SEED_SINK) for g in group)
    for a, b in SEED_GROUP_EDGES:
        arcs.update({(a + 2, b + 2), (b + 2, a + 2)})
    return HcpInstance(
        n=SEED_N,
        arcs=frozenset(arcs),
        origin=SEED_ORIGIN,
        source=SEED_SOURCE,
        sink=SEED_SINK,
    )


def group_out_weight(t: TspInstance, k: int) -> Fraction | None:
    """Sum of split weights over k's non-large arcs into other Group nodes.

    None when an arc carries a cost with no split weight.
    """
    roles = t.role_nodes
    total = Fraction(0)
    for j in t.nodes:
        if j == k or j in roles or t.is_large(k, j):
            continue
        weight = SPLIT_WEIGHTS.get(t.cost_of(k, j))
        if weight is None:
            return None
        total += weight
    return total


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _parse_directive(text: str, line_number: int) -> tuple[str, int]:
    key, _, value = text.partition("=")
    try:
        return key.strip().lower(), int(value)
    except ValueError as e:
        raise InstanceFormatError(f"bad value in {text!r}", line_number) from e


def _parse_header(
    lines: Iterable[str], allowed: set[str]
) -> tuple[dict[str, int], list[tuple[int, list[str]]]]:
    """Split a file into ``key=value`` directives and body rows."""
    header: dict[str, int] = {}
    body: list[tuple[int, list[str]]] = []
    for number, raw in enumerate(lines, start=1):
        text = _strip(raw)
        if not text:
            continue
        if "=" in text:
            key, value = _parse_directive(text, number)
            if key not in allowed:
                raise InstanceFormatError(f"unknown directive {key!r}", number)
            if key in header:
                raise InstanceFormatError(f"duplicate directive {key!r}", number)
            if key != "n" and "n" not in header:
                raise InstanceFormatError("header must start with n=<int>", number)
            header[key] = value
            continue
        if "n" not in header:
            raise InstanceFormatError("header must start with n=<int>", number)
        body.append((number, text.split()))
    if "n" not in header:
        raise InstanceFormatError("missing n=<int> header")
    if header["n"] < 1:
        raise InstanceFormatError("n must be positive")
    return header, body


def _node(token: str, n: int, line_number: int) -> int:
    try:
        v = int(token)
    except ValueError as e:
        raise InstanceFormatError(f"bad node id {token!r}", line_number) from e
    if not 1 <= v <= n:
        raise InstanceFormatError(f"node {v} outside 1..{n}", line_number)
    return v


def parse_tsp_instance(lines: Iterable[str], large: int | None = None) -> TspInstance:
    """Parse the instance text format (see ``load_tsp_instance``)."""
    header, body = _parse_header(lines, {"n", "large", "origin", "source", "sink"})
    n = header["n"]
    entries: dict[tuple[int, int], int] = {}
    for number, fields in body:
        if len(fields) != 3:
            raise InstanceFormatError("expected '<i> <j> <cost>'", number)
        i, j = _node(fields[0], n, number), _node(fields[1], n, number)
        if i == j:
            raise InstanceFormatError(f"self-loop {i} {j}", number)
        try:
            c = int(fields[2])
        except ValueError as e:
            raise InstanceFormatError(f"bad cost {fields[2]!r}", number) from e
        if c < 0:
            raise InstanceFormatError(f"negative cost {c}", number)
        if (i, j) in entries:
            raise InstanceFormatError(f"duplicate entry {i} {j}", number)
        entries[(i, j)] = c
    for role in ("origin", "source", "sink"):
        if role in header and not 1 <= header[role] <= n:
            raise InstanceFormatError(f"{role} {header[role]} outside 1..{n}")
    return TspInstance.from_entries(
        n,
        entries,
        large=header.get("large", large if large is not None else DEFAULT_LARGE),
        origin=header.get("origin", 1),
        source=header.get("source"),
        sink=header.get("sink"),
    )


def load_tsp_instance(path: Path, large: int | None = None) -> TspInstance:
    """Load an instance file.

    Format: ``n=<int>`` first, optional ``large=``/``origin=``/``source=``/
    ``sink=`` directives, then ``<i> <j> <cost>`` lines; ``#`` starts a
    comment. Unlisted off-diagonal arcs cost LARGE.
    """
    with open(path, encoding="utf-8") as f:
        t = parse_tsp_instance(f, large)
    logger.info(f"Loaded {t.n}-node instance from {path}")
    return t


def tsp_instance_lines(t: TspInstance, timestamp: bool = False) -> list[str]:
    lines = [timestamp_header()] if timestamp else []
    lines += [f"n={t.n}", f"large={t.large}", f"origin={t.origin}"]
    if t.source is not None:
        lines.append(f"source={t.source}")
    if t.sink is not None:
        lines.append(f"sink={t.sink}")
    lines += [f"{i} {j} {c}" for (i, j), c in sorted(t.listed_entries().items())]
    return lines


def save_tsp_instance(t: TspInstance, path: Path, timestamp: bool = False) -> Path:
    """Write an instance in the format ``load_tsp_instance`` reads."""
    return write_lines_atomic(path, tsp_instance_lines(t, timestamp))


def parse_hcp_instance(lines: Iterable[str]) -> HcpInstance:
    header, body = _parse_header(lines, {"n", "origin", "source", "sink"})
    n = header["n"]
    arcs: set[tuple[int, int]] = set()
    for number, fields in body:
        if len(fields) != 2:
            raise InstanceFormatError("expected '<i> <j>'", number)
        i, j = _node(fields[0], n, number), _node(fields[1], n, number)
        if i == j:
            raise InstanceFormatError(f"self-loop {i} {j}", number)
        if (i, j) in arcs:
            raise InstanceFormatError(f"duplicate arc {i} {j}", number)
        arcs.add((i, j))
    return HcpInstance(
        n=n,
        arcs=frozenset(arcs),
        origin=header.get("origin", 1),
        source=header.get("source"),
        sink=header.get("sink"),
    )


def load_hcp_instance(path: Path) -> HcpInstance:
    """Load a graph file: ``n=<int>``, optional role directives, ``<i> <j>`` arcs."""
    with open(path, encoding="utf-8") as f:
        return parse_hcp_instance(f)


def save_hcp_instance(h: HcpInstance, path: Path) -> Path:
    lines = [f"n={h.n}", f"origin={h.origin}"]
    if h.source is not None:
        lines.append(f"source={h.source}")
    if h.sink is not None:
        lines.append(f"sink={h.sink}")
    lines += [f"{i} {j}" for i, j in sorted(h.arcs)]
    return write_lines_atomic(path, lines)

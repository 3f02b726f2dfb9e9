import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refseg.embeddings import (
    EmbeddingTable,
    cosine_similarity,
    nearest_neighbors,
    parse_embedding_file,
    write_embedding_file,
)
from refseg.errors import (
    DuplicateToken,
    EmptyFile,
    EmptyToken,
    InconsistentDimension,
    KTooLarge,
    LengthMismatch,
    MalformedNumber,
    UnknownToken,
)


def parse(text):
    return parse_embedding_file(io.StringIO(text))


def test_parse_single_line():
    t = parse("cat 0.1 -0.2 0.3\n")
    assert t.dimension == 3
    assert t.lookup("cat").tolist() == [0.1, -0.2, 0.3]


def test_inconsistent_dimension():
    with pytest.raises(InconsistentDimension):
        parse("a 1 0\nb 0 1 1\n")


def test_fallback_is_mean():
    t = parse("a 1 0\nb 0 1\n")
    assert t.fallback.tolist() == [0.5, 0.5]
    assert t.lookup("dog").tolist() == [0.5, 0.5]


def test_empty_token_lookup():
    t = parse("a 1 0\n")
    with pytest.raises(EmptyToken):
        t.lookup("")


@pytest.mark.parametrize(
    "text, exc",
    [
        ("", EmptyFile),
        ("\n\n", EmptyFile),
        ("a 1 2\na 3 4\n", DuplicateToken),
        ("a 1 x\n", MalformedNumber),
        ("a 1 nan\n", MalformedNumber),
        ("a\n", InconsistentDimension),
    ],
)
def test_parse_errors(text, exc):
    with pytest.raises(exc):
        parse(text)


def test_file_order_kept():
    t = parse("z 1 0\na 0 1\nm 1 1\n")
    assert t.tokens == ("z", "a", "m")


def test_table_is_read_only():
    t = parse("a 1 0\nb 0 1\n")
    with pytest.raises(ValueError):
        t.vectors[0, 0] = 5.0


def test_constructor_checks():
    with pytest.raises(LengthMismatch):
        EmbeddingTable(["a"], np.zeros((2, 3)))


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert abs(cosine_similarity([1, 1], [1, 0]) - 1 / math.sqrt(2)) < 1e-9
    assert cosine_similarity([0, 0], [1, 0]) == 0.0
    with pytest.raises(LengthMismatch):
        cosine_similarity([1, 0], [1, 0, 0])


def test_nearest_neighbors_examples():
    t = EmbeddingTable(["a", "b", "c"], [[1, 0], [1, 0.01], [0, 1]])
    (tok, sim), = nearest_neighbors(t, "a", 1)
    assert tok == "b"
    assert abs(sim - 1 / math.sqrt(1 + 0.01**2)) < 1e-12
    assert [x for x, _ in nearest_neighbors(t, "a", 2)] == ["b", "c"]
    with pytest.raises(UnknownToken):
        nearest_neighbors(t, "zzz", 1)
    with pytest.raises(KTooLarge):
        nearest_neighbors(t, "a", 3)


def test_nearest_neighbors_ties_by_token():
    t = EmbeddingTable(["q", "d", "b", "c"], [[1, 0], [0, 1], [0, 1], [0, 1]])
    assert [x for x, _ in nearest_neighbors(t, "q", 3)] == ["b", "c", "d"]


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def tables(draw):
    d = draw(st.integers(1, 5))
    n = draw(st.integers(2, 8))
    toks = draw(st.lists(st.text("abcdefgh", min_size=1, max_size=4), min_size=n, max_size=n, unique=True))
    rows = draw(st.lists(st.lists(finite, min_size=d, max_size=d), min_size=n, max_size=n))
    return EmbeddingTable(toks, rows)


@settings(max_examples=60, deadline=None)
@given(tables())
def test_round_trip_is_exact(t):
    buf = io.StringIO()
    write_embedding_file(t, buf)
    back = parse(buf.getvalue())
    assert back.tokens == t.tokens
    assert back.vectors.tobytes() == t.vectors.tobytes()


@settings(max_examples=60, deadline=None)
@given(tables(), st.data())
def test_neighbors_match_brute_force(t, data):
    q = data.draw(st.sampled_from(t.tokens))
    k = data.draw(st.integers(1, len(t) - 1))
    got = nearest_neighbors(t, q, k)
    brute = sorted(
        ((tok, cosine_similarity(t.lookup(q), t.lookup(tok))) for tok in t.tokens if tok != q),
        key=lambda p: (-p[1], p[0]),
    )
    assert [x for x, _ in got] == [x for x, _ in brute[:k]]
    for (_, s1), (_, s2) in zip(got, brute):
        assert abs(s1 - s2) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_cosine_in_range_and_symmetric(u, v):
    c = cosine_similarity(u, v)
    assert -1.0 <= c <= 1.0
    assert c == cosine_similarity(v, u)

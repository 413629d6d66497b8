import importlib

import pytest
from hypothesis import given, settings, strategies as st

from chatnct import _kernels_py as py
from chatnct import kernels
from oracles import levenshtein

compiled = pytest.importorskip("chatnct._kernels")
seqs = st.lists(st.integers(0, 4), max_size=9)


def test_backend_selection(monkeypatch):
    assert kernels.BACKEND == "compiled"
    monkeypatch.setenv("CHATNCT_PURE_PYTHON", "1")
    try:
        assert importlib.reload(kernels).BACKEND == "python"
    finally:
        monkeypatch.delenv("CHATNCT_PURE_PYTHON")
        importlib.reload(kernels)


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_edit_distance_agrees(a, b):
    assert compiled.edit_distance(a, b) == py.edit_distance(a, b) == levenshtein(a, b)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, st.integers(1, 10))
def test_greedy_shift_search_agrees(a, b, dist):
    assert compiled.shift_search(a, b, dist, dist) == py.shift_search(a, b, dist, dist)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 4), max_size=7))
def test_exact_shift_search_agrees(a, b):
    assert compiled.exact_shift_search(a, b) == py.exact_shift_search(a, b)

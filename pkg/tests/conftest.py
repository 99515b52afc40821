import os
import sys

import numpy as np
import pytest

# Ensure project root (one level up from tests/) is on sys.path
ROOT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from graph_io import GraphDataset  # noqa: E402
from src.settings import ModelSettings, PreprocessSettings  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_settings():
    """Tiny model, dropout off so forward passes are deterministic."""
    return ModelSettings(
        hidden_size=8,
        heads=2,
        depth=1,
        intermediate_size=8,
        hidden_dropout=0.0,
        attention_dropout=0.0,
        weight_decay=0.0,
        chunk_size=64,
    )


@pytest.fixture
def preprocess_settings():
    return PreprocessSettings(alpha=0.15, wl_iterations=2, hop_cap=20, intimacy_method="dense")


@pytest.fixture
def path_graph():
    return GraphDataset.from_arrays("path", np.eye(5), [(0, 1), (1, 2), (2, 3), (3, 4)])


@pytest.fixture
def triangle_graph():
    return GraphDataset.from_arrays("triangle", np.ones((3, 2)), [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def star_graph():
    return GraphDataset.from_arrays("star", np.eye(5), [(0, 1), (0, 2), (0, 3), (0, 4)])


def make_labeled_graph(graph_id="toy", n=30, feature_dim=6, num_classes=3, seed=0, extra_edges=20):
    """Ring plus random chords; labels follow the ring position so features carry signal."""
    gen = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    features = gen.normal(scale=0.1, size=(n, feature_dim))
    features[np.arange(n), labels] += 1.0
    ring = [(i, (i + 1) % n) for i in range(n)]
    chords = [tuple(pair) for pair in gen.integers(0, n, size=(extra_edges, 2))]
    order = np.arange(n)
    splits = {"train": order[: n // 2], "val": order[n // 2: 2 * n // 3], "test": order[2 * n // 3:]}
    return GraphDataset.from_arrays(graph_id, features, ring + chords, labels, num_classes, splits)


@pytest.fixture
def labeled_graph():
    return make_labeled_graph()


@pytest.fixture
def citation_files(tmp_path):
    """Tiny dataset in the raw `.content` / `.cites` layout."""
    content = tmp_path / "toy.content"
    cites = tmp_path / "toy.cites"
    content.write_text(
        "\n".join(
            [
                "p1 1 0 0 AI",
                "p2 0 1 0 DB",
                "p3 0 0 1 AI",
                "p4 1 1 0 ML",
                "",
            ]
        ),
        encoding="utf-8",
    )
    cites.write_text("p1 p2\np2 p3\np3 p1\np4 p1\nghost p2\n", encoding="utf-8")
    return content, cites

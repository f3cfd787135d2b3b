"""Regenerate the committed format fixtures: python3 tests/fixtures/make_fixtures.py"""

from fractions import Fraction
from pathlib import Path

import numpy as np

from mmm.kmeans import Codebook, TrainMeta
from mmm.multilayer import LayerWeights, MultiLayerCodec, TokenGrid
from mmm.rvq import ResidualStack
from mmm.store import save_codec, save_tokens
from mmm.tensor_io import FeatureSequence, LayeredFeatures, write_feature_file

HERE = Path(__file__).parent


def fixture_features():
    data = np.array([[1.0, -2.0], [0.5, 4.25]], dtype=np.float32)
    return LayeredFeatures({3: FeatureSequence(data, Fraction(100, 3))}, "fixture")


def fixture_codec():
    stage1 = Codebook(
        np.array([[0.5, -1.0], [2.0, 0.25]], dtype=np.float32),
        1.5,
        TrainMeta(7, 4, True, (3.0, 1.5)),
    )
    stage2 = Codebook(
        np.array([[0.0, 0.125], [-0.5, 0.0], [1.0, 1.0]], dtype=np.float32),
        0.75,
        TrainMeta(8, 2, False, (1.0, 0.75)),
    )
    stack = ResidualStack(3, (stage1, stage2))
    return MultiLayerCodec(
        {3: stack}, (3,), Fraction(50), LayerWeights((3,), [0.25]), {"note": "fixture"}
    )


def fixture_grid():
    ids = np.array([[1, 299], [0, 0], [1, 7]])
    return TokenGrid("fx", ((3, 1, 2), (3, 2, 300)), ids)


if __name__ == "__main__":
    write_feature_file(fixture_features(), HERE / "fixture.mmf")
    save_codec(fixture_codec(), HERE / "fixture.mmmc")
    save_tokens(fixture_grid(), HERE / "fixture.mmmt")

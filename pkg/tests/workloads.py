"""Seeded workloads shared by the unit suites and the acceptance run."""

from fractions import Fraction

import numpy as np

from mmm.kmeans import Codebook, TrainConfig, TrainMeta
from mmm.multilayer import (
    LayerWeights,
    MultiLayerCodec,
    TokenGrid,
    learn_layer_weights,
    mmm_encode,
    mmm_train,
    select_top_layers,
)
from mmm.rvq import ResidualStack, decode_array
from mmm.tensor_io import SyntheticSpec, generate_synthetic


def planted_layer_trial(seed, planted=None, steps=300, lr=0.1):
    """Train a 3-layer codec, regress onto one layer's decoded features, return (planted, argmax)."""
    planted = seed % 3 if planted is None else planted
    spec = SyntheticSpec(n_components=8, D=8, T=50, n_utterances=6, n_layers=3, noise_sigma=0.3)
    ds = generate_synthetic(spec, seed)
    codec = mmm_train(ds, [0, 1, 2], 2, TrainConfig(K=8, seed=seed), fraction=1.0, seed=seed)
    targets = {}
    for lf in ds:
        grid = mmm_encode(codec, lf)
        targets[lf.utterance_id] = decode_array(codec.stacks[planted], grid.layer_ids(planted))
    lw = learn_layer_weights(ds, codec, None, targets, steps=steps, lr=lr, seed=seed)
    return planted, select_top_layers(lw, 1)[0]


def random_probe_instance(seed, L=3, N=20, E=4, E_out=3):
    r = np.random.default_rng(seed)
    return (
        r.standard_normal(L),
        r.standard_normal((E, E_out)),
        r.standard_normal(E_out),
        r.standard_normal((L, N, E)),
        r.standard_normal((N, E_out)),
    )


def finite_difference_logits(loss_fn, logits, h=1e-4):
    grad = np.zeros_like(logits)
    for i in range(len(logits)):
        up, down = logits.copy(), logits.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(down)) / (2 * h)
    return grad


def random_codec(r, max_layers=3, max_M=3, max_K=6, max_D=4):
    """A structurally random codec, including odd floats, histories and weights."""
    n_layers = int(r.integers(1, max_layers + 1))
    layers = sorted(r.choice(65536, n_layers, replace=False).tolist())
    stacks = {}
    for l in layers:
        D = int(r.integers(1, max_D + 1))
        books = []
        for _ in range(int(r.integers(1, max_M + 1))):
            K = int(r.integers(1, max_K + 1))
            cents = (r.standard_normal((K, D)) * 10.0 ** r.integers(-30, 30)).astype(np.float32)
            hist = tuple(r.uniform(0, 1e6, int(r.integers(0, 4))).tolist())
            meta = TrainMeta(int(r.integers(-2**63, 2**63 - 1)), int(r.integers(0, 1000)),
                             bool(r.integers(2)), hist)
            books.append(Codebook(cents, float(r.uniform(0, 1e6)), meta))
        stacks[l] = ResidualStack(l, tuple(books))
    selected = tuple(r.permutation(layers).tolist())
    weights = None
    if r.integers(2):
        weights = LayerWeights(selected, r.standard_normal(len(selected)))
    rate = Fraction(int(r.integers(1, 2**32)), int(r.integers(1, 2**32)))
    prov = {"seed": int(r.integers(0, 2**31)), "fraction": repr(float(r.uniform())),
            "tag": "été", "nested": {"a": [1, 2.5, None]}}
    return MultiLayerCodec(stacks, selected, rate, weights, prov)


def random_grid(r, max_streams=6, max_T=50):
    n = int(r.integers(1, max_streams + 1))
    streams = []
    for s in range(n):
        K = int(r.choice([1, 2, 255, 256, 257, 65536, 65537, 2**32 - 1]))
        streams.append((int(r.integers(0, 65536)), s + 1, K))
    T = int(r.integers(1, max_T + 1))
    ids = np.stack([r.integers(0, K, T) for _, _, K in streams], axis=1)
    uid = "utt-" + "".join(chr(int(c)) for c in r.integers(0x41, 0x7A, int(r.integers(0, 12))))
    return TokenGrid(uid, tuple(streams), ids)

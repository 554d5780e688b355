import functools
import os
import shutil
import tempfile
from contextlib import contextmanager

import numpy as np

from hapcac import tensor as T
from hapcac.core import synthesize_cloud
from hapcac.lod import CodingUnit
from hapcac.neighborhood import NeighborhoodParams, assemble_bundles
from hapcac.pointcloud import AttributeKind, write_ply

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def random_slice(n, seed=0, side=32, channels=1, top=256):
    """
    `n` distinct voxels of a `side`^3 cube in Hilbert-agnostic order, with
    random attributes below `top`.
    """
    rng = np.random.default_rng(seed)
    flat = rng.choice(side ** 3, size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, (side, side, side)), axis=1).astype(np.int64)
    attrs = rng.integers(0, top, size=(n, channels))
    return coords, attrs


def make_bundle(targets=4, context=12, params=None, channels=1, seed=0, max_attri=None):
    params = params or NeighborhoodParams(k=6, k1=3, k2=3)
    max_attri = max_attri or (256,) * channels
    coords, attrs = random_slice(context + targets, seed=seed, channels=channels)
    unit = CodingUnit(2, 0, np.arange(context, context + targets), context=np.arange(context))
    bundle = assemble_bundles(unit, coords, attrs, params, max_attri)
    return bundle, attrs[context:].astype(np.float64)


##
# Gradient checks
##


def relative_error(a, b):
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def analytic_grads(fn, arrays):
    params = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*params)
    T.backward(tape, loss)
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


def numeric_grads(fn, arrays, eps=1e-6):
    grads = []
    for i, array in enumerate(arrays):
        grad = np.zeros(array.shape)
        for index in np.ndindex(array.shape):
            shifted = [a.copy() for a in arrays]
            shifted[i][index] += eps
            up = float(fn(*[T.Tensor(a) for a in shifted]).data)
            shifted[i][index] -= 2 * eps
            down = float(fn(*[T.Tensor(a) for a in shifted]).data)
            grad[index] = (up - down) / (2 * eps)
        grads.append(grad)
    return grads


def parameter_grad_pairs(loss_fn, params, samples=6, eps=1e-6, seed=0):
    """
    (backprop, central difference) gradients for a sample of entries of
    every parameter in `params`, keyed by parameter name.

    `loss_fn()` must rebuild the loss from the parameters' current data.
    """
    for p in params:
        p.zero_grad()
    with T.Tape() as tape:
        loss = loss_fn()
    T.backward(tape, loss)

    rng = np.random.default_rng(seed)
    pairs = {}
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = rng.choice(p.size, size=min(samples, p.size), replace=False)
        got, expected = [], []
        for position in flat:
            index = np.unravel_index(position, p.shape)
            original = p.data[index]
            p.data[index] = original + eps
            up = float(loss_fn().data)
            p.data[index] = original - eps
            down = float(loss_fn().data)
            p.data[index] = original
            got.append(analytic[index])
            expected.append((up - down) / (2 * eps))
        pairs[p.name] = (np.array(got), np.array(expected))
    return pairs


def parameter_grad_errors(loss_fn, params, **kwargs):
    pairs = parameter_grad_pairs(loss_fn, params, **kwargs)
    return {name: relative_error(*pair) for name, pair in pairs.items()}


##
# Corpora
##


@contextmanager
def temporary_directory():
    path = tempfile.mkdtemp(prefix="hapcac-tests-")
    try:
        yield path
    finally:
        shutil.rmtree(path, ignore_errors=True)


def write_corpus(directory, clouds):
    paths = []
    for name, pc in clouds:
        path = os.path.join(directory, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as f:
            f.write(write_ply(pc))
        paths.append(path)
    return paths


def synthetic_corpus(count=2, n=300, geom_bits=6, kind=AttributeKind.REFLECTANCE, seed=0):
    return [
        (
            "cloud_{}.ply".format(i),
            synthesize_cloud(n, geom_bits=geom_bits, kind=kind, seed=seed + i),
        )
        for i in range(count)
    ]


def corpus_session(count=2, n=300, kind=AttributeKind.REFLECTANCE):
    """
    Decorator running a test inside a temporary directory holding a small
    synthetic PLY corpus under `corpus/`.

    The test receives `workdir` and `corpus` keyword arguments.
    """

    def decorator(function):
        @functools.wraps(function)
        def wrapper(*args, **kwargs):
            with temporary_directory() as workdir:
                corpus = os.path.join(workdir, "corpus")
                write_corpus(corpus, synthetic_corpus(count=count, n=n, kind=kind))
                kwargs["workdir"] = workdir
                kwargs["corpus"] = corpus
                return function(*args, **kwargs)

        return wrapper

    return decorator

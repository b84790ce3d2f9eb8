"""Finite-difference cases shared by the autodiff tests and the acceptance suite."""

import numpy as np

from sentvec import autodiff as ad
from sentvec.autodiff import Tensor, grad_check


def p64(rng, *shape, name=None):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


# one graph builder per differentiable op; each returns a scalar
def _op_cases(rng):
    a34 = rng.standard_normal((3, 4))
    t = rng.integers(5, size=3)
    ids = rng.integers(6, size=(2, 3))
    w = rng.standard_normal((2, 3, 4))
    return {
        "matmul": ({"a": (3, 4), "b": (4, 2)}, lambda p: ad.sum(ad.mul(ad.matmul(p["a"], p["b"]), Tensor(rng_fixed(3, 2))))),
        "batched_matmul": ({"a": (2, 3, 4), "b": (2, 4, 5)},
                           lambda p: ad.sum(ad.mul(ad.matmul(p["a"], p["b"]), Tensor(rng_fixed(2, 3, 5))))),
        "add": ({"a": (3, 4), "b": (4,)}, lambda p: ad.sum(ad.mul(ad.add(p["a"], p["b"]), Tensor(a34)))),
        "sub": ({"a": (3, 4), "b": (3, 4)}, lambda p: ad.sum(ad.mul(ad.sub(p["a"], p["b"]), Tensor(a34)))),
        "mul": ({"a": (3, 4), "b": (3, 4)}, lambda p: ad.sum(ad.mul(p["a"], p["b"]))),
        "scale": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(ad.scale(p["a"], -1.7), Tensor(a34)))),
        "gelu": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(ad.gelu(p["a"]), Tensor(a34)))),
        "softmax": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(ad.softmax(p["a"], axis=0), Tensor(a34)))),
        "layernorm": ({"a": (3, 4), "g": (4,), "b": (4,)},
                      lambda p: ad.sum(ad.mul(ad.layernorm(p["a"], p["g"], p["b"]), Tensor(a34)))),
        "embedding_gather": ({"e": (6, 4)}, lambda p: ad.sum(ad.mul(ad.embedding_gather(p["e"], ids), Tensor(w)))),
        "cross_entropy": ({"a": (3, 5)}, lambda p: ad.cross_entropy(p["a"], t, ignore_id=None)),
        "mean": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(ad.mean(p["a"], axis=1), Tensor(a34[:, 0])))),
        "max": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(ad.max(p["a"], axis=1), Tensor(a34[:, 0])))),
        "concat": ({"a": (3, 2), "b": (3, 2)},
                   lambda p: ad.sum(ad.mul(ad.concat([p["a"], p["b"]], axis=1), Tensor(a34)))),
        "sum": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(ad.sum(p["a"], axis=0), Tensor(a34[0])))),
        "reshape_transpose": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(
            ad.transpose(ad.reshape(p["a"], (2, 6)), (1, 0)), Tensor(a34.reshape(6, 2))))),
        "select": ({"a": (3, 4)}, lambda p: ad.sum(ad.mul(ad.select(p["a"], (np.array([0, 2]), np.array([1, 3]))),
                                                          Tensor(a34[0, :2])))),
    }


def rng_fixed(*shape):
    return np.random.default_rng(99).standard_normal(shape)


OP_NAMES = sorted(_op_cases(np.random.default_rng(0)))


def check_op(name, seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    shapes, f = _op_cases(rng)[name]
    params = {k: p64(rng, *s) for k, s in shapes.items()}
    if name == "max":
        # keep maxima separated by more than the probe step
        params["a"].data += np.arange(4) * 0.5
    return grad_check(f, params, step=1e-4, tol=tol)

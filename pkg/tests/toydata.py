"""Small cached toy corpora and configs shared by the trainer, CLI and acceptance tests."""
import dataclasses
from functools import lru_cache

from mcbeam.config import preset
from mcbeam.toy import ToySpec, make_multi, make_single

SHORT = ToySpec(n_samples=1600, min_len=1, max_len=1)


@lru_cache(maxsize=None)
def short_multi(n=8, seed=0):
    return tuple(make_multi(n, seed, SHORT, prefix=f"m{seed}_"))


@lru_cache(maxsize=None)
def short_single(n=8, seed=0):
    return tuple(make_single(n, seed, SHORT, prefix=f"s{seed}_"))


@lru_cache(maxsize=None)
def multi(n, seed, prefix="toy"):
    return tuple(make_multi(n, seed, prefix=prefix))


@lru_cache(maxsize=None)
def single(n, seed, prefix="mono"):
    return tuple(make_single(n, seed, prefix=prefix))


def toy_cfg(**train):
    base = preset("toy")
    return dataclasses.replace(base, train=dataclasses.replace(base.train, **train))

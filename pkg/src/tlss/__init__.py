"""Two-stage self-supervised learning on long-tailed vector data.

Pipeline: synthetic long-tailed data generation, OOD-assisted contrastive
pretraining of an MLP encoder, guided distillation into a second encoder,
and a frozen-encoder evaluation harness (linear/few-shot probes, group
accuracies, cluster-quality indices).

Submodules are imported lazily so that the CLI can cap BLAS thread counts
(TLSS_THREADS) before numpy first loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "cluster",
    "config",
    "data",
    "distill",
    "encoder",
    "errors",
    "evaluate",
    "knn",
    "pretrain",
    "rng",
    "tailness",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))

"""Crystal property prediction from periodic structure.

Short-range geometric message passing over a periodic radius graph is
combined with a long-range block built on lattice Fourier features, and
decoded either per property or through a mixture-of-experts multi-task
head.  Everything differentiable runs on the package's own reverse-mode
engine so gradients can be verified against finite differences.

Submodules are imported lazily so the command-line entry point can pin
thread counts before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "CrystalStructure": "lattice",
    "FrequencyIndex": "lattice",
    "ReciprocalBasis": "lattice",
    "cart_to_frac": "lattice",
    "enumerate_frequencies": "lattice",
    "frac_to_cart": "lattice",
    "reciprocal_basis": "lattice",
    "validate_structure": "lattice",
    "wrap_fractional": "lattice",
    "PeriodicEdge": "graph",
    "PeriodicGraph": "graph",
    "build_graph": "graph",
    "knn_radius": "graph",
    "ModelConfig": "model",
    "MoeConfig": "model",
    "forward": "model",
    "init_params": "model",
    "make_batch": "model",
    "prepare_structure": "model",
    "predict_structures": "model",
    "DatasetRecord": "data",
    "SplitSpec": "data",
    "load_dataset": "data",
    "save_dataset": "data",
    "split_dataset": "data",
    "Checkpoint": "checkpoint",
    "Normalization": "checkpoint",
    "load_checkpoint": "checkpoint",
    "save_checkpoint": "checkpoint",
    "TrainConfig": "training",
    "evaluate": "training",
    "masked_l1": "training",
    "train": "training",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

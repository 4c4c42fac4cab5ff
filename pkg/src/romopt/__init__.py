"""romopt: reduced-order surrogate modeling (PCA + neural nets) with
deterministic global optimization of the surrogate via MILP reformulations."""

__version__ = "0.1.0"

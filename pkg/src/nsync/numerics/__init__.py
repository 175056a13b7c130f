from nsync.numerics.adam import AdamState, adam_step
from nsync.numerics.autodiff import (
    GradVector,
    LayoutEntry,
    Node,
    ParamSet,
    backward,
    finite_difference_grad,
    flatten,
    leaf,
    make_layout,
)

__all__ = [
    "AdamState",
    "GradVector",
    "LayoutEntry",
    "Node",
    "ParamSet",
    "adam_step",
    "backward",
    "finite_difference_grad",
    "flatten",
    "leaf",
    "make_layout",
]

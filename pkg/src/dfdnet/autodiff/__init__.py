"""Minimal reverse-mode differentiable array engine."""

from dfdnet.autodiff.gradcheck import GradCheckReport, grad_check, min_pairwise_gap, tie_free_point
from dfdnet.autodiff.ops import (
    absolute,
    add,
    batch_norm,
    concat,
    conv2d,
    depthwise_filter,
    div,
    elementwise,
    fully_connected,
    global_avg_pool,
    index,
    mean,
    mul,
    pad2d,
    reduce,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_groups,
    square,
    stack,
    sub,
    sum_all,
    sum_axis,
)
from dfdnet.autodiff.tensor import (
    Node,
    Tensor,
    as_tensor,
    backward,
    check_finite,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    make_result,
    no_grad,
    set_default_dtype,
    topological_order,
)

__all__ = [name for name in dir() if not name.startswith("_")]

from .tensor import (
    PRIMITIVES,
    ParamSet,
    ShapeError,
    Tensor,
    add,
    apply_op,
    as_tensor,
    broadcast_to,
    concat,
    cross_entropy,
    enable_grad,
    grad,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad_axis,
    power,
    relu,
    reshape,
    row_normalize,
    scale,
    sigmoid,
    slice_axis,
    softmax,
    sub,
    tabs,
    transpose,
    tsum,
)
from .record import (
    ComputationRecord,
    RecordEntry,
    backward_grads,
    finite_diff_check,
    forward_eval,
    hypergradient,
    max_rel_error,
    numeric_grad,
    tracked_copy,
)

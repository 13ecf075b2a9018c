from .fragments import FragmentError, read_fragment, read_fragments, write_fragment, write_fragments
from .gradcheck import GradCheckReport, finite_diff_check, numeric_grad
from .tensor import *  # noqa: F401,F403
from .tensor import __all__ as _tensor_all
from .tensor import zero_grads

__all__ = list(_tensor_all) + [
    "FragmentError", "read_fragment", "read_fragments", "write_fragment", "write_fragments",
    "GradCheckReport", "finite_diff_check", "numeric_grad", "zero_grads",
]

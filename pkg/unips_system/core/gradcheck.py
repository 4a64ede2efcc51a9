# unips_system/core/gradcheck.py

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from unips_system.core.exceptions import GradientError
from unips_system.core.tensor import Tensor, backward, default_dtype, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradcheckResult:
    max_relative_error: float
    per_tensor: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)),
                1e-6)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / denom


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
              tolerance: float = 1e-3, names: Optional[Sequence[str]] = None) -> GradcheckResult:
    """
    Compare reverse-mode gradients of the scalar ``fn()`` against central differences.

    Evaluation runs in float64 so the finite difference measures the derivative
    rather than float32 round-off; tensors are restored to their dtype afterwards.
    """
    names = list(names) if names is not None else [t.name or f"tensor{i}" for i, t in enumerate(tensors)]
    original_dtypes = [t.data.dtype for t in tensors]
    result = GradcheckResult(max_relative_error=0.0, tolerance=tolerance)
    try:
        with default_dtype(np.float64):
            for t in tensors:
                t.data = t.data.astype(np.float64)
                t.grad = None
            loss = fn()
            if loss.size != 1:
                raise GradientError(f"gradcheck needs a scalar function, got shape {loss.shape}")
            backward(loss)
            analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

            with no_grad():
                for name, t, grad in zip(names, tensors, analytic):
                    numeric = np.zeros_like(t.data)
                    flat = t.data.reshape(-1)
                    for i in range(flat.size):
                        original = flat[i]
                        flat[i] = original + h
                        plus = fn().item()
                        flat[i] = original - h
                        minus = fn().item()
                        flat[i] = original
                        numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)
                    err = relative_error(grad, numeric)
                    result.per_tensor[name] = err
                    result.max_relative_error = max(result.max_relative_error, err)
    finally:
        for t, dtype in zip(tensors, original_dtypes):
            t.data = t.data.astype(dtype)
            t.grad = None
    logger.debug(f"gradcheck max relative error {result.max_relative_error:.3e} over {len(tensors)} tensors")
    return result

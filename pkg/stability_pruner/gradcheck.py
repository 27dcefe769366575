"""Central finite-difference check of ModelGraph.backward."""
import logging
from typing import Callable, Dict, Optional

import numpy as np

from stability_pruner.losses import total_loss
from stability_pruner.tensor import FLOAT64, Tensor, sub

logger = logging.getLogger(__name__)


def numeric_gradient(func: Callable[[], float], array: np.ndarray, step: float = 1e-5,
                     max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> Dict[int, float]:
    """(f(x+h) - f(x-h)) / 2h for entries of ``array``, perturbed in place.

    Returns {flat index: derivative}; with ``max_entries`` a random subset is sampled.
    """
    flat = array.reshape(-1)
    indices = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        indices = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    result = {}
    for i in indices:
        original = flat[i]
        flat[i] = original + step
        plus = func()
        flat[i] = original - step
        minus = func()
        flat[i] = original
        result[int(i)] = (plus - minus) / (2 * step)
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a|| + ||n||, floor).

    Norm-wise so single near-zero entries do not dominate; the floor keeps
    gradients that are analytically zero (a conv bias feeding batchnorm)
    from turning round-off into a large ratio.
    """
    denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
    difference = sub(Tensor(analytic, FLOAT64), Tensor(numeric, FLOAT64))
    return float(np.linalg.norm(difference.data)) / denom


def check_model_gradients(model, batch: np.ndarray, labels: np.ndarray, lam: float = 0.0,
                          aux_form: str = "abs", step: float = 1e-5,
                          max_entries: Optional[int] = 64, seed: int = 0) -> Dict[str, float]:
    """Relative error between analytic and numeric gradients, per parameter.

    The model is converted to float64 first; the caller's model is untouched.
    """
    model = model.astype(FLOAT64)
    batch = np.asarray(batch, dtype=FLOAT64)
    _, cache = model.forward(batch, mode="train")
    _, grads = model.backward(cache, labels, lam, aux_form)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, param in model.params.items():
        numeric = numeric_gradient(lambda: total_loss(model, batch, labels, lam, aux_form),
                                   param, step, max_entries, rng)
        idx = np.fromiter(numeric.keys(), dtype=np.int64)
        errors[name] = relative_error(grads[name].reshape(-1)[idx], np.fromiter(numeric.values(), dtype=FLOAT64))
        logger.debug("gradcheck %s: relative error %.3e over %d entries", name, errors[name], len(idx))
    return errors

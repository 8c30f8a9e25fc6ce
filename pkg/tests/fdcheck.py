"""Central finite differences for gradient checks."""
import torch


def fd_grad(fn, tensor: torch.Tensor, eps: float = 1e-6, indices=None) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. entries of ``tensor`` (in place)."""
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = torch.zeros(len(list(idx)) if indices is not None else flat.numel(), dtype=torch.float64)
    for k, i in enumerate(idx if indices is not None else range(flat.numel())):
        orig = flat[i].item()
        flat[i] = orig + eps
        with torch.no_grad():
            up = float(fn())
        flat[i] = orig - eps
        with torch.no_grad():
            down = float(fn())
        flat[i] = orig
        out[k] = (up - down) / (2 * eps)
    return out


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    analytic, numeric = analytic.double().reshape(-1), numeric.double().reshape(-1)
    return float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-30))

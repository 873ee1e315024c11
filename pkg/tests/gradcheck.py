"""Central finite differences against autograd, shared by the gradient tests."""
import torch


def finite_difference_check(model, loss_fn, eps=1e-6, names=None):
    """Relative error ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||) over the chosen parameters.

    ``model`` must be float64; ``loss_fn()`` recomputes the scalar loss from
    scratch on every call.
    """
    params = [(n, p) for n, p in model.named_parameters() if names is None or n in names]
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    auto = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).flatten() for _, p in params
    ])
    numeric = []
    with torch.no_grad():
        for _, p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(auto.norm().item(), numeric.norm().item(), 1e-300)
    return (auto - numeric).norm().item() / scale, auto, numeric

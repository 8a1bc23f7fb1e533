"""A ten-parameter eliminate/add/critic/probe stand-in for finite-difference checks."""
import numpy as np
import torch

from posegan import losses as L

torch_dtype = torch.float64


class ToyModel:
    # G: a, b (eliminate) and c, d (add); D: w1, w2 (realism) and e1, e2 (pose head); P: f1, f2
    names = ("a", "b", "c", "d", "w1", "w2", "e1", "e2", "f1", "f2")
    groups = {"G": ("a", "b", "c", "d"), "D": ("w1", "w2", "e1", "e2"), "D_src": ("w1", "w2"), "P": ("f1", "f2")}

    def __init__(self, seed=0):
        g = np.random.default_rng(seed)
        self.params = {n: torch.tensor(g.uniform(0.3, 0.9), dtype=torch_dtype, requires_grad=True)
                       for n in self.names}

    def eliminate(self, x):
        p = self.params
        return torch.tanh(p["a"] * x + p["b"])

    def add(self, xr, m):
        p = self.params
        return torch.tanh(p["c"] * xr + p["d"] * m.view(-1, 1, 1, 1))

    def G(self, x, m):
        return self.add(self.eliminate(x), m)

    def D_src(self, y):
        p = self.params
        return p["w1"] * torch.tanh(p["w2"] * y).sum(dim=(1, 2, 3))

    def D_cls(self, y):
        p = self.params
        s = y.mean(dim=(1, 2, 3))
        return torch.stack([p["e1"] * s, p["e2"] * s, torch.zeros_like(s)], dim=1)

    def P(self, xr):
        p = self.params
        s = xr.mean(dim=(1, 2, 3))
        return torch.stack([p["f1"] * s, p["f2"] * s ** 2, -s], dim=1)


def toy_batch(seed=1):
    g = np.random.default_rng(seed)
    x = torch.tensor(g.uniform(-1, 1, (3, 3, 2, 2)), dtype=torch_dtype)
    org = torch.tensor([0, 1, 2])
    trg = torch.tensor([2, 0, 1])
    alpha = torch.tensor(g.uniform(0, 1, (3, 1, 1, 1)), dtype=torch_dtype)
    return x, org, trg, alpha


def loss_G(model, batch, w=L.LossWeights()):
    x, org, trg, _ = batch
    m_t, m_o = trg.to(torch_dtype) / 2, org.to(torch_dtype) / 2
    xr = model.eliminate(x)
    fake = model.add(xr, m_t)
    parts = {"adv_g": L.adv_g(model.D_src(fake)), "cls": L.cls_fake(model.D_cls(fake), trg),
             "rec": L.reconstruction(x, model.G(fake, m_o)), "pose_g": L.pose_elim_g(model.P(xr))}
    return L.total_g(w, parts)


def loss_D(model, batch, w=L.LossWeights()):
    x, org, trg, alpha = batch
    fake = model.G(x, trg.to(torch_dtype) / 2).detach()
    parts = {"adv_d": L.adv_d(model.D_src(x), model.D_src(fake)), "cls_real": L.cls_real(model.D_cls(x), org),
             "gp": L.gradient_penalty(model.D_src, x, fake, alpha=alpha)}
    return L.total_d(w, parts)


def loss_GP(model, batch):
    x, _, trg, alpha = batch
    fake = model.G(x, trg.to(torch_dtype) / 2).detach()
    return L.gradient_penalty(model.D_src, x, fake, alpha=alpha)


def loss_P(model, batch):
    x, org, _, _ = batch
    return L.total_p({"pose_p": L.pose_elim_p(model.P(model.eliminate(x).detach()), org)})


def max_relative_error(model, loss_fn, batch, group, eps=1e-6):
    """Largest |analytic - central difference| / max(|analytic|, |numeric|, 1e-8) over ``group`` params."""
    params = [model.params[n] for n in ToyModel.groups[group]]
    for p in model.params.values():
        p.grad = None
    loss = loss_fn(model, batch)
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        orig = p.item()
        values = []
        for delta in (eps, -eps):
            with torch.no_grad():
                p.fill_(orig + delta)
            values.append(loss_fn(model, batch).item())
        with torch.no_grad():
            p.fill_(orig)
        num = (values[0] - values[1]) / (2 * eps)
        worst = max(worst, abs(g.item() - num) / max(abs(g.item()), abs(num), 1e-8))
    return worst

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from maskdiff import datapipe
from maskdiff.schedules import Schedule


@pytest.fixture(scope="session")
def schedule() -> Schedule:
    return Schedule()


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory) -> datapipe.Manifest:
    out = tmp_path_factory.mktemp("toydata")
    return datapipe.make_toy_dataset(12, 32, 4, seed=11, out_dir=out)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def overfit_diffusion(schedule):
    """A diffusion model overfit on one toy image; shared by the slow checks.

    Returns (model, x0, loss_estimate) where loss_estimate is a Monte Carlo
    estimate of the converged training loss over fresh noise/timestep draws.
    """
    from maskdiff import denoiser as dn
    from maskdiff.sampler import training_loss

    rng = np.random.default_rng([5, 1])
    img, _, _ = datapipe.generate_toy_pair(16, 4, rng)
    x0 = torch.from_numpy(img).permute(2, 0, 1)[None].float()

    torch.manual_seed(0)
    cfg = dn.DenoiserConfig(resolution=16, base_width=32, depth=2, num_classes=4,
                            cond_dropout_p=0.0, parameterization="v")
    model = dn.Denoiser(cfg)
    steps = 3000
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=2e-4)
    gen = torch.Generator().manual_seed(1)
    batch = x0.repeat(8, 1, 1, 1)
    bcond = dn.empty_bundle(8, cfg)
    for _ in range(steps):
        opt.zero_grad()
        loss = training_loss(model, schedule, batch, bcond, gen)
        loss.backward()
        opt.step()
        lr_sched.step()
    model.eval()
    eval_gen = torch.Generator().manual_seed(2)
    with torch.no_grad():
        vals = [float(training_loss(model, schedule, batch, bcond, eval_gen).detach()) for _ in range(150)]
    return model, x0, float(np.mean(vals))

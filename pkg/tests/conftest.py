import numpy as np
import pytest

from crsfuse import autodiff as ad
from crsfuse.data import generate_synthetic


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    """Relative error; ``floor`` keeps exactly-zero gradients (e.g. key biases,
    which softmax shift invariance cancels) from dividing round-off by round-off."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(loss_fn, params, rng, h=1e-3, per_tensor=True):
    """Compare reverse-mode gradients with central differences along random unit directions.

    ``loss_fn()`` must rebuild the loss from the current parameter data. With
    ``per_tensor`` each parameter tensor gets its own direction (so a wrong
    gradient in any single tensor is caught); a final check perturbs all at once.
    Returns the list of relative errors.
    """
    with ad.Tape() as tape:
        loss = loss_fn()
        grads = tape.backward(loss)
    grads = [grads.get(p, np.zeros_like(p.data)) for p in params]
    groups = [[k] for k in range(len(params))] if per_tensor else []
    groups.append(list(range(len(params))))
    errors = []
    for group in groups:
        dirs = {k: rng.standard_normal(params[k].shape) for k in group}
        # unit total length, so the step is h in parameter space whatever the tensor sizes
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in dirs.values()))
        dirs = {k: v / norm for k, v in dirs.items()}
        analytic = sum(float(np.sum(grads[k] * dirs[k])) for k in group)
        for k in group:
            params[k].data += h * dirs[k]
        up = loss_fn().item()
        for k in group:
            params[k].data -= 2 * h * dirs[k]
        down = loss_fn().item()
        for k in group:
            params[k].data += h * dirs[k]
        errors.append(rel_err(analytic, (up - down) / (2 * h)))
    return errors


def elementwise_check(loss_fn, params, h=1e-3):
    """Full central-difference gradient for every coordinate (small tensors only)."""
    with ad.Tape() as tape:
        grads = tape.backward(loss_fn())
    worst = 0.0
    for p in params:
        g = grads.get(p, np.zeros_like(p.data))
        num = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p.data[idx]
            p.data[idx] = old + h
            up = loss_fn().item()
            p.data[idx] = old - h
            down = loss_fn().item()
            p.data[idx] = old
            num[idx] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(g), np.linalg.norm(num), 1e-10)
        worst = max(worst, float(np.linalg.norm(g - num) / denom))
    return worst


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def std_ds():
    """The standard synthetic set: 200 users, 500 items, 40 attributes."""
    return generate_synthetic(0, num_users=200, num_items=500, num_attrs=40, attrs_per_item=4,
                              sessions_per_user=8, history_per_user=12)


def expected_pretrain_loss(model, catalog, seqs, cfg, draws=8):
    """Dropout-free joint loss averaged over ``draws`` fixed masking/corruption draws."""
    from crsfuse.negsampler import NegativePolicy
    from crsfuse.pretrain import pretrain_epoch
    return float(np.mean([pretrain_epoch(model, catalog, seqs, NegativePolicy("uniform"), cfg,
                                         None, np.random.default_rng(1000 + k))["total"]
                          for k in range(draws)]))


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(3, num_users=30, num_items=150, num_attrs=12, attrs_per_item=3,
                              sessions_per_user=4, history_per_user=6)


def head_problems(seed: int, dim: int = 8, max_len: int = 6):
    """Tiny random instances of the three loss heads (scorer, MIP, SAD).

    Returns ``({name: loss_fn}, params)``. Weights are drawn with std 0.5 so
    the gradients are far from the near-zero regime of the default init.
    Call inside ``precision(np.float64)``.
    """
    from crsfuse.data import Catalog
    from crsfuse.model import DualEncoder, ModelConfig, pad_batch
    from crsfuse.negsampler import NegativePolicy
    from crsfuse.pretrain import build_mip, build_sad, mip_loss, pairwise_loss, sad_loss

    rng = np.random.default_rng(seed)
    n_items, n_attrs = 12, 6
    cfg = ModelConfig(dim=dim, layers=1, heads=2, max_items=max_len, max_attrs=4, dropout=0.0)
    model = DualEncoder(cfg, n_items, n_attrs, seed=seed)
    for p in model.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    sets = [tuple(sorted(rng.choice(n_attrs, rng.integers(1, 4), replace=False) + 1))
            for _ in range(n_items)]
    cat = Catalog([(), ()] + sets, [str(k) for k in range(n_items)],
                  [str(k) for k in range(n_attrs)])
    seqs = [list(rng.integers(2, n_items + 2, size=rng.integers(1, max_len + 1)))
            for _ in range(3)]
    ids = pad_batch(seqs, max_len)
    attrs = pad_batch([sets[s[-1] - 2] for s in seqs], 4)
    cands = rng.integers(2, n_items + 2, size=(3, 2))
    mip = build_mip(model, cat, ids, NegativePolicy("uniform"), 0.3, rng)
    sad = build_sad(model, cat, ids, 0.5, 0.5, rng)

    def scorer():
        s_i, s_a = model.user_state(ids, attrs)
        return pairwise_loss(model.score(s_i, s_a, cands))

    losses = {"scorer": scorer,
              "mip": lambda: mip_loss(model, mip),
              "sad": lambda: sad_loss(model, sad)}
    return losses, model.parameters()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def emit(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

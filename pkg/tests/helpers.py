"""Finite-difference gradient oracle shared by the test modules."""

import numpy as np

from prefixsteer import tensor as T

H = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (restored afterwards)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check_op(op, shapes, rng, positive=False, h: float = H) -> float:
    """Max relative error between autodiff and central differences for a
    random projection of ``op`` applied to fresh inputs of ``shapes``."""
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*leaves)
    w = rng.normal(size=out.shape)
    (out * w).sum().backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        def f():
            with T.no_grad():
                return float((op(*[T.Tensor(a) for a in arrays]).data * w).sum())
        worst = max(worst, rel_error(leaf.grad, numeric_grad(f, arr, h)))
    return worst


def bandit_run(seed: int, episodes: int = 200, beta: float = 0.0):
    """Two-armed bandit over a 3-token vocabulary: reward 1 for emitting
    token 0 after the prompt ``[2]``. Returns ``(p0_before, p0_after, log)``."""
    from prefixsteer.attribute import AttributeTarget
    from prefixsteer.corpus import WordBag
    from prefixsteer.lm import LMConfig, init_model, init_prefix
    from prefixsteer.rldaf import RLDAFConfig, lora_wrap, train
    from prefixsteer.steer import SteerConfig

    cfg = LMConfig(vocab_size=3, d_model=8, n_layers=1, n_heads=1, context_len=4, prefix_len=1)
    lm = init_model(cfg, seed)
    lm.params["out.w"].data = np.random.default_rng(seed + 9).normal(0, 1, (8, 3))
    target = AttributeTarget.topic(WordBag("zero", frozenset({0})))
    model = lora_wrap(lm, 2, [target], init_prefix(lm, np.random.default_rng(seed)), seed=seed)

    def p0():
        with T.no_grad():
            logits, _ = model.policy.forward(np.array([[2]]), model.prefix_for(target))
        return float(T.softmax(logits, axis=-1).data[0, -1, 0])

    before = p0()
    rl = RLDAFConfig(k=1, lr=0.05, episodes=episodes, batch=8, seed=seed, beta=beta)
    _, log = train(model, None, np.array([[2]]), lambda r, b: [target] * b, rl, SteerConfig(m=0),
                   reward_fn=lambda s, t: (s[:, -1] == 0).astype(float))
    return before, p0(), log

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SIGNAL_HEADS, tiny_classifier
from headprune import autodiff as ad
from headprune.autodiff import Tensor
from headprune.data import gen_needle_data
from headprune.errors import DomainError
from headprune.gumbel import TemperatureSchedule, hard_top_k
from headprune.model import apply_gates, compact
from headprune.optim import Adam
from headprune.pruners import (
    HC_BETA,
    HC_GAMMA,
    HC_ZETA,
    adjust_mask_to_k,
    default_block_size,
    expected_l0,
    finalize_and_finetune,
    frozen,
    greedy_pipeline_prune,
    hard_concrete_gate,
    joint_dsp_step,
    michel_importance,
    michel_prune,
    pipelined_dsp,
    prob_nonzero,
    ste_step,
    voita_eval_gates,
    voita_objective,
)

SIGNAL = set(SIGNAL_HEADS)


def _kept(mask):
    return set(np.flatnonzero(mask).tolist())


class _Probe:
    """Stand-in model whose loss is a fixed linear function of the gates."""

    def __init__(self, coef):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.n_heads = self.coef.size
        self.params = {}

    def parameters(self):
        return []

    def loss(self, batch, gates=None, per_example=False):
        B = len(batch[0])
        g = gates if gates.ndim == 2 else ad.reshape(gates, (1, self.n_heads))
        total = ad.sum(g * self.coef)
        return total if per_example else ad.scale(total, 1.0 / max(B, 1))


# Michel --------------------------------------------------------------------


def test_probe_importance_is_the_coefficient():
    data = [(np.zeros((4, 3)), np.zeros(4))]
    scores = michel_importance(_Probe([3.0, -1.5, 0.0]), data)
    assert np.allclose(scores.values, [3.0, 1.5, 0.0])


def test_importance_of_silenced_heads_is_zero(planted):
    model, _, heldout = planted
    scores = michel_importance(model, heldout).values
    assert all(scores[h] == 0.0 for h in range(model.n_heads) if h not in SIGNAL)
    assert all(scores[h] > 0 for h in SIGNAL)


def test_importance_matches_finite_differences(rng):
    model = tiny_classifier()
    x, y = rng.integers(0, 6, size=(5, 5)), rng.integers(0, 2, size=5)
    got = michel_importance(model, [(x, y)], batch_size=5).values
    h = 1e-5
    with ad.no_grad():
        for j in range(model.n_heads):
            fd = np.zeros(5)
            for i in range(5):
                up, down = np.ones(model.n_heads), np.ones(model.n_heads)
                up[j] += h
                down[j] -= h
                b = (x[i : i + 1], y[i : i + 1])
                fd[i] = (model.loss(b, up).item() - model.loss(b, down).item()) / (2 * h)
            assert abs(np.abs(fd).mean() - got[j]) / got[j] < 1e-4


def test_importance_needs_data():
    with pytest.raises(DomainError):
        michel_importance(tiny_classifier(), [])


def test_importance_leaves_model_untouched(planted):
    model, _, heldout = planted
    before = {n: t.data.copy() for n, t in model.params.items()}
    michel_importance(model, heldout)
    assert all(np.array_equal(before[n], model.params[n].data) for n in before)
    assert all(t.grad is None and t.requires_grad for t in model.params.values())


def test_greedy_masks_are_nested_and_shrinking(planted):
    model, _, heldout = planted
    masks = greedy_pipeline_prune(model, heldout, block_size=1, min_heads=1)
    sizes = [int(m.sum()) for m in masks]
    assert sizes == list(range(model.n_heads - 1, 0, -1))
    for a, b in zip(masks, masks[1:]):
        assert _kept(b) <= _kept(a)


def test_block_size_h_is_single_shot(planted):
    model, _, heldout = planted
    masks = greedy_pipeline_prune(model, heldout, block_size=model.n_heads, min_heads=2)
    assert len(masks) == 1
    scores = michel_importance(model, heldout).values
    assert _kept(masks[0]) == _kept(hard_top_k(scores, 2))


def test_block_size_validation(planted):
    model, _, heldout = planted
    with pytest.raises(DomainError):
        greedy_pipeline_prune(model, heldout, block_size=0)
    assert default_block_size(144) == 14 and default_block_size(8) == 1


def test_michel_lands_on_target_and_recovers_signal(planted):
    model, _, heldout = planted
    out = michel_prune(model, heldout, K=2, block_size=3)
    assert out.n_kept == 2
    assert _kept(out.mask) == SIGNAL


# DSP and STE ---------------------------------------------------------------


def test_pipelined_dsp_recovers_signal(planted):
    model, train, _ = planted
    out = pipelined_dsp(model, train, 2, np.random.default_rng(0), TemperatureSchedule(1000.0, 1e-8, 100), 0.2, optimizer="adam")
    assert _kept(out.mask) == SIGNAL


def test_pipelined_dsp_full_budget_is_identity(planted):
    model, train, _ = planted
    before = {n: t.data.copy() for n, t in model.params.items()}
    out = pipelined_dsp(model, train, model.n_heads, np.random.default_rng(0))
    assert out.n_kept == model.n_heads
    assert all(np.array_equal(before[n], model.params[n].data) for n in before)


@pytest.mark.parametrize("K", [0, 9])
def test_pipelined_dsp_rejects_bad_k(planted, K):
    model, train, _ = planted
    with pytest.raises(DomainError):
        pipelined_dsp(model, train, K, np.random.default_rng(0))


def test_pipelined_selection_beats_random_masks(planted):
    model, train, heldout = planted
    out = pipelined_dsp(model, train, 2, np.random.default_rng(1), TemperatureSchedule(1000.0, 1e-8, 100), 0.2, optimizer="adam")
    batch = (heldout.x, heldout.y)
    rng = np.random.default_rng(2)
    with ad.no_grad():
        chosen = model.loss(batch, out.mask.astype(float)).item()
        rand = [model.loss(batch, hard_top_k(rng.random(8), 2).astype(float)).item() for _ in range(20)]
    assert chosen <= np.median(rand)


def test_ste_recovers_signal(planted):
    model, train, _ = planted
    w = Tensor(np.zeros(model.n_heads), requires_grad=True)
    opt = Adam([w], 0.2)
    rng = np.random.default_rng(4)
    with frozen(model):
        for batch in train.batches(32, np.random.default_rng(5)):
            opt.zero_grad()
            ste_step(model, w, batch, 2, rng)
            opt.step()
    assert _kept(hard_top_k(w.data, 2)) == SIGNAL


def test_ste_forward_and_backward_contract(rng):
    model = tiny_classifier(heads=3, layers=2)
    batch = (rng.integers(0, 6, size=(4, 5)), rng.integers(0, 2, size=4))
    w = Tensor(rng.normal(size=6), requires_grad=True)
    res = ste_step(model, w, batch, 2, np.random.default_rng(9))
    mask = res.gates
    assert mask.sum() == 2
    with ad.no_grad():
        assert abs(res.loss - compact(model, mask).loss(batch).item()) < 1e-6
    g = Tensor(mask.copy(), requires_grad=True)
    model.zero_grad()
    ad.backward(model.loss(batch, g))
    assert np.array_equal(w.grad, g.grad)


def test_joint_step_hard_limit_matches_ste(rng):
    model = tiny_classifier(heads=3, layers=2)
    batch = (rng.integers(0, 6, size=(4, 5)), rng.integers(0, 2, size=4))
    w0 = rng.normal(size=6) * 3
    sched = TemperatureSchedule(1e-6, 1e-6, 1)
    soft = joint_dsp_step(model, Tensor(w0.copy(), requires_grad=True), batch, 0, 2, sched, np.random.default_rng(3))
    hard = ste_step(model, Tensor(w0.copy(), requires_grad=True), batch, 2, np.random.default_rng(3))
    assert abs(soft.loss - hard.loss) < 1e-6
    assert abs(soft.gates.sum() - 2) < 1e-9


def test_joint_step_gradient_reaches_w_and_theta(rng):
    model = tiny_classifier(heads=3, layers=2)
    batch = (rng.integers(0, 6, size=(4, 5)), rng.integers(0, 2, size=4))
    w = Tensor(np.zeros(6), requires_grad=True)
    res = joint_dsp_step(model, w, batch, 0, 3, TemperatureSchedule(1.0, 1.0, 1), np.random.default_rng(0))
    assert abs(res.gates.sum() - 3) < 1e-9
    assert np.all(w.grad != 0)
    assert all(t.grad is not None for t in model.params.values())


# Hard Concrete / Voita -----------------------------------------------------


def test_hard_concrete_saturates():
    rng = np.random.default_rng(0)
    assert np.all(hard_concrete_gate(np.full(1000, 50.0), rng).data == 1.0)
    assert np.all(hard_concrete_gate(np.full(1000, -50.0), rng).data == 0.0)


@pytest.mark.parametrize("phi", [-4.0, 0.0, 4.0])
def test_prob_nonzero_matches_monte_carlo(phi):
    g = hard_concrete_gate(np.full(100_000, phi), np.random.default_rng(1)).data
    closed = 1 / (1 + np.exp(-(phi - HC_BETA * np.log(-HC_GAMMA / HC_ZETA))))
    assert prob_nonzero(np.array([phi])).data[0] == pytest.approx(closed, abs=1e-15)
    assert abs(np.mean(g > 0) - closed) < 0.01


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_hard_concrete_gates_in_unit_interval(phi):
    g = hard_concrete_gate(np.array(phi), np.random.default_rng(0)).data
    p = prob_nonzero(np.array(phi)).data
    assert np.all((g >= 0) & (g <= 1))
    assert np.all((p >= 0) & (p <= 1))


def test_voita_objective_cases():
    task = Tensor(1.25)
    phi = np.array([0.3, -2.0, 5.0])
    assert voita_objective(task, phi, 0.0).item() == 1.25
    assert expected_l0(np.full(4, 100.0)).item() == pytest.approx(4.0, abs=1e-12)
    assert voita_objective(task, phi, 0.5).item() == pytest.approx(1.25 + 0.5 * expected_l0(phi).item(), abs=1e-15)


def test_voita_eval_gates():
    phi = np.array([-10.0, 0.0, 10.0])
    gates = voita_eval_gates(phi)
    assert gates[0] == 0.0 and gates[2] == 1.0
    assert gates[1] == pytest.approx(0.5 * (HC_ZETA - HC_GAMMA) + HC_GAMMA)


def test_l0_gradient_pushes_phi_down():
    phi = Tensor(np.zeros(3), requires_grad=True)
    ad.backward(voita_objective(Tensor(0.0), phi, 1.0))
    assert np.all(phi.grad > 0)


# mask adjustment and finalization ------------------------------------------


def test_adjust_mask_examples():
    assert adjust_mask_to_k([0.9, 0.8, 0.1, 0.0], [1, 0, 0, 0], 2).tolist() == [1, 1, 0, 0]
    assert adjust_mask_to_k([0.9, 0.8, 0.7], [1, 1, 1], 1).tolist() == [1, 0, 0]
    assert adjust_mask_to_k([0.1, 0.5, 0.3], [0, 1, 1], 2).tolist() == [0, 1, 1]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=16), st.data())
def test_adjust_mask_is_minimal_edit(values, data):
    values = np.array(values)
    mask = np.array(data.draw(st.lists(st.integers(0, 1), min_size=values.size, max_size=values.size)))
    K = data.draw(st.integers(1, values.size))
    out = adjust_mask_to_k(values, mask, K)
    assert out.sum() == K
    if mask.sum() <= K:
        assert _kept(mask) <= _kept(out)
    else:
        assert _kept(out) <= _kept(mask)


def test_finalize_without_finetune_equals_masked_eval(planted):
    model, _, heldout = planted
    scores = np.arange(8.0)

    def acc(m):
        return float((m.predict(heldout.x) == heldout.y).mean())

    out = finalize_and_finetune(model, scores, 3, 0, evaluate=acc)
    masked = float((apply_gates(model, out.mask.astype(float)).predict(heldout.x) == heldout.y).mean())
    assert out.n_kept == 3
    assert out.metric_pre == out.metric_post == masked


def test_finetune_lowers_training_loss():
    model = tiny_classifier(d=16, heads=2, layers=2, length=8)
    data = gen_needle_data(3, 400, 6, 8)
    with ad.no_grad():
        before = compact(model, [1, 0, 1, 1]).loss((data.x, data.y)).item()
    out = finalize_and_finetune(model, [3.0, 0.0, 2.0, 1.0], 3, 60, data=data, lr=0.1, rng=np.random.default_rng(0))
    with ad.no_grad():
        after = out.model.loss((data.x, data.y)).item()
    assert out.n_kept == 3
    assert after < before


def test_finetune_needs_data():
    with pytest.raises(DomainError):
        finalize_and_finetune(tiny_classifier(), np.ones(2), 1, 5)

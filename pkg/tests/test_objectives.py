import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from radssl.errors import ValidationError
from radssl.objectives import (LossBreakdown, TeacherState, dino_loss, ema_update, ibot_loss, koleo_loss,
                               sigreg_directions, sigreg_loss, sigreg_t_grid, sigreg_weights, update_center)

D = torch.float64


def _entropy(p):
    return float(-(p * torch.log(p)).sum(-1).mean())


def test_dino_equal_logits_is_entropy():
    torch.manual_seed(0)
    t = torch.randn(2, 4, 7, dtype=D)
    # with a single teacher and a single (different) student view, equal logits give the entropy
    s = torch.stack([t[1], t[0]])
    loss = dino_loss(s, t, torch.zeros(7, dtype=D), 0.2, 0.2)
    p = F.softmax(t / 0.2, -1)
    assert float(loss) == pytest.approx(_entropy(p), rel=1e-12)


def test_dino_one_hot_vs_uniform():
    K = 9
    t = torch.full((2, 1, K), -1e4, dtype=D)
    t[:, :, 3] = 1e4
    s = torch.zeros(2, 1, K, dtype=D)
    assert float(dino_loss(s, t, torch.zeros(K, dtype=D), 0.1, 0.04)) == pytest.approx(math.log(K), rel=1e-12)


def test_dino_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        K, B = 5, 3
        s = torch.tensor(rng.normal(size=(3, B, K)), dtype=D)
        t = torch.tensor(rng.normal(size=(2, B, K)), dtype=D)
        c = torch.tensor(rng.normal(size=K), dtype=D)
        tau_s, tau_t = 0.1, 0.05
        total, n = 0.0, 0
        for i in range(2):
            for j in range(3):
                if i == j:
                    continue
                for b in range(B):
                    pt = np.exp((t[i, b] - c).numpy() / tau_t)
                    pt /= pt.sum()
                    ls = s[j, b].numpy() / tau_s
                    ls = ls - np.log(np.exp(ls - ls.max()).sum()) - ls.max()
                    total += -(pt * ls).sum() / B
                n += 1
        assert float(dino_loss(s, t, c, tau_s, tau_t)) == pytest.approx(total / n, rel=1e-10)


def test_dino_gibbs(rng):
    for _ in range(50):
        s = torch.tensor(rng.normal(size=(4, 3, 6)) * 3, dtype=D)
        t = torch.tensor(rng.normal(size=(2, 3, 6)) * 3, dtype=D)
        c = torch.zeros(6, dtype=D)
        tau = float(rng.uniform(0.05, 0.5))
        p = F.softmax(t / tau, -1)
        assert float(dino_loss(s, t, c, tau, tau)) >= _entropy(p) - 1e-12


def test_dino_k_mismatch():
    with pytest.raises(ValidationError):
        dino_loss(torch.zeros(2, 1, 4), torch.zeros(2, 1, 5), torch.zeros(5), 0.1, 0.1)


def test_ibot_empty_mask():
    loss, flag = ibot_loss(torch.randn(4, 3), torch.randn(4, 3), np.zeros(4, bool), torch.zeros(3), 0.1, 0.1)
    assert float(loss) == 0.0 and flag is False


def test_ibot_single_position_entropy():
    torch.manual_seed(1)
    x = torch.randn(4, 5, dtype=D)
    m = np.array([False, True, False, False])
    loss, flag = ibot_loss(x, x.clone(), m, torch.zeros(5, dtype=D), 0.3, 0.3)
    assert flag and float(loss) == pytest.approx(_entropy(F.softmax(x[1] / 0.3, -1)[None]), rel=1e-12)


def test_ibot_hand_oracle():
    s = torch.tensor([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [3.0, 0.0]], dtype=D)
    t = torch.tensor([[0.0, 1.0], [2.0, 0.0], [1.0, 1.0], [0.0, 0.0]], dtype=D)
    m = np.array([[True, False], [False, True]])          # 2x2 grid, positions 0 and 3
    c = torch.tensor([0.5, -0.5], dtype=D)
    loss, _ = ibot_loss(s, t, m, c, 1.0, 0.5)

    def ce(si, ti):
        pt = np.exp((np.array(ti) - [0.5, -0.5]) / 0.5)
        pt /= pt.sum()
        ls = np.array(si) - np.log(np.exp(si).sum())
        return -(pt * ls).sum()
    expect = 0.5 * (ce([1.0, 0.0], [0.0, 1.0]) + ce([3.0, 0.0], [0.0, 0.0]))
    assert float(loss) == pytest.approx(expect, rel=1e-12)


def _collapse_value(t):
    w = sigreg_weights(t)
    return float(np.sum(w * (1 - np.exp(-t**2 / 2)) ** 2))


def test_sigreg_collapse_closed_form(rng):
    t = sigreg_t_grid(17, 4.0)
    x = torch.ones(64, 8, dtype=D) * 3.0
    dirs = sigreg_directions(8, 16, rng)
    assert float(sigreg_loss(x, dirs, t)) == pytest.approx(_collapse_value(t), rel=1e-12)


def test_sigreg_normal_vs_collapsed():
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.standard_normal((4096, 32)), dtype=D)
    dirs = sigreg_directions(32, 16, rng)
    t = sigreg_t_grid()
    normal = float(sigreg_loss(x, dirs, t))
    collapsed = float(sigreg_loss(torch.zeros(4096, 32, dtype=D), dirs, t))
    assert collapsed >= 10 * normal


def test_sigreg_shift_invariant(rng):
    x = torch.tensor(rng.normal(size=(50, 6)), dtype=D)
    dirs = sigreg_directions(6, 4, rng)
    t = sigreg_t_grid()
    a = float(sigreg_loss(x, dirs, t))
    b = float(sigreg_loss(x + torch.tensor(rng.normal(size=6) * 10, dtype=D), dirs, t))
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_sigreg_small_batch():
    with pytest.raises(ValidationError):
        sigreg_loss(torch.zeros(1, 3), np.eye(3), sigreg_t_grid())


def test_sigreg_directions_unit(rng):
    d = sigreg_directions(10, 16, rng)
    assert d.shape == (10, 16) and np.allclose(np.linalg.norm(d, axis=0), 1.0)


def test_koleo_antipodal():
    x = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=D)
    assert float(koleo_loss(x)) == pytest.approx(-math.log(2 + 1e-8), rel=1e-14)


def test_koleo_permutation(rng):
    x = torch.tensor(rng.normal(size=(12, 5)), dtype=D)
    perm = torch.as_tensor(rng.permutation(12))
    assert float(koleo_loss(x)) == float(koleo_loss(x[perm]))


def test_koleo_duplicate_row():
    x = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]], dtype=D)
    v = float(koleo_loss(x))
    assert math.isfinite(v) and v > 10.0            # two rows contribute about -ln(1e-8) = 18.4
    expected = -(2 * math.log(1e-8) + math.log(math.sqrt(2.0) + 1e-8)) / 3
    assert v == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_koleo_duplicate_row_gradient_is_finite(dtype):
    x = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=dtype, requires_grad=True)
    koleo_loss(x).backward()
    assert torch.isfinite(x.grad).all()


def test_koleo_monotone_in_min_distance():
    vals = []
    for angle in (0.2, 0.4, 0.8):
        x = torch.tensor([[1.0, 0.0], [math.cos(angle), math.sin(angle)], [-1.0, 0.0]], dtype=D)
        vals.append(float(koleo_loss(x)))
    assert vals[0] > vals[1] > vals[2]


def test_ema_cases():
    t = {"w": torch.tensor(2.0)}
    s = {"w": torch.tensor(4.0)}
    ema_update(t, s, 0.5)
    assert float(t["w"]) == 3.0
    ema_update(t, s, 1.0)
    assert float(t["w"]) == 3.0
    ema_update(t, s, 0.0)
    assert float(t["w"]) == 4.0


def test_ema_shape_mismatch():
    with pytest.raises(ValidationError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)


def test_center_updates():
    c0 = torch.tensor([1.0, 2.0], dtype=D)
    batch = torch.tensor([[3.0, 0.0], [5.0, 2.0]], dtype=D)
    assert torch.equal(update_center(c0, batch, 1.0), c0)
    assert torch.equal(update_center(c0, batch, 0.0), batch.mean(0))
    c2 = update_center(update_center(c0, batch, 0.5), batch, 0.5)
    assert torch.allclose(c2, 0.75 * batch.mean(0) + 0.25 * c0, atol=0)


def test_breakdown_total_exact():
    b = LossBreakdown(1.25, 0.5, 3.0, (1.0, 2.0, 0.1))
    assert b.total == 1.0 * 1.25 + 2.0 * 0.5 + 0.1 * 3.0


def test_teacher_state_validation():
    with pytest.raises(ValidationError):
        TeacherState(None, torch.zeros(2), torch.zeros(2), momentum=1.5)
    with pytest.raises(ValidationError):
        TeacherState(None, torch.zeros(2), torch.zeros(2), teacher_temp=0.0)


# --- finite-difference gradient checks (double precision) -----------------

N_INSTANCES = 20


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_dino(seed, fd_check):
    rng = np.random.default_rng(seed)
    K, B = int(rng.integers(2, 17)), int(rng.integers(1, 9))
    s = torch.tensor(rng.normal(size=(int(rng.integers(2, 5)), B, K)), dtype=D, requires_grad=True)
    t = torch.tensor(rng.normal(size=(2, B, K)), dtype=D)
    c = torch.tensor(rng.normal(size=K) * 0.1, dtype=D)
    assert fd_check(lambda: dino_loss(s, t, c, 0.1, 0.07), [s]) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_ibot(seed, fd_check):
    rng = np.random.default_rng(100 + seed)
    K, n = int(rng.integers(2, 17)), int(rng.integers(2, 9))
    s = torch.tensor(rng.normal(size=(n, K)), dtype=D, requires_grad=True)
    t = torch.tensor(rng.normal(size=(n, K)), dtype=D)
    m = rng.random(n) < 0.5
    m[0] = True
    assert fd_check(lambda: ibot_loss(s, t, m, torch.zeros(K, dtype=D), 0.1, 0.05)[0], [s]) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_sigreg(seed, fd_check):
    rng = np.random.default_rng(200 + seed)
    B, d = int(rng.integers(3, 9)), int(rng.integers(2, 9))
    x = torch.tensor(rng.normal(size=(B, d)), dtype=D, requires_grad=True)
    dirs = sigreg_directions(d, 4, rng)
    t = sigreg_t_grid()
    assert fd_check(lambda: sigreg_loss(x, dirs, t), [x]) < 1e-4


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_grad_koleo(seed, fd_check):
    rng = np.random.default_rng(300 + seed)
    B, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    x = torch.tensor(rng.normal(size=(B, d)), dtype=D, requires_grad=True)
    assert fd_check(lambda: koleo_loss(x), [x]) < 1e-4

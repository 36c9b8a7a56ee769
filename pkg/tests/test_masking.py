import numpy as np
import pytest

from idmask.masking import (
    AttackConfig,
    MaskerState,
    TipImMasker,
    augment_to_batch,
    protect_batch,
    protect_single,
    step,
)
from idmask.objective import identification_loss_grad
from idmask.projection import normalize_direction, project
from idmask.validation import BUDGET_ATOL, perturbation_norm

from conftest import IdentityEmbedder


def test_project_identity_inside_ball():
    x = np.full((3, 3, 1), 0.52)
    ref = np.full((3, 3, 1), 0.5)
    out = project(x, ref, "linf", 0.1)
    assert out is x


def test_project_linf_clamps_to_budget():
    ref = np.full((2, 2, 1), 0.5)
    x = np.full((2, 2, 1), 0.9)
    out = project(x, ref, "linf", 0.1)
    assert np.allclose(out, 0.6)


def test_project_l2_radial():
    rng = np.random.default_rng(0)
    ref = rng.uniform(0.3, 0.7, (4, 4, 1))
    delta = rng.standard_normal((4, 4, 1)) * 0.2
    x = np.clip(ref + delta, 0, 1)
    eps = 0.05
    out = project(x, ref, "l2", eps)
    d = out - ref
    norm = np.linalg.norm(d)
    assert norm <= eps * (1 + 1e-12)
    assert norm == pytest.approx(eps, rel=1e-12)
    orig = x - ref
    cos = float(np.sum(d * orig) / (np.linalg.norm(d) * np.linalg.norm(orig)))
    assert cos == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("norm_type", ["linf", "l2"])
def test_project_idempotent_bitwise(norm_type):
    rng = np.random.default_rng(1)
    for _ in range(50):
        ref = rng.uniform(0, 1, (3, 3, 1))
        x = rng.uniform(-0.3, 1.3, (3, 3, 1))
        once = project(x, ref, norm_type, 0.07)
        twice = project(once, ref, norm_type, 0.07)
        assert twice.tobytes() == once.tobytes()


def test_project_shape_mismatch():
    with pytest.raises(ValueError):
        project(np.zeros((2, 2, 1)), np.zeros((3, 2, 1)), "linf", 0.1)


def test_normalize_direction_cases():
    assert np.array_equal(normalize_direction(np.array([-0.8]), "linf"), [-1.0])
    assert np.allclose(normalize_direction(np.array([3.0, 4.0]), "l2"), [0.6, 0.8])
    assert np.all(normalize_direction(np.zeros(5), "l2") == 0.0)
    assert np.all(normalize_direction(np.zeros(5), "linf") == 0.0)
    assert normalize_direction(np.array([0.0, -2.0, 3.0]), "linf").tolist() == [0.0, -1.0, 1.0]
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = rng.standard_normal((4, 4, 1))
        assert np.linalg.norm(normalize_direction(g, "l2")) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        normalize_direction(np.array([np.nan]), "linf")


def _state(batch, reference):
    return MaskerState(
        batch=np.array(batch, dtype=np.float64),
        reference=np.array(reference, dtype=np.float64),
        momentum=np.zeros_like(np.asarray(batch, dtype=np.float64)),
    )


def test_step_hand_case():
    # gradient -0.8 -> L1 normalized -1 -> sign -1 -> move +alpha
    cfg = AttackConfig(
        epsilon=0.1, alpha=0.05, iterations=1, momentum=0.0, selection="fixed"
    )
    state = _state(np.full((1, 1, 1, 1), 0.5), np.full((1, 1, 1, 1), 0.5))
    new = step(state, np.full((1, 1, 1, 1), -0.8), cfg)
    assert new.batch.reshape(()) == pytest.approx(0.55, abs=1e-15)
    assert new.iteration == 1


def test_step_without_momentum_is_plain_update():
    cfg_m0 = AttackConfig(epsilon=0.1, alpha=0.03, momentum=0.0, selection="fixed")
    cfg_m1 = AttackConfig(epsilon=0.1, alpha=0.03, momentum=1.0, selection="fixed")
    rng = np.random.default_rng(3)
    ref = rng.uniform(0.3, 0.7, (2, 3, 3, 1))
    grads = rng.standard_normal((2, 3, 3, 1))
    a = step(_state(ref, ref), grads, cfg_m0)
    b = step(_state(ref, ref), grads, cfg_m1)
    # with zero initial momentum the first step agrees
    assert np.array_equal(a.batch, b.batch)
    # momentum history diverges afterwards
    a2 = step(a, grads[::-1], cfg_m0)
    b2 = step(b, grads[::-1], cfg_m1)
    assert not np.array_equal(a2.batch, b2.batch)


def test_step_invariants_hold_over_random_steps():
    rng = np.random.default_rng(4)
    for _ in range(500):
        norm_type = rng.choice(["linf", "l2"])
        eps = float(rng.uniform(0.02, 0.2))
        cfg = AttackConfig(
            norm_type=norm_type,
            epsilon=eps,
            alpha=float(rng.uniform(0.005, eps)),
            momentum=float(rng.uniform(0, 1.5)),
            selection="fixed",
        )
        n = int(rng.integers(1, 4))
        ref = rng.uniform(0, 1, (n, 3, 3, 1))
        state = _state(ref, ref)
        for _ in range(int(rng.integers(1, 4))):
            state = step(state, rng.standard_normal(ref.shape) * 10, cfg)
            state.audit(cfg)


def test_step_rejects_bad_gradients():
    cfg = AttackConfig(selection="fixed")
    ref = np.full((1, 2, 2, 1), 0.5)
    state = _state(ref, ref)
    with pytest.raises(ValueError, match="finite"):
        step(state, np.full((1, 2, 2, 1), np.nan), cfg)
    with pytest.raises(ValueError, match="shape"):
        step(state, np.zeros((2, 2, 2, 1)), cfg)


def test_protect_batch_degenerate_loop_equals_manual_step():
    model = IdentityEmbedder((1, 1, 1))
    cfg = AttackConfig(
        epsilon=0.1, alpha=0.05, iterations=1, momentum=0.0, gamma=0.0,
        selection="fixed", target_index=0,
    )
    ref = np.full((1, 1, 1, 1), 0.5)
    target = np.full((1, 1, 1), 0.9)
    protected, masks = protect_batch(ref, target[None], model, cfg)
    grad = identification_loss_grad(model, ref[0], target, ref[0])
    manual = step(_state(ref, ref), grad[None], cfg)
    assert protected.tobytes() == manual.batch.tobytes()
    assert protected.reshape(()) == pytest.approx(0.55)
    assert masks[0].delta.reshape(()) == pytest.approx(0.05)


def test_protect_batch_budget_invariant_every_iteration(small_mlp):
    rng = np.random.default_rng(5)
    ref = rng.uniform(0.2, 0.8, (3, 8, 8, 1))
    targets = rng.uniform(0, 1, (4, 8, 8, 1))
    cfg = AttackConfig(epsilon=0.06, alpha=0.01, iterations=6, selection="greedy")
    audits = []
    protect_batch(ref, targets, small_mlp, cfg, callback=lambda s: audits.append(s.audit(cfg)))
    assert len(audits) == 6


def test_protect_batch_deterministic(small_mlp):
    rng = np.random.default_rng(6)
    ref = rng.uniform(0.2, 0.8, (2, 8, 8, 1))
    targets = rng.uniform(0, 1, (3, 8, 8, 1))
    cfg = AttackConfig(epsilon=0.05, alpha=0.01, iterations=4, gamma=1.0)
    a, _ = protect_batch(ref, targets, small_mlp, cfg)
    b, _ = protect_batch(ref, targets, small_mlp, cfg)
    assert a.tobytes() == b.tobytes()


def test_protect_batch_loss_decreases_statistically(small_mlp):
    from idmask.objective import identification_loss

    rng = np.random.default_rng(7)
    cfg = AttackConfig(epsilon=0.08, alpha=0.01, iterations=15, momentum=0.0,
                       gamma=0.0, selection="fixed")
    wins = 0
    trials = 40
    for _ in range(trials):
        ref = rng.uniform(0.2, 0.8, (1, 8, 8, 1))
        target = rng.uniform(0, 1, (1, 8, 8, 1))
        protected, _ = protect_batch(ref, target, small_mlp, cfg)
        before = identification_loss(small_mlp, ref[0], target[0], ref[0])
        after = identification_loss(small_mlp, protected[0], target[0], ref[0])
        wins += int(after < before)
    assert wins >= 0.95 * trials


def test_protect_batch_validates_inputs(small_mlp):
    ref = np.full((1, 8, 8, 1), 0.5)
    with pytest.raises(ValueError, match="nonempty"):
        protect_batch(ref, np.empty((0, 8, 8, 1)), small_mlp, AttackConfig())
    with pytest.raises(ValueError, match="shape"):
        protect_batch(ref, np.full((1, 4, 4, 1), 0.5), small_mlp, AttackConfig())


def test_protect_batch_cycle_selection(small_mlp):
    rng = np.random.default_rng(8)
    ref = rng.uniform(0.2, 0.8, (2, 8, 8, 1))
    targets = rng.uniform(0, 1, (3, 8, 8, 1))
    cfg = AttackConfig(epsilon=0.05, alpha=0.01, iterations=6, selection="cycle")
    seen = []
    protect_batch(ref, targets, small_mlp, cfg, callback=lambda s: seen.append(s.selected[-1]))
    assert [int(idx[0]) for idx in seen] == [0, 1, 2, 0, 1, 2]


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(alpha=0.2, epsilon=0.1)
    with pytest.raises(ValueError):
        AttackConfig(iterations=0)
    with pytest.raises(ValueError):
        AttackConfig(momentum=-1.0)
    with pytest.raises(ValueError):
        AttackConfig(selection="nope")
    with pytest.raises(ValueError):
        AttackConfig(gamma=-0.5)
    zero = AttackConfig(epsilon=0.0, alpha=0.0)
    assert zero.epsilon == 0.0


def test_augment_single_is_original():
    rng = np.random.default_rng(9)
    img = rng.uniform(0, 1, (8, 8, 1))
    batch = augment_to_batch(img, 1, seed=0)
    assert batch.shape == (1, 8, 8, 1)
    assert np.array_equal(batch[0], img)


def test_augment_deterministic():
    rng = np.random.default_rng(10)
    img = rng.uniform(0, 1, (8, 8, 1))
    a = augment_to_batch(img, 10, seed=5)
    b = augment_to_batch(img, 10, seed=5)
    assert a.tobytes() == b.tobytes()
    c = augment_to_batch(img, 10, seed=6)
    assert a.tobytes() != c.tobytes()


def test_augment_range_and_diversity():
    rng = np.random.default_rng(11)
    img = rng.uniform(0.1, 0.9, (12, 12, 1))
    batch = augment_to_batch(img, 50, seed=1)
    assert batch.shape[0] == 50
    assert batch.min() >= 0.0 and batch.max() <= 1.0
    dists = [np.linalg.norm(batch[i] - img) for i in range(1, 50)]
    assert np.mean(dists) > 0.0
    assert min(dists) > 0.0


def test_protect_single_uses_augmented_batch(small_mlp):
    rng = np.random.default_rng(12)
    img = rng.uniform(0.2, 0.8, (8, 8, 1))
    targets = rng.uniform(0, 1, (2, 8, 8, 1))
    cfg = AttackConfig(epsilon=0.05, alpha=0.01, iterations=3, gamma=1.0)
    protected, mask = protect_single(img, targets, small_mlp, cfg, batch_size=8, seed=3)
    assert protected.shape == img.shape
    assert perturbation_norm(protected - img, "linf") <= cfg.epsilon + BUDGET_ATOL
    assert np.array_equal(mask.delta, protected - img)


def test_estimator_facade(small_mlp):
    rng = np.random.default_rng(13)
    ref = rng.uniform(0.2, 0.8, (2, 8, 8, 1))
    targets = rng.uniform(0, 1, (3, 8, 8, 1))
    masker = TipImMasker(model=small_mlp, epsilon=0.05, alpha=0.01, iterations=4)
    with pytest.raises(ValueError, match="not fitted"):
        masker.transform(ref)
    protected = masker.fit(targets).transform(ref)
    direct, _ = protect_batch(ref, targets, small_mlp, masker._config())
    assert np.array_equal(protected, direct)
    assert len(masker.masks_) == 2
    assert len(masker.selection_trace_) == 4
    params = masker.get_params()
    assert params["epsilon"] == 0.05 and params["model"] is small_mlp

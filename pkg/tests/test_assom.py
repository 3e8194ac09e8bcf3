import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msnn import assom
from msnn.assom import (AssomSchedule, ConfigError, ModuleBank, SubspaceModule, energy,
                        load_bank, max_gram_deviation, mean_residual, project, random_bank,
                        reconstruct, rotate_update, save_bank, select_modules, train_assom,
                        train_assom_reference, winner)
from msnn.tensor import DimensionError, gram_schmidt

E3 = np.eye(3)


def plane_module():
    return SubspaceModule(E3[:2].copy())


def test_project_examples():
    m = SubspaceModule(gram_schmidt(np.random.default_rng(0).normal(size=(4, 9))))
    assert np.allclose(project(m, m.basis[0]), [1, 0, 0, 0], atol=1e-12)
    assert np.array_equal(project(m, np.zeros(9)), np.zeros(4))
    assert np.array_equal(project(plane_module(), [3.0, -2.0, 7.0]), [3.0, -2.0])
    with pytest.raises(DimensionError):
        project(plane_module(), [1.0, 2.0])


def test_reconstruct_examples():
    m = plane_module()
    x = np.array([3.0, -2.0, 7.0])
    xh = reconstruct(m, x)
    assert np.array_equal(xh, [3.0, -2.0, 0.0])
    assert np.linalg.norm(x - xh) == pytest.approx(7.0)
    assert np.array_equal(reconstruct(m, [0.0, 0.0, 5.0]), np.zeros(3))
    assert np.allclose(reconstruct(m, [1.5, 2.5, 0.0]), [1.5, 2.5, 0.0], atol=1e-10)


def test_module_size_bounds():
    with pytest.raises(DimensionError):
        SubspaceModule(np.eye(3, 2).T.copy().repeat(2, axis=0))


def test_winner_examples():
    bank = ModuleBank([SubspaceModule([[1.0, 0.0]]), SubspaceModule([[0.0, 1.0]])])
    assert winner(bank, [3.0, 1.0]) == 0
    assert winner(bank, [1.0, 3.0]) == 1
    assert winner(bank, [1.0, 1.0]) == 0


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_winner_scale_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    bank = random_bank(5, 9, 3, seed)
    x = rng.normal(size=9)
    assert winner(bank, alpha * x) == winner(bank, x)


def test_rotate_zero_rate_is_identity():
    m = SubspaceModule(gram_schmidt(np.random.default_rng(1).normal(size=(3, 6))))
    out = rotate_update(m, np.arange(6.0), 0.0)
    assert np.allclose(out.basis, m.basis, atol=1e-12)


def test_rotate_in_span_keeps_span():
    m = SubspaceModule(gram_schmidt(np.random.default_rng(2).normal(size=(3, 6))))
    x = m.basis.T @ np.array([0.3, -1.2, 0.8])
    out = rotate_update(m, x, 0.7)
    # projector onto the span is unchanged
    assert np.allclose(out.basis.T @ out.basis, m.basis.T @ m.basis, atol=1e-8)


def test_rotate_one_step_closed_form():
    m = SubspaceModule([[1.0, 0.0]])
    x = np.array([1.0, 1.0])
    # x_hat = (1, 0): |x_hat| = 1, |x| = sqrt(2); b = e1 + 0.5 / sqrt(2) * x
    c = 0.5 / np.sqrt(2.0)
    b = np.array([1.0 + c, c])
    b /= np.linalg.norm(b)
    out = rotate_update(m, x, 0.5)
    assert np.allclose(out.basis[0], b, atol=1e-15)
    assert energy(out, x) > energy(m, x)


def test_rotate_skips_degenerate():
    m = plane_module()
    assert np.array_equal(rotate_update(m, np.zeros(3), 1.0).basis, m.basis)
    assert np.array_equal(rotate_update(m, [0.0, 0.0, 1.0], 1.0).basis, m.basis)


@settings(max_examples=80)
@given(st.integers(0, 2**31), st.floats(0.0, 5.0))
def test_rotate_never_loses_energy(seed, rate):
    rng = np.random.default_rng(seed)
    m = SubspaceModule(gram_schmidt(rng.normal(size=(4, 10))))
    x = rng.normal(size=10)
    out = rotate_update(m, x, rate)
    assert energy(out, x) >= energy(m, x) - 1e-10
    assert max_gram_deviation(ModuleBank([out])) <= 1e-9


def test_schedule_rate():
    s = AssomSchedule(15, 0.5, 0.05)
    assert s.rate(0) == 0.5
    assert s.rate(10) == pytest.approx(0.5 * np.exp(-0.5))
    with pytest.raises(ConfigError):
        AssomSchedule(1, 0.0, 0.1)


def test_single_direction_converges():
    v = np.array([1.0, -2.0, 0.5, 3.0, -1.0])
    bank = random_bank(1, 5, 1, 3)
    out = train_assom(np.tile(v, (20, 1)), bank, AssomSchedule(10, 0.5, 0.05))
    b = out.modules[0].basis[0]
    assert min(np.abs(b - v / np.linalg.norm(v)).max(), np.abs(b + v / np.linalg.norm(v)).max()) < 1e-3


def two_cluster_patches(seed, n=200):
    rng = np.random.default_rng(seed)
    a = np.column_stack([rng.normal(5, 1, n), rng.normal(0, 0.3, n)])
    b = np.column_stack([rng.normal(0, 0.3, n), rng.normal(5, 1, n)])
    return np.vstack([a, b])


def test_two_modules_specialize():
    patches = two_cluster_patches(0)
    sched = AssomSchedule(10, 0.5, 0.05)
    two = train_assom(patches, random_bank(2, 2, 1, 11), sched, seed=5)
    one = train_assom(patches, random_bank(1, 2, 1, 11), sched, seed=5)
    assert mean_residual(two, patches) < mean_residual(one, patches)
    wins = {winner(two, p) for p in patches[:200]} | {winner(two, p) for p in patches[200:]}
    assert wins == {0, 1}
    assert winner(two, [1.0, 0.0]) != winner(two, [0.0, 1.0])


def test_empty_patches_rejected():
    with pytest.raises(ConfigError):
        train_assom(np.zeros((0, 4)), random_bank(1, 4, 2, 0), AssomSchedule(1, 0.5, 0.05))


def test_compiled_loop_matches_reference():
    rng = np.random.default_rng(4)
    patches = rng.normal(size=(60, 9))
    patches -= patches.mean(axis=1, keepdims=True)
    bank = random_bank(3, 9, 4, 8)
    sched = AssomSchedule(3, 0.3, 0.05)
    fast = train_assom(patches, bank, sched, seed=2)
    slow = train_assom_reference(patches, bank, sched, seed=2)
    assert np.allclose(fast.stacked(), slow.stacked(), atol=1e-9)


def test_training_keeps_orthonormality_and_fit():
    rng = np.random.default_rng(9)
    img = rng.random((20, 20)).cumsum(axis=0).cumsum(axis=1)
    from msnn.experiments import harvest_patches
    patches = harvest_patches([img / img.max()], 5, 1)
    bank = random_bank(4, 25, 6, 1)
    seen = []
    out = train_assom(patches, bank, AssomSchedule(5, 0.5, 0.05),
                      on_epoch=lambda e, b: seen.append(max_gram_deviation(ModuleBank.from_stacked(b))))
    assert len(seen) == 5 and max(seen) <= 1e-9
    assert mean_residual(out, patches) <= mean_residual(bank, patches)
    for x in rng.normal(size=(200, 25)):
        for m in out.modules:
            xh = reconstruct(m, x)
            assert np.linalg.norm(xh) <= np.linalg.norm(x) + 1e-12
            assert np.allclose(reconstruct(m, xh), xh, atol=1e-10)


def test_select_modules_keeps_best():
    patches = two_cluster_patches(1)
    good = SubspaceModule([[1.0, 0.0]])
    other = SubspaceModule([[0.0, 1.0]])
    bad = SubspaceModule([[np.sqrt(0.5), np.sqrt(0.5)]])
    bank = ModuleBank([bad, good, other])
    kept = select_modules(bank, patches, 2)
    assert len(kept) == 2
    assert not any(np.array_equal(m.basis, bad.basis) for m in kept.modules)
    assert select_modules(bank, patches, 3) is bank
    with pytest.raises(ConfigError):
        select_modules(bank, patches, 4)


def test_bank_file_round_trip(tmp_path):
    bank = random_bank(3, 25, 10, 5)
    path = tmp_path / "b.asom"
    save_bank(bank, path)
    raw = path.read_bytes()
    assert raw[:4] == b"ASOM"
    assert np.frombuffer(raw[4:20], "<i4").tolist() == [1, 3, 25, 10]
    assert len(raw) == 20 + 8 * 3 * 10 * 25
    back = load_bank(path)
    assert back.stacked().tobytes() == bank.stacked().tobytes()


def test_bank_file_errors(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(ValueError, match="magic"):
        load_bank(p)
    save_bank(random_bank(1, 4, 2, 0), p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="expected"):
        load_bank(p)


def test_random_bank_is_seeded():
    assert np.array_equal(random_bank(2, 9, 3, 4).stacked(), random_bank(2, 9, 3, 4).stacked())
    assert max_gram_deviation(random_bank(6, 25, 10, 0)) <= 1e-12
    assert assom.SKIP_TOL == 1e-10

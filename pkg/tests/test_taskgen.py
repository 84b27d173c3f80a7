import json

import numpy as np
import pytest

from icl_newton.errors import InvalidSpec
from icl_newton.linalg import condition_number, sym_eig
from icl_newton.taskgen import (CovSpec, GaussianStream, NoiseSpec, TaskInstance, TaskTemplate, make_covariance,
                                read_jsonl, sample_batch, sample_task, write_jsonl)


def test_gaussian_stream_deterministic_and_standard():
    a = GaussianStream(5).normal(10001)
    b = GaussianStream(5).normal(10001)
    assert np.array_equal(a, b)
    assert abs(a.mean()) < 0.05 and abs(a.std() - 1) < 0.05
    assert not np.array_equal(a, GaussianStream(5, stream=1).normal(10001))


def test_identity_covariance():
    assert np.array_equal(make_covariance(CovSpec.identity(), 3, GaussianStream(0)), np.eye(3))


def test_ill_conditioned_spectrum_exact():
    sigma = make_covariance(CovSpec.ill_conditioned(100, 0.5), 20, GaussianStream(0))
    lam = sym_eig(sigma).eigenvalues
    assert np.allclose(lam[:10], 100, atol=1e-9) and np.allclose(lam[10:], 1, atol=1e-9)
    assert condition_number(sigma) == pytest.approx(100, rel=1e-6)


def test_ill_conditioned_rounds_high_fraction_up():
    lam = sym_eig(make_covariance(CovSpec.ill_conditioned(9, 0.25), 5, GaussianStream(1))).eigenvalues
    assert np.sum(np.isclose(lam, 9, atol=1e-9)) == 2


def test_different_seeds_different_bases_same_spectrum():
    s1 = make_covariance(CovSpec.ill_conditioned(100), 20, GaussianStream(1))
    s2 = make_covariance(CovSpec.ill_conditioned(100), 20, GaussianStream(2))
    assert not np.allclose(s1, s2)
    assert np.allclose(sym_eig(s1).eigenvalues, sym_eig(s2).eigenvalues, atol=1e-9)


def test_explicit_covariance_copied_and_validated():
    m = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.array_equal(make_covariance(CovSpec.explicit(m), 2, GaussianStream(0)), m)
    with pytest.raises(InvalidSpec):
        make_covariance(CovSpec.explicit([[1.0, 2.0], [0.0, 1.0]]), 2, GaussianStream(0))
    with pytest.raises(InvalidSpec):
        make_covariance(CovSpec.explicit([[1.0, 0.0], [0.0, -1.0]]), 2, GaussianStream(0))


@pytest.mark.parametrize("spec", [CovSpec.ill_conditioned(0.5), CovSpec.ill_conditioned(10, 1.0),
                                  CovSpec("bogus")])
def test_invalid_cov_specs(spec):
    with pytest.raises(InvalidSpec):
        make_covariance(spec, 4, GaussianStream(0))


def test_invalid_noise_and_dims():
    with pytest.raises(InvalidSpec):
        NoiseSpec(-0.1)
    with pytest.raises(InvalidSpec):
        sample_task(0, 5)
    with pytest.raises(InvalidSpec):
        sample_task(3, 0)


def test_noiseless_labels_exact():
    for seed in range(5):
        task = sample_task(20, 40, seed=seed)
        bound = 1e-12 * np.linalg.norm(task.w_star) * np.max(np.linalg.norm(task.xs, axis=1))
        assert np.max(np.abs(task.ys - task.xs @ task.w_star)) <= bound
        assert task.xs.shape == (41, 20)


def test_noisy_labels_have_requested_scale():
    tasks = sample_batch(64, TaskTemplate(5, 40, noise=NoiseSpec(0.1)), 0)
    resid = np.concatenate([t.ys - t.xs @ t.w_star for t in tasks])
    assert 0.09 < resid.std() < 0.11


def test_sample_covariance_mean_eigenvalue():
    means = []
    for seed in range(64):
        task = sample_task(20, 40, seed=seed)
        x = task.xs[:40]
        means.append(np.mean(sym_eig(x.T @ x / 40).eigenvalues))
    assert abs(np.mean(means) - 1) <= 0.25


def test_same_seed_bit_identical():
    a = sample_task(20, 40, CovSpec.ill_conditioned(100), NoiseSpec(0.1), seed=7)
    b = sample_task(20, 40, CovSpec.ill_conditioned(100), NoiseSpec(0.1), seed=7)
    assert a.to_json() == b.to_json()
    assert a == b


def test_batch_seeds_and_distinct_weights():
    batch = sample_batch(64, TaskTemplate(20, 40), 10)
    assert batch[0] == sample_task(20, 40, seed=10)
    assert [t.seed for t in batch] == list(range(10, 74))
    ws = np.stack([t.w_star for t in batch])
    dists = np.linalg.norm(ws[:, None] - ws[None], axis=-1)
    assert np.all(dists[~np.eye(64, dtype=bool)] > 0)


def test_batch_weight_norm_concentrates():
    batch = sample_batch(256, TaskTemplate(20, 5), 0)
    assert abs(np.mean([t.w_star @ t.w_star / 20 for t in batch]) - 1) <= 0.15


def test_ill_conditioned_batch_redraws_sigma():
    batch = sample_batch(2, TaskTemplate(6, 8, CovSpec.ill_conditioned(100)), 0)
    assert not np.allclose(batch[0].sigma_matrix, batch[1].sigma_matrix)


def test_jsonl_round_trip(tmp_path):
    batch = sample_batch(3, TaskTemplate(4, 6, CovSpec.ill_conditioned(10), NoiseSpec(0.1)), 2)
    path = tmp_path / "tasks.jsonl"
    write_jsonl(batch, path)
    back = read_jsonl(path)
    assert back == batch
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"seed", "dim", "n", "sigma", "cov_kind", "w_star", "sigma_matrix", "xs", "ys"}


def test_task_arrays_read_only():
    task = sample_task(3, 4)
    with pytest.raises(ValueError):
        task.xs[0, 0] = 1.0
    assert isinstance(task, TaskInstance)

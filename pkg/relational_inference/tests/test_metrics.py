# tests/test_metrics.py

import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from scipy.optimize import linear_sum_assignment

from app.decoder.bank import EdgeModelBank
from app.errors import CapacityError, DataError, UnsupportedMetricError
from app.metrics.evaluation import (
    aggregate_reports,
    build_report,
    confusion_matrix,
    disagreement_rate,
    edge_frame,
    mae_ef,
    mae_increment,
    mae_symm,
    permutation_accuracy,
    rollout_mae_state,
    rollout_starts,
)
from app.metrics.report import EvaluationReport
from app.physics.teacher import simulate_teacher_batch


def _all_pairs_types(S, N, value=0):
    types = np.full((S, N, N), value, dtype=np.int64)
    for s in range(S):
        np.fill_diagonal(types[s], -1)
    return types


def _zero_reference(types, xi, xj):
    return np.zeros((types.shape[0], 2))


# ==============================================================================
# 边类型准确率
# ==============================================================================

def test_accuracy_takes_best_permutation():
    acc, perm = permutation_accuracy(np.array([0, 0, 1, 1]), np.array([1, 1, 0, 1]), 2)
    assert acc == pytest.approx(0.75)
    assert perm == (1, 0)


def test_identity_and_swapped_labels(rng):
    truth = rng.integers(0, 3, size=40)
    assert permutation_accuracy(truth, truth, 3) == (1.0, (0, 1, 2))
    relabel = np.array([2, 0, 1])
    acc, perm = permutation_accuracy(relabel[truth], truth, 3)
    assert acc == 1.0
    assert_array_equal(np.asarray(perm)[relabel], [0, 1, 2])


def test_ties_prefer_lexicographic_first_permutation():
    assert permutation_accuracy(np.array([0, 0]), np.array([0, 1]), 2) == (0.5, (0, 1))


def test_unset_truth_is_ignored():
    acc, _ = permutation_accuracy(np.array([-1, 1, 0]), np.array([-1, 1, 1]), 2)
    assert acc == pytest.approx(0.5)
    with pytest.raises(DataError):
        permutation_accuracy(np.array([-1, 0]), np.array([0, 0]), 2)
    with pytest.raises(DataError):
        permutation_accuracy(np.array([-1]), np.array([-1]), 2)
    with pytest.raises(DataError):
        confusion_matrix(np.zeros(3, dtype=int), np.zeros(4, dtype=int), 2)


def test_accuracy_is_capped_at_six_types():
    with pytest.raises(CapacityError):
        permutation_accuracy(np.zeros(3, dtype=int), np.zeros(3, dtype=int), 7)


@pytest.mark.parametrize("seed", range(10))
def test_accuracy_matches_assignment_solver(seed):
    rng = np.random.default_rng(seed)
    predicted = rng.integers(0, 4, size=60)
    truth = rng.integers(0, 4, size=60)
    w = confusion_matrix(predicted, truth, 4)
    rows, cols = linear_sum_assignment(w, maximize=True)
    acc, perm = permutation_accuracy(predicted, truth, 4)
    assert acc * 60 == pytest.approx(w[rows, cols].sum())
    assert w[np.arange(4), list(perm)].sum() == w[rows, cols].sum()


def test_disagreement_rate():
    types = np.array([[[-1, 0, 1], [0, -1, 1], [0, 0, -1]]])
    assert disagreement_rate(types) == pytest.approx(2.0 / 3.0)
    assert disagreement_rate(_all_pairs_types(2, 4, value=1)) == 0.0
    one_way = np.array([[[-1, 1], [-1, -1]]])
    assert disagreement_rate(one_way) is None


# ==============================================================================
# 力误差
# ==============================================================================

def test_force_error_against_custom_reference(make_random_dataset, make_constant_bank, rng):
    ds = replace(make_random_dataset(rng, S=2, T=3, N=3), edge_types=_all_pairs_types(2, 3))
    bank = make_constant_bank([[1.0, -3.0], [0.5, 0.5]])
    assert mae_ef(bank, ds, (0, 1), _zero_reference) == pytest.approx(2.0)
    # perm[预测] = 真值：真值类型 0 由网络 1 负责
    assert mae_ef(bank, ds, (1, 0), _zero_reference) == pytest.approx(0.5)


def test_symmetry_error_of_constant_forces(make_random_dataset, make_constant_bank, rng):
    ds = replace(make_random_dataset(rng, S=1, T=2, N=4), edge_types=_all_pairs_types(1, 4))
    bank = make_constant_bank([[1.0, -3.0], [0.5, 0.5]])
    assert mae_symm(bank, ds, (0, 1)) == pytest.approx(4.0)
    assert mae_symm(bank, ds, (1, 0)) == pytest.approx(1.0)


def test_teacher_forces_are_recovered_exactly(teacher_data):
    bank, data = teacher_data
    assert mae_ef(bank, data, (0, 1)) == pytest.approx(0.0, abs=1e-12)
    assert mae_ef(bank, data, (1, 0)) > 1e-3


def test_unsupported_force_metrics(make_random_dataset, make_constant_bank, rng):
    ds = replace(make_random_dataset(rng, N=3), edge_types=_all_pairs_types(2, 3))
    mp = EdgeModelBank.create("message_passing", [10, 6, 3], 2, 0.5, np.random.default_rng(0), node_hidden=5)
    with pytest.raises(UnsupportedMetricError):
        mae_ef(mp, ds, (0, 1), _zero_reference)
    with pytest.raises(UnsupportedMetricError):
        mae_symm(mp, ds, (0, 1))
    teacher_without_seed = replace(ds, kind="teacher")
    with pytest.raises(UnsupportedMetricError):
        mae_ef(make_constant_bank([[0.0, 0.0], [0.0, 0.0]]), teacher_without_seed, (0, 1))


def test_increment_error_on_teacher_data(teacher_data):
    bank, data = teacher_data
    assert mae_increment(bank, data.edge_types, data) == pytest.approx(0.0, abs=1e-8)
    flipped = np.where(data.edge_types >= 0, 1 - data.edge_types, -1)
    assert mae_increment(bank, flipped, data) > 1e-3


# ==============================================================================
# 滚动预测
# ==============================================================================

def test_rollout_starts_need_contiguous_frames():
    fi = np.array([0, 1, 2, 3, 5, 6])
    assert_array_equal(rollout_starts(fi, 1), [0, 1, 2, 4])
    assert_array_equal(rollout_starts(fi, 2), [0, 1])
    assert rollout_starts(fi, 6).size == 0
    with pytest.raises(UnsupportedMetricError):
        rollout_starts(fi, 0)


def test_teacher_rollout_is_exact(teacher_data):
    bank, data = teacher_data
    result = rollout_mae_state(bank, data.edge_types, data, 3)
    assert result.n_starts == 7
    assert not result.diverged
    assert result.mae == pytest.approx(0.0, abs=1e-9)


def test_downsampled_evolving_rollout_is_exact(teacher_data):
    bank, _ = teacher_data
    data = simulate_teacher_batch(
        bank, n_particles=5, steps=8, dt=0.005, n_sims=2, seed=40, teacher_seed=3, downsample=4, n_neighbors=2
    )
    assert data.dt == pytest.approx(0.02)
    assert data.neighbors.shape == (2, 8, 5, 2)
    result = rollout_mae_state(bank, data.edge_types, data, 3)
    assert result.n_starts == 5
    assert result.mae == pytest.approx(0.0, abs=1e-9)

    # 每帧只走一个步长为帧间隔的积分步，与模拟器不一致
    one_step = replace(data, system={**data.system, "dt": data.dt, "downsample": 1})
    assert rollout_mae_state(bank, data.edge_types, one_step, 3).mae > 1e-6


def test_rollout_divergence_is_flagged(make_random_dataset, make_constant_bank, rng):
    ds = make_random_dataset(rng, S=1, T=4, N=3)
    bank = make_constant_bank([[1e12, 1e12], [1e12, 1e12]])
    result = rollout_mae_state(bank, _all_pairs_types(1, 3), ds, 2)
    assert result.diverged and result.mae == float("inf")

    report = build_report(bank, _all_pairs_types(1, 3), ds, "cri", horizons=(2,))
    assert report.mae_state["2"] is None
    assert report.diverged["2"] is True
    assert "mae_state_2" in report.null_reasons


def test_rollout_without_windows(make_random_dataset, make_constant_bank, rng):
    ds = make_random_dataset(rng, S=1, T=2, N=3)
    result = rollout_mae_state(make_constant_bank([[0.0, 0.0], [0.0, 0.0]]), _all_pairs_types(1, 3), ds, 5)
    assert result.n_starts == 0 and np.isnan(result.mae)


# ==============================================================================
# 报告
# ==============================================================================

def test_teacher_report(teacher_data):
    bank, data = teacher_data
    report = build_report(bank, data.edge_types, data, "cri", horizons=(1, 3))
    assert report.accuracy == 1.0 and report.permutation == [0, 1]
    assert report.mae_ef == pytest.approx(0.0, abs=1e-12)
    assert report.disagreement_rate == 0.0
    assert report.n_edges == 3 * 4 * 3
    assert report.rollout_starts == {"1": 9, "3": 7}
    assert set(report.null_reasons) == set()


def test_report_without_ground_truth(teacher_data):
    bank, data = teacher_data
    report = build_report(bank, data.edge_types, data.without_ground_truth(), "cri", horizons=(1,))
    assert report.accuracy is None and report.mae_ef is None
    assert {"accuracy", "mae_ef", "mae_symm"} <= set(report.null_reasons)


def _report(accuracy, mae_state):
    return EvaluationReport(
        method="cri", decoder="physics_induced", dataset_kind="spring", n_sims=1, n_steps=2, n_edges=6,
        accuracy=accuracy, mae_state={"1": mae_state},
    )


def test_aggregate_reports_over_seeds():
    frame = aggregate_reports([_report(0.5, 0.2), _report(1.0, None)]).set_index("metric")
    assert frame.loc["accuracy", "mean"] == pytest.approx(0.75)
    assert frame.loc["accuracy", "std"] == pytest.approx(np.sqrt(0.125))
    assert frame.loc["mae_state_1", "mean"] == pytest.approx(0.2)
    assert np.isnan(frame.loc["mae_ef", "mean"])
    with pytest.raises(DataError):
        aggregate_reports([])


def test_edge_frame_marks_correct_edges():
    types = np.array([[[-1, 1], [0, -1]]])
    truth = np.array([[[-1, 0], [0, -1]]])
    frame = edge_frame(types, truth, (1, 0))
    assert len(frame) == 2
    assert list(frame["mapped"]) == [0, 1]
    assert list(frame["correct"]) == [True, False]
    assert list(edge_frame(types, None, None).columns) == ["sim", "receiver", "sender", "predicted"]


def test_metrics_do_not_import_the_http_layer():
    code = "import sys, app.metrics.evaluation; assert not any(m.startswith('app.api') for m in sys.modules)"
    root = Path(__file__).resolve().parents[1]
    subprocess.run([sys.executable, "-c", code], cwd=root, check=True)


def test_api_schemas_reexport_the_report_model():
    from app.api import schemas

    assert schemas.EvaluationReport is EvaluationReport

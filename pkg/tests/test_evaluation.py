import json

import numpy as np
import pytest

from fedcausal import evaluation


def test_pehe_values_and_errors():
    assert evaluation.pehe([1.0, 2.0], [1.0, 4.0]) == (2.0, pytest.approx(np.sqrt(2.0)))
    with pytest.raises(ValueError):
        evaluation.pehe([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        evaluation.pehe([], [])
    assert evaluation.ate_error(1.0, 1.5) == 0.5


def test_posterior_from_samples_and_gaussian():
    s = np.random.default_rng(0).normal(2.0, 1.0, 20000)
    rep = evaluation.posterior_report(s, true_tau=2.0)
    assert rep.covered and rep.lower == pytest.approx(2 - 1.96, abs=0.05)
    assert sum(rep.hist_counts) == s.size
    g = evaluation.posterior_report(mean=2.0, var=1.0, true_tau=5.0)
    assert not g.covered and g.upper == pytest.approx(2 + 1.959964, abs=1e-5)
    const = evaluation.posterior_report(np.full(4, 3.0), true_tau=3.0)
    assert const.covered and const.sd == 0.0
    with pytest.raises(ValueError):
        evaluation.posterior_report([1.0])
    with pytest.raises(ValueError):
        evaluation.posterior_report(mean=1.0)


def test_report_files(tmp_path):
    post = evaluation.posterior_report([0.9, 1.1, 1.0, 1.2], true_tau=1.0, bins=2)
    rep = evaluation.report("fed", [1.0, 1.0], [0.5, 1.5], posterior=post)
    assert rep.ate_error == 0.0 and rep.pehe == 0.25
    evaluation.write_reports_csv(tmp_path / "r.csv", [rep, evaluation.report("cen", [1.0], [2.0])])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("label,pehe") and len(lines) == 3
    evaluation.write_report_json(tmp_path / "r.json", rep)
    assert json.loads((tmp_path / "r.json").read_text())["posterior"]["covered"] is True
    evaluation.write_histogram_csv(tmp_path / "h.csv", post)
    assert (tmp_path / "h.csv").read_text().count("\n") == 3


def test_size_weighted_mean_is_correctly_rounded():
    assert evaluation.size_weighted_mean([7.0, 8.5, 6.8], [10, 8, 12]) == 7.32
    v, n = [0.1, 0.7, 1e16, -1e16], [3, 1, 2, 2]
    assert evaluation.size_weighted_mean(v, n) == evaluation.size_weighted_mean(v[::-1], n[::-1]) == 1.0 / 8
    with pytest.raises(ValueError):
        evaluation.size_weighted_mean([1.0], [0])
    with pytest.raises(ValueError):
        evaluation.size_weighted_mean([1.0, 2.0], [1])

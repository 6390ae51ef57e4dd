import math

import numpy as np
import pytest
from conftest import make_dataset

from riaftbart.data import (SurvivalDataset, center_responses, example_path, fit_centering, load_dataset,
                            save_dataset)
from riaftbart.exceptions import DataError, NumericalError
from riaftbart.simulation import gen_dataset, scenario_config


def _write(path, rows, header="time,event,cluster,trt,x1"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def test_four_row_parse(tmp_path):
    p = _write(tmp_path / "d.csv", ["2,1,a,t1,0.1", "3,0,a,t2,0.2", "5,1,b,t1,0.3", "7,1,b,t2,0.4"])
    d = load_dataset(p)
    assert d.n == 4 and d.n_clusters == 2 and d.n_treatments == 2
    np.testing.assert_array_equal(d.y, [2, 3, 5, 7])
    np.testing.assert_array_equal(d.delta, [1, 0, 1, 1])
    assert d.trt_labels == ("t1", "t2")


def test_nonpositive_time_names_row(tmp_path):
    p = _write(tmp_path / "d.csv", ["2,1,a,1,0", "3,1,a,2,0", "0,1,b,1,0", "7,1,b,2,0"])
    with pytest.raises(DataError, match="non-positive time, row 3"):
        load_dataset(p)


def test_schema_and_categorical(tmp_path):
    p = _write(tmp_path / "d.csv", ["2,1,a,1,lo,9", "3,1,a,2,hi,9", "5,0,b,1,lo,9", "7,1,b,2,mid,9"],
               header="T,E,site,arm,grade,id")
    d = load_dataset(p, {"time": "T", "event": "E", "cluster": "site", "trt": "arm"}, ["grade"], ["id"])
    assert d.names == ("grade=hi", "grade=lo", "grade=mid")
    np.testing.assert_array_equal(d.x.sum(axis=1), 1)


@pytest.mark.parametrize("row,msg", [("2,2,a,1,0", "event"), ("2,1,,1,0", "cluster"), ("x,1,a,1,0", "time")])
def test_bad_rows(tmp_path, row, msg):
    p = _write(tmp_path / "d.csv", ["2,1,a,1,0", "3,1,a,2,0", row])
    with pytest.raises(DataError):
        load_dataset(p)


def test_missing_column(tmp_path):
    p = _write(tmp_path / "d.csv", ["2,1,a"], header="time,event,cluster")
    with pytest.raises(DataError, match="trt"):
        load_dataset(p)


def test_simulated_round_trip(tmp_path):
    res = gen_dataset(scenario_config("ph10", K=3, n_k=20, tuning_n=5000))
    path = save_dataset(res.dataset, tmp_path / "sim.csv")
    back = load_dataset(path)
    assert back.equals(res.dataset)
    assert back.checksum() == res.dataset.checksum()


def test_example_dataset_loads():
    d = load_dataset(example_path())
    assert (d.n, d.n_treatments, d.n_clusters) == (200, 3, 5)


def _uncensored(logt):
    n = len(logt)
    return SurvivalDataset(np.zeros((n, 0)), np.resize([1, 2], n), np.exp(logt), np.ones(n, int),
                           np.resize([1, 2], n))


def test_centering_symmetric():
    c = fit_centering(_uncensored([-1.0, 1.0, -1.0, 1.0]))
    assert abs(c.mu_aft) < 1e-10
    assert abs(c.sigma_aft - 1.0) < 1e-10  # divisor N


def test_centering_degenerate():
    with pytest.raises(NumericalError):
        fit_centering(_uncensored([0.0, 0.0, 0.0, 0.0]))


def test_centering_censored_recovery():
    rng = np.random.default_rng(5)
    hits = 0
    for rep in range(20):
        logt = 2 + 0.5 * rng.normal(size=200)
        cpt = np.quantile(logt, 0.7)  # fixed-point censoring of the top 30%
        y = np.exp(np.minimum(logt, cpt))
        d = SurvivalDataset(np.zeros((200, 0)), np.resize([1, 2], 200), y, (logt <= cpt).astype(int),
                            np.resize([1, 2], 200))
        c = fit_centering(d)
        hits += abs(c.mu_aft - 2) < 3 * c.se_mu and abs(c.sigma_aft - 0.5) < 3 * c.se_sigma
    assert hits >= 19


def test_center_responses():
    d = _uncensored([2.0, 0.0])
    from riaftbart.data import CenteringInfo
    z = center_responses(d, CenteringInfo(2.0, 1.0))
    assert z[0] == 0.0
    z = center_responses(d, CenteringInfo(0.0, 1.0))
    assert z[1] == 0.0


def test_measured_drops_unmeasured():
    d = make_dataset(p=3)
    d2 = SurvivalDataset(d.x, d.a, d.y, d.delta, d.cluster, d.names, d.trt_labels, d.cluster_labels, ("x2",))
    m = d2.measured()
    assert m.names == ("x1", "x3") and m.p == 2
    assert math.isclose(m.x[:, 1].sum(), d.x[:, 2].sum())

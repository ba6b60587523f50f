import pytest

from spfnet.experiments import heldout_entries, mgf_direction, prior_ordering, strictly_better
from spfnet.scene import make_split
from spfnet.train import MGF_ROWS, PRIOR_ROWS, TrainConfig


def rows(names, values):
    return [{"variant": n, "rmse_cm": v} for n, v in zip(names, values)]


@pytest.mark.parametrize("a,b,want", [(99.0, 100.0, "better"), (99.5, 100.0, "better"), (99.6, 100.0, "tie"),
                                      (100.4, 100.0, "tie"), (100.6, 100.0, "worse")])
def test_strictly_better_margins(a, b, want):
    assert strictly_better(a, b) == want


def test_prior_ordering_cases():
    names = list(PRIOR_ROWS)  # RGB, RGB+N, RGB+S, RGB+N+S
    assert prior_ordering(rows(names, [40.0, 35.0, 36.0, 30.0]))["pass"]
    # one tie allowed, two not
    assert prior_ordering(rows(names, [40.0, 35.0, 36.0, 35.1]))["pass"]
    assert not prior_ordering(rows(names, [35.1, 35.0, 36.0, 35.1]))["pass"]
    # the full model losing to a single-prior model fails
    rep = prior_ordering(rows(names, [37.5, 35.5, 26.5, 27.8]))
    assert rep["links"][0] == "worse" and not rep["pass"]


def test_mgf_direction_margin():
    names = list(MGF_ROWS)
    assert mgf_direction(rows([names[0], names[-1]], [30.0, 29.6]))["pass"]
    assert not mgf_direction(rows([names[0], names[-1]], [30.0, 29.8]))["pass"]


def test_heldout_split_is_disjoint():
    cfg = TrainConfig(n_train=10, n_val=4)
    split = make_split(cfg.synth_config(), cfg.n_train, cfg.n_val)
    test = heldout_entries(cfg, 5)
    used = {i for i, _ in split["train"] + split["val"]}
    assert len(test) == 5 and not used & {i for i, _ in test}

import sys

import pytest

from hoidistill.data import load_split
from hoidistill.synthworld import generate_dataset, pretrain_teacher


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    """A 40/12 image dataset and a briefly trained teacher."""
    root = tmp_path_factory.mktemp("small_world")
    labels = generate_dataset(root, seed=1, n_train=40, n_test=12)
    est, report = pretrain_teacher(root, epochs=4, seed=1)
    return {
        "root": root,
        "labels": labels,
        "teacher": est.teacher_,
        "estimator": est,
        "train": load_split(root, "train"),
        "test": load_split(root, "test", with_gt=True),
    }


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])

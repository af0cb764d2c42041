import pytest
import torch

from nnvc.inter import InterConfig, InterModel
from nnvc.intra import IntraConfig, IntraModel

torch.set_num_threads(1)

TINY_INTRA = IntraConfig(channels=8, latent_channels=8, num_resblocks=4, prob_hidden=8)
TINY_INTER = InterConfig(channels=8, latent_channels=8, prob_hidden=8, entropy_channels=4, embed_dim=4)

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    if report.when == "setup" and not report.passed:
        entry["ok"] = False
        entry["details"].append(f"{item.name}: setup {report.outcome}")
    if report.when == "call":
        entry["ok"] &= report.passed
        details = [f"{k}={v}" for k, v in item.user_properties]
        entry["details"].append(f"{item.name}: {report.outcome}" + (f" ({', '.join(details)})" if details else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}: {entry['title']}")
        for line in entry["details"]:
            terminalreporter.write_line(f"    {line}")


@pytest.fixture
def intra_model():
    torch.manual_seed(0)
    return IntraModel(TINY_INTRA).eval()


@pytest.fixture
def inter_model():
    torch.manual_seed(1)
    return InterModel(TINY_INTER).eval()


@pytest.fixture(scope="session")
def trained_intra():
    """Briefly trained tiny intra model shared by tests that need non-random weights."""
    from nnvc.data import toy_dataset
    from nnvc.training import TrainConfig, train_intra

    clips = toy_dataset(16, 2, sizes=((64, 64),), seed=0)
    cfg = TrainConfig(lam=0.05, lr=2e-3, epochs=3, steps_per_epoch=100, batch=8, seed=0,
                      warmup_steps=100, mse_weight=10.0)
    return train_intra(clips, cfg, model_cfg=TINY_INTRA).model.eval()

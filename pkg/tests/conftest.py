import numpy as np
import pytest

from crtimpute.datagen import DESIGNS, Design, GenParams, ScenarioConfig, TrialDataset, generate_dataset
from crtimpute.missingness import impose_missingness, make_missingness_spec
from crtimpute.rngkit import make_stream


def scenario(design="many_small", icc=(0.2, 0.2), mechanism="treatment", eta="low", nonresponse="equal",
             seed=11, **kw) -> ScenarioConfig:
    d = DESIGNS[design] if isinstance(design, str) else design
    return ScenarioConfig(scenario_index=kw.pop("scenario_index", 0), icc=icc, design=d, mechanism=mechanism,
                          eta=eta, nonresponse=nonresponse, master_seed=seed, **kw)


def complete_data(config=None, replicate=0) -> TrialDataset:
    config = config or scenario()
    return generate_dataset(config, make_stream(config.master_seed, config.scenario_index, replicate, "datagen"))


def incomplete_data(config=None, replicate=0) -> TrialDataset:
    config = config or scenario()
    full = complete_data(config, replicate)
    return impose_missingness(full, make_missingness_spec(config),
                              make_stream(config.master_seed, config.scenario_index, replicate, "missing"))


def blank(data: TrialDataset, mask) -> TrialDataset:
    """Copy of ``data`` with the cells in the boolean ``mask`` (n x 2) made missing."""
    out = data.copy()
    out.r = data.r & ~mask
    out.y = np.where(out.r, data.y, np.nan)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


__all__ = ["scenario", "complete_data", "incomplete_data", "blank", "Design", "GenParams"]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import SUMMARY
    except ImportError:
        return
    if SUMMARY:
        terminalreporter.section("acceptance criteria")
        for line in SUMMARY:
            terminalreporter.write_line(line)

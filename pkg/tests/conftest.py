"""Shared fixtures: parameter sets and a fitted correction model."""
from __future__ import annotations

import warnings

import pytest

from vgamerican import correction_learn as cl
from vgamerican.pricer_cli import DEFAULT_DATASET, DEFAULT_MODEL, MainPricer
from vgamerican.vg_model import MarketEnv, VgParams

SWEEP = [VgParams(0.1, 0.1, -0.5), VgParams(0.4, 0.6, -0.5), VgParams(0.1, 0.6, -0.1),
         VgParams(0.4, 0.1, -0.1)]


@pytest.fixture(scope="session")
def short_env():
    return MarketEnv(0.05, 0.01, 1.0 / 12.0)


@pytest.fixture(scope="session")
def desk_bundle(tmp_path_factory):
    """Model fitted on the 64-point desk grid (built once per session)."""
    path = tmp_path_factory.mktemp("desk") / "desk.csv"
    report = cl.build_dataset(cl.grid_points(cl.DESK_GRID_LEVELS), path, workers=1)
    assert not report.failed
    records = cl.read_dataset(path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", cl.DegenerateFitWarning)
        bundle = cl.fit_bundle(records, checksum=cl.dataset_checksum(path))
    return bundle, path, records


@pytest.fixture(scope="session")
def main_pricer():
    """Pricer from the shipped full-grid model; skipped when it is absent."""
    if not (DEFAULT_DATASET.exists() and DEFAULT_MODEL.exists()):
        pytest.skip("shipped full-grid dataset/model not present")
    return MainPricer.from_files(DEFAULT_MODEL, DEFAULT_DATASET)

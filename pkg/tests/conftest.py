"""Shared fixtures: the desk-preset end-to-end run is trained once per session."""

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from hisir import imaging, nnet
from hisir.config import RunConfig, load_config
from hisir.pipeline import TrainLog, evaluate_maps, score_suite, synthesize, train


@dataclass
class DeskRun:
    cfg: RunConfig
    data: Path
    state: nnet.ModelState
    log: TrainLog
    reports: dict
    seconds: float


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    cfg = load_config(preset="desk")
    data = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    synthesize(data, cfg)
    images = [imaging.read_image(p) for p in sorted((data / "normal").glob("*.ppm"))]
    state, log = train(images, cfg)
    reports = {("rops", "learned"): evaluate_maps(score_suite(data, state, cfg), cfg, sweep=True)}
    elapsed = time.perf_counter() - t0  # synth + train + eval of the full model
    # ablations reuse the trained weights and only change the inference path
    for merge, gate in [("average", "learned"), ("rops", "open")]:
        c = cfg.replace(merge=merge, gate=gate)
        reports[merge, gate] = evaluate_maps(score_suite(data, state, c), c, sweep=True)
    return DeskRun(cfg, data, state, log, reports, elapsed)

import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def record(number, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        _CRITERIA.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# desk-scale training runs shared by the acceptance and reproduction tests

DESK_SEEDS = (0, 1, 2)
DESK_ITERS = 5000


@dataclass
class Run:
    variant: int
    seed: int
    strategy: str
    params: dict
    ods: float
    ois: float
    probs: list
    seconds: float


class DeskRuns:
    """Trains each (variant, seed, strategy) at most once per session.

    Set LSN_RUN_CACHE to a directory to keep checkpoints across sessions
    while developing; the timings are then those of the original runs.
    """

    def __init__(self, root: Path):
        from lsn.datakit import load_dataset, synth_dataset

        synth_dataset(root / "train", 200, 96, seed=1)
        synth_dataset(root / "test", 50, 96, seed=2)
        self.train = load_dataset(root / "train")
        self.test = load_dataset(root / "test")
        self.cache = Path(os.environ["LSN_RUN_CACHE"]) if os.environ.get("LSN_RUN_CACHE") else None
        self._runs: dict[tuple, Run] = {}

    def get(self, variant: int, seed: int, strategy: str = "end-to-end") -> Run:
        key = (variant, seed, strategy)
        if key not in self._runs:
            self._runs[key] = self._run(*key)
        return self._runs[key]

    def _run(self, variant, seed, strategy) -> Run:
        from lsn import evalkit
        from lsn.cli import spec_for
        from lsn.config import Config
        from lsn.model import prepare_image, probability
        from lsn.trainer import Checkpoint, train

        cfg = Config(variant=f"lsn{variant}", seed=seed, max_iters=DESK_ITERS, strategy=strategy)
        spec = spec_for(cfg)
        tag = f"lsn{variant}-s{seed}-{strategy.replace('(', '').replace(')', '')}"
        t0 = time.perf_counter()
        cached = self.cache / f"{tag}.lsnt" if self.cache else None
        if cached is not None and cached.exists():
            ckpt = Checkpoint.load(cached)
            train_s = float((self.cache / f"{tag}.seconds").read_text())
        else:
            ckpt, _ = train(spec, self.train, cfg.train_config())
            train_s = time.perf_counter() - t0
            if cached is not None:
                self.cache.mkdir(parents=True, exist_ok=True)
                ckpt.save(cached)
                (self.cache / f"{tag}.seconds").write_text(repr(train_s))
        t1 = time.perf_counter()
        probs = [probability(spec, ckpt.params, prepare_image(s.image)) for s in self.test]
        report = evalkit.evaluate(zip(probs, (s.gt for s in self.test)))
        return Run(variant, seed, strategy, ckpt.params, report.ods, report.ois, probs,
                   train_s + time.perf_counter() - t1)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedsq import nncore  # noqa: E402
from fedsq.nncore import Conv2d, Dense, Flatten, ModelArch  # noqa: E402


def conv_arch():
    return ModelArch(
        (2, 6, 6),
        (
            Conv2d(2, 3, 3, stride=1, padding=1, gated=True),
            Conv2d(3, 4, 2, stride=2, padding=0, gated=True),
            Flatten(),
            Dense(36, 5, gated=True),
            Dense(5, 3),
        ),
        3,
    )


def dense_arch():
    return nncore.mlp(4, [6, 5], 3)


def flat(params, layers):
    return np.concatenate([np.concatenate([params[k][0].ravel(), params[k][1].ravel()]) for k in layers])


def unflat(params, layers, vec):
    entries, pos = {}, 0
    for k in layers:
        w, b = params[k]
        entries[k] = (vec[pos:pos + w.size].reshape(w.shape), vec[pos + w.size:pos + w.size + b.size])
        pos += w.size + b.size
    return params.replace(entries)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])

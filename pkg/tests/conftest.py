import numpy as np
import pytest

from imvlstm import ndtape as nd

# five-point stencil: truncation O(h^4) keeps tiny gradient entries resolvable
FD_STEP = 1e-3
FD_ORDER = 4
GRAD_RTOL = 1e-4


def gradient_check(loss_fn, params: dict, step: float = FD_STEP):
    """Compare tape gradients of ``loss_fn(tracked) -> scalar Tensor`` to central differences.

    Returns the largest elementwise relative error over every parameter.
    """
    with nd.Tape() as tape:
        tracked = {k: tape.watch(v, k) for k, v in params.items()}
        loss = loss_fn(tracked)
    analytic = nd.backward(tape, loss, tracked)

    def value():
        return float(loss_fn(params).value)

    worst = 0.0
    for k, arr in params.items():
        numeric = nd.finite_difference_grad(value, arr, step, FD_ORDER)
        worst = max(worst, nd.relative_error(analytic[k], numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

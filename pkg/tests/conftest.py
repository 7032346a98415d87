import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def reference_conv(x, w, b=None, pad=0, stride=1, mode="constant"):
    """Direct-summation cross-correlation, one output element at a time."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for q in range(o):
            for i in range(ho):
                for j in range(wo):
                    win = xp[a, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[a, q, i, j] = np.sum(win * w[q]) + (b[q] if b is not None else 0.0)
    return out


def reference_line_median(x, offsets):
    """Median over each pixel's line samples by sorting, with clamped (replicate) borders."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            vals = np.stack([x[:, :, min(max(i + dy, 0), h - 1), min(max(j + dx, 0), w - 1)] for dy, dx in offsets])
            out[:, :, i, j] = np.sort(vals, axis=0)[len(offsets) // 2]
    return out


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line and fail the test if the criterion did not hold."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

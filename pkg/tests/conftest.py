import numpy as np
import pytest


def central_fd(f, array, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``array`` (mutated in place, restored)."""
    out = np.zeros_like(array)
    flat = array.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return out


def max_rel_error(analytic, numeric, floor=1e-5):
    """Largest entrywise |a - n| / max(|a|, |n|, floor).

    The floor keeps exactly-zero gradients (e.g. a bias feeding batchnorm)
    from turning ~1e-10 finite-difference roundoff into a large ratio.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian_blobs(n_classes=3, per_class=200, separation=10.0, dim=12, seed=0):
    """Encoded features and 0..C-1 labels from the synthetic generator."""
    from gmvae_osr import data as D

    table, _, _ = D.synth_generate(D.SynthConfig(
        n_classes=n_classes, samples_per_class=per_class, n_numeric=dim, separation=separation, seed=seed,
    ))
    ds = D.encode(table)
    return ds.features, ds.labels


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    CRITERIA[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(CRITERIA[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])

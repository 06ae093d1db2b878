import numpy as np
import pytest


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Twenty normalized synthetic faces plus a shape model fitted to them."""
    from sirlan.patches import normalize_face
    from sirlan.sampling import Sample
    from sirlan.shape_model import fit_pca, shape_to_params
    from sirlan.synthetic import SyntheticSpec, generate_dataset

    samples = []
    for im, pts in generate_dataset(SyntheticSpec(count=20, seed=3)):
        face, lms, tf = normalize_face(im, pts, 64, 0.1)
        samples.append(Sample(face, lms, None, im.name, tf))
    model = fit_pca([s.landmarks for s in samples])
    for s in samples:
        s.params = shape_to_params(s.landmarks, model)
    return samples, model


def pytest_configure(config):
    config._acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = sorted(getattr(config, "_acceptance", []), key=lambda r: r[0])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in rows:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns the verdict so tests can assert on it."""
    def record(number, title, ok, detail=""):
        ok = bool(ok)
        request.config._acceptance.append((number, title, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
        return ok
    return record

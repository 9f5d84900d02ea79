import numpy as np
import pytest

from splitdmd.ks import KsConfig, SnapshotMatrix, simulate_ks


def snapshots(values, t_grid):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return SnapshotMatrix(values, np.arange(values.shape[0]) / values.shape[0], np.asarray(t_grid, dtype=float))


def exponential_data(omegas, m=40, n=120, dt=0.05, seed=0, t0=0.0):
    """Real data z(t) = Phi0 (b0 * exp(omega (t - t0))) built from conjugate-closed ``omegas``."""
    rng = np.random.default_rng(seed)
    omegas = np.asarray(omegas, dtype=complex)
    r = omegas.size
    modes = rng.standard_normal((m, r)) + 1j * rng.standard_normal((m, r))
    b = rng.standard_normal(r) + 1j * rng.standard_normal(r)
    # pair modes and amplitudes with their conjugate partners so the data are real
    for j in range(r):
        if omegas[j].imag < 0:
            k = int(np.argmin(np.abs(omegas - omegas[j].conjugate())))
            modes[:, j], b[j] = modes[:, k].conj(), b[k].conj()
        elif omegas[j].imag == 0:
            modes[:, j], b[j] = modes[:, j].real, b[j].real
    t = t0 + np.arange(n) * dt
    values = (modes @ (b[:, None] * np.exp(np.outer(omegas, t - t0)))).real
    return SnapshotMatrix(values, np.arange(m) / m, t), modes, b


@pytest.fixture(scope="session")
def ks_bifurcation():
    return simulate_ks(KsConfig(length_L=12.6))


@pytest.fixture(scope="session")
def ks_chaos():
    return simulate_ks(KsConfig(length_L=402.3, num_nodes=1024))


ACCEPTANCE = []


def acceptance_line(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

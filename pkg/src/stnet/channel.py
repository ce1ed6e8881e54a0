"""Channel-domain math: angular-delay transform, truncation, compression
ratio arithmetic, and zero-forcing spectral-efficiency evaluation.

The frequency-antenna channel (sub-carriers x antennas) is made sparse by a
two-sided unitary DFT; multipath energy then concentrates in the leading
delay rows, which get kept. Both DFT factors use the unitary 1/sqrt(N)
normalization so the untruncated transform preserves Frobenius norm exactly.
The delay-side factor uses the +j exponent sign: an integer sample delay tau
lands its energy in row tau, so physical channels with delays below the cut
survive truncation losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


def _unitary_dft(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.exp(2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def to_angular_delay(freq_channel: np.ndarray, n_delay_rows: int) -> np.ndarray:
    """Transform a complex [n_sub, n_tx] channel and keep the first rows.

    Returns a real tensor [2, n_delay_rows, n_tx]: plane 0 holds the real
    part, plane 1 the imaginary part.
    """
    n_sub, n_tx = freq_channel.shape
    if not 1 <= n_delay_rows <= n_sub:
        raise ValueError(f"n_delay_rows {n_delay_rows} outside [1, {n_sub}]")
    f_delay = _unitary_dft(n_sub)
    f_angle = _unitary_dft(n_tx)
    sparse = f_delay @ freq_channel @ f_angle.conj().T
    kept = sparse[:n_delay_rows, :]
    return np.stack([kept.real, kept.imag])


def from_angular_delay(planes: np.ndarray, n_sub: int) -> np.ndarray:
    """Inverse transform of a [2, n_delay_rows, n_tx] tensor.

    Truncated delay rows are zero-padded back to ``n_sub`` before the
    inverse, so the result is exact iff truncation lost nothing.
    """
    if planes.ndim != 3 or planes.shape[0] != 2:
        raise ValueError(f"expected [2, n_delay, n_tx], got {planes.shape}")
    n_delay_rows, n_tx = planes.shape[1], planes.shape[2]
    if n_sub < n_delay_rows:
        raise ValueError(f"n_sub {n_sub} smaller than stored delay rows {n_delay_rows}")
    sparse = np.zeros((n_sub, n_tx), dtype=np.complex128)
    sparse[:n_delay_rows, :] = planes[0] + 1j * planes[1]
    f_delay = _unitary_dft(n_sub)
    f_angle = _unitary_dft(n_tx)
    return f_delay.conj().T @ sparse @ f_angle


def compression_ratio(codeword_len: int, n_delay_rows: int, n_tx: int) -> Fraction:
    """Exact ratio of codeword length to the 2*N_c*N_t retained reals."""
    if codeword_len <= 0 or n_delay_rows <= 0 or n_tx <= 0:
        raise ValueError("all dimensions must be positive")
    return Fraction(codeword_len, 2 * n_delay_rows * n_tx)


@dataclass
class PrecodingScenario:
    """Multi-user downlink snapshot for zero-forcing evaluation.

    ``true_channels`` and ``est_channels`` are complex arrays of shape
    [users, n_sub, n_tx]. Row k is user k's row of the stacked channel
    matrix, i.e. the row vector that multiplies the precoding column on
    reception (the receive model's conjugate transpose is already baked
    in, matching the channel-matrix stacking convention). The precoder is
    computed from the estimates and judged against the true rows.
    Unit-power symbols; unit total transmit power split equally across
    users; noise power 1/snr_linear.
    """

    true_channels: np.ndarray
    est_channels: np.ndarray
    snr_db: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])

    def __post_init__(self):
        self.true_channels = np.asarray(self.true_channels, dtype=np.complex128)
        self.est_channels = np.asarray(self.est_channels, dtype=np.complex128)
        if self.true_channels.shape != self.est_channels.shape:
            raise ValueError(f"channel shapes differ: {self.true_channels.shape} "
                             f"vs {self.est_channels.shape}")
        if self.true_channels.ndim != 3:
            raise ValueError(f"expected [users, n_sub, n_tx], got {self.true_channels.shape}")
        users, _, n_tx = self.true_channels.shape
        if users > n_tx:
            raise ValueError(f"{users} users exceed {n_tx} antennas")


@dataclass(frozen=True)
class SpectralEfficiencyPoint:
    snr_db: float
    se_bits_per_hz: float
    pinv_fallbacks: int


def zf_precoder(est: np.ndarray) -> tuple[np.ndarray, bool]:
    """Zero-forcing precoder for one sub-carrier's [users, n_tx] estimate.

    Columns are normalized to unit norm then scaled so total power is one.
    Returns the precoder and whether the Gram matrix was singular enough to
    need a pseudo-inverse fallback.
    """
    users = est.shape[0]
    gram = est @ est.conj().T
    fallback = False
    try:
        inv = np.linalg.inv(gram)
        if not np.all(np.isfinite(inv)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(gram)
        fallback = True
    precoder = est.conj().T @ inv
    norms = np.linalg.norm(precoder, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    precoder = precoder / norms / np.sqrt(users)
    return precoder, fallback


def zf_spectral_efficiency(scenario: PrecodingScenario) -> list[SpectralEfficiencyPoint]:
    """Sum spectral efficiency vs SNR, averaged over sub-carriers."""
    users, n_sub, _ = scenario.true_channels.shape
    gains = np.zeros((n_sub, users, users))
    fallbacks = 0
    for n in range(n_sub):
        precoder, fell_back = zf_precoder(scenario.est_channels[:, n, :])
        fallbacks += int(fell_back)
        cross = scenario.true_channels[:, n, :] @ precoder
        gains[n] = np.abs(cross) ** 2

    signal = np.einsum("nkk->nk", gains)
    interference = gains.sum(axis=2) - signal

    points = []
    for snr_db in scenario.snr_db:
        noise_power = 10.0 ** (-snr_db / 10.0)
        sinr = signal / (interference + noise_power)
        se = float(np.log2(1.0 + sinr).sum(axis=1).mean())
        points.append(SpectralEfficiencyPoint(float(snr_db), se, fallbacks))
    return points


def interference_power(scenario: PrecodingScenario) -> float:
    """Worst-case inter-user leakage |h_k^H v_j|^2 (j != k) over sub-carriers."""
    users, n_sub, _ = scenario.true_channels.shape
    worst = 0.0
    for n in range(n_sub):
        precoder, _ = zf_precoder(scenario.est_channels[:, n, :])
        cross = np.abs(scenario.true_channels[:, n, :] @ precoder) ** 2
        off_diag = cross - np.diag(np.diag(cross))
        worst = max(worst, float(off_diag.max()) if users > 1 else 0.0)
    return worst

"""Constant-acceleration Kalman filter with an optional velocity block in the observation.

State order is (x, y, vx, vy, ax, ay). The box part of a detection
(z, yaw, l, w, h) is filtered as an independent random-walk vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import SingularInnovation

N_KIN = 6
N_AUX = 5
POS = np.array([0, 1])
VEL = np.array([2, 3])
ACC = np.array([4, 5])


def transition(dt: float) -> np.ndarray:
    F = np.eye(N_KIN)
    F[POS, VEL] = dt
    F[POS, ACC] = 0.5 * dt * dt
    F[VEL, ACC] = dt
    return F


def process_noise(dt: float, q: float = 1.0) -> np.ndarray:
    """White-noise-jerk process noise for both axes, intensity q (m^2/s^5)."""
    b = q * np.array([[dt ** 5 / 20, dt ** 4 / 8, dt ** 3 / 6],
                      [dt ** 4 / 8, dt ** 3 / 3, dt ** 2 / 2],
                      [dt ** 3 / 6, dt ** 2 / 2, dt]])
    Q = np.zeros((N_KIN, N_KIN))
    for axis in range(2):
        idx = np.array([0, 2, 4]) + axis
        Q[np.ix_(idx, idx)] = b
    return Q


def symmetrize_psd(P, floor=0.0):
    """Symmetrize and clip eigenvalues below ``floor``."""
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() >= floor:
        return P
    w = np.maximum(w, floor)
    return 0.5 * ((V * w) @ V.T + ((V * w) @ V.T).T)


@dataclass
class TrackState:
    mean: np.ndarray                  # (6,)
    cov: np.ndarray                   # (6, 6)
    track_id: int = 0
    t: float = 0.0
    age: int = 0
    misses: int = 0
    aux: np.ndarray | None = None     # (5,) z, yaw, l, w, h
    aux_cov: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(N_KIN)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(N_KIN, N_KIN)

    @property
    def position(self):
        return self.mean[POS]

    @property
    def velocity(self):
        return self.mean[VEL]

    @property
    def acceleration(self):
        return self.mean[ACC]

    @classmethod
    def from_position(cls, xy, pos_cov, track_id=0, t=0.0, vel_var=25.0, acc_var=4.0):
        mean = np.zeros(N_KIN)
        mean[POS] = xy
        cov = np.zeros((N_KIN, N_KIN))
        cov[np.ix_(POS, POS)] = pos_cov
        cov[VEL, VEL] = vel_var
        cov[ACC, ACC] = acc_var
        return cls(mean, cov, track_id, t)


@dataclass
class DetectionObservation:
    """o = (x, y, z, yaw, l, w, h) with noise R (7x7); optional velocity d with noise R_d."""

    o: np.ndarray
    R: np.ndarray
    d: np.ndarray | None = None
    R_d: np.ndarray | None = None
    t: float = 0.0

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=np.float64).reshape(7)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(7, 7)
        if self.d is not None:
            self.d = np.asarray(self.d, dtype=np.float64).reshape(2)
            if self.R_d is None:
                raise ValueError("velocity measurement needs R_d")
            self.R_d = np.asarray(self.R_d, dtype=np.float64).reshape(2, 2)
        for M in (self.R, self.R_d):
            if M is not None and (not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12):
                raise ValueError("observation covariances must be symmetric PSD")


def kf_predict(track: TrackState, dt: float, q: float = 1.0, aux_q: float = 0.01) -> TrackState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    F = transition(dt)
    mean = F @ track.mean
    cov = symmetrize_psd(F @ track.cov @ F.T + process_noise(dt, q))
    aux_cov = None if track.aux_cov is None else track.aux_cov + np.eye(N_AUX) * aux_q * dt
    return replace(track, mean=mean, cov=cov, t=track.t + dt, aux_cov=aux_cov)


def _update(mean, cov, z, H, R):
    S = H @ cov @ H.T + R
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise SingularInnovation("innovation covariance is not positive definite") from None
    if np.linalg.cond(S) > 1e14:
        raise SingularInnovation("innovation covariance is numerically singular")
    # K = P H^T S^-1 via two triangular solves
    PHt = cov @ H.T
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    y = z - H @ mean
    mean = mean + K @ y
    I_KH = np.eye(len(mean)) - K @ H
    cov = I_KH @ cov @ I_KH.T + K @ R @ K.T       # Joseph form
    return mean, symmetrize_psd(cov)


def measurement_model(with_velocity: bool):
    rows = [0, 1] + ([2, 3] if with_velocity else [])
    H = np.zeros((len(rows), N_KIN))
    H[np.arange(len(rows)), rows] = 1.0
    return H


def kf_update_extended(track: TrackState, obs: DetectionObservation) -> TrackState:
    """Linear update on (x, y) and, when ``obs.d`` is given, on (vx, vy) with the
    block-diagonal noise diag(R_xy, R_d)."""
    has_v = obs.d is not None
    H = measurement_model(has_v)
    if has_v:
        z = np.concatenate([obs.o[:2], obs.d])
        R = np.zeros((4, 4))
        R[:2, :2] = obs.R[:2, :2]
        R[2:, 2:] = obs.R_d
    else:
        z, R = obs.o[:2], obs.R[:2, :2]
    mean, cov = _update(track.mean, track.cov, z, H, R)
    out = replace(track, mean=mean, cov=cov, age=track.age + 1, misses=0)
    Ra = obs.R[2:, 2:]
    if track.aux is None:
        out.aux, out.aux_cov = obs.o[2:].copy(), Ra.copy()
    else:
        out.aux, out.aux_cov = _update(track.aux, track.aux_cov, obs.o[2:], np.eye(N_AUX), Ra)
    return out

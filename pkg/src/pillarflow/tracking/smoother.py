"""Fixed-lag smoothing of constant-acceleration tracks as one dense least-squares problem.

Each window node is a state (x, y, vx, vy, ax, ay). Factors, all written as
whitened residuals A x - b:

* motion between consecutive nodes: W_k (x_{k+1} - F(dt) x_k), W_k = Q(dt)^(-1/2) * motion_weight
* position prior on a node: Sigma_p^(-1/2) (x_xy - z)
* velocity prior on a node: Sigma_v^(-1/2) (x_v - d)
* marginal prior on the oldest node, carried over from marginalized nodes
* only if the rest leaves the window underdetermined (fewer than three observed
  nodes): a weak zero prior on the first node's velocity and acceleration

Nodes leaving the window are eliminated in square-root form (QR), which is exact
for this linear-Gaussian problem, so the window solution equals the full-history solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import RankDeficient
from .kalman import ACC, N_KIN, POS, VEL, process_noise, symmetrize_psd, transition

FIRST_NODE_REG = 1e-3   # sqrt-information of the fallback zero velocity / acceleration prior


def inv_sqrt(M):
    """Symmetric inverse square root via eigendecomposition."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() <= 0:
        raise RankDeficient("covariance is not positive definite")
    return (V / np.sqrt(w)) @ V.T


@dataclass
class Node:
    t: float
    pos: np.ndarray | None = None
    pos_cov: np.ndarray | None = None
    vel: np.ndarray | None = None
    vel_cov: np.ndarray | None = None


@dataclass
class SmootherWindow:
    lag: int = 5
    q: float = 1.0
    motion_weight: float = 1.0
    nodes: list = field(default_factory=list)
    prior_L: np.ndarray | None = None     # sqrt information of the marginal prior on nodes[0]
    prior_b: np.ndarray | None = None     # so the prior residual is prior_L x0 - prior_b

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError("lag must be at least one node")

    def add(self, t, pos=None, pos_cov=None, vel=None, vel_cov=None):
        if self.nodes and not t > self.nodes[-1].t:
            raise ValueError("timestamps must be strictly increasing")
        self.nodes.append(Node(float(t), None if pos is None else np.asarray(pos, float),
                               None if pos_cov is None else np.asarray(pos_cov, float),
                               None if vel is None else np.asarray(vel, float),
                               None if vel_cov is None else np.asarray(vel_cov, float)))
        while len(self.nodes) > self.lag:
            self.marginalize_oldest()

    def motion_sqrt_info(self, dt):
        return inv_sqrt(process_noise(dt, self.q)) * self.motion_weight

    # --------------------------------------------------------------- factor assembly

    def _factors(self, nodes, prior_L, prior_b, regularize=False):
        """Whitened (A, b) rows over the stacked state of ``nodes``."""
        n = len(nodes)
        rows_A, rows_b = [], []

        def block(k, J):
            A = np.zeros((J.shape[0], n * N_KIN))
            A[:, k * N_KIN:(k + 1) * N_KIN] = J
            return A

        if prior_L is not None:
            rows_A.append(block(0, prior_L))
            rows_b.append(prior_b)
        if regularize:
            J = np.zeros((4, N_KIN))
            J[[0, 1], VEL] = FIRST_NODE_REG
            J[[2, 3], ACC] = FIRST_NODE_REG
            rows_A.append(block(0, J))
            rows_b.append(np.zeros(4))
        for k, nd in enumerate(nodes):
            if nd.pos is not None:
                Wp = inv_sqrt(nd.pos_cov)
                J = np.zeros((2, N_KIN))
                J[:, POS] = Wp
                rows_A.append(block(k, J))
                rows_b.append(Wp @ nd.pos)
            if nd.vel is not None:
                Wv = inv_sqrt(nd.vel_cov)
                J = np.zeros((2, N_KIN))
                J[:, VEL] = Wv
                rows_A.append(block(k, J))
                rows_b.append(Wv @ nd.vel)
        for k in range(n - 1):
            dt = nodes[k + 1].t - nodes[k].t
            W = self.motion_sqrt_info(dt)
            A = np.zeros((N_KIN, n * N_KIN))
            A[:, k * N_KIN:(k + 1) * N_KIN] = -W @ transition(dt)
            A[:, (k + 1) * N_KIN:(k + 2) * N_KIN] = W
            rows_A.append(A)
            rows_b.append(np.zeros(N_KIN))
        if not rows_A:
            return np.zeros((0, n * N_KIN)), np.zeros(0)
        return np.vstack(rows_A), np.concatenate(rows_b)

    def system(self, regularize=False):
        return self._factors(self.nodes, self.prior_L, self.prior_b, regularize)

    def marginalize_oldest(self):
        """Fold nodes[0] into a prior on nodes[1]."""
        if len(self.nodes) < 2:
            return
        sub = self.nodes[:2]
        A, b = self._factors(sub, self.prior_L, self.prior_b)
        # drop the motion rows' dependence on later nodes: sub has exactly two nodes, so
        # every factor touching nodes[0] is included and nodes[1]'s own measurements are
        # kept out to avoid counting them twice
        keep = _rows_touching_first(A)
        A, b = A[keep], b[keep]
        # square-root elimination: QR with nodes[0] columns first leaves the
        # conditional of nodes[1] in the lower-right block
        m = A.shape[0]
        Q, R = np.linalg.qr(A, mode="complete")
        c = Q.T @ b
        R00 = R[:N_KIN, :N_KIN]
        d = np.abs(np.diag(R00))
        if m < N_KIN or d.min() <= 1e-12 * max(d.max(), 1.0):
            raise RankDeficient("oldest node is not determined; cannot marginalize")
        hi = min(m, 2 * N_KIN)
        self.prior_L = R[N_KIN:hi, N_KIN:]
        self.prior_b = c[N_KIN:hi]
        self.nodes = self.nodes[1:]


def _rows_touching_first(A):
    return np.any(A[:, :N_KIN] != 0, axis=1)


@dataclass
class SmoothedStates:
    times: np.ndarray
    means: np.ndarray     # (n, 6)
    covs: np.ndarray      # (n, 6, 6)

    @property
    def last(self):
        return self.means[-1], self.covs[-1]


def _full_rank(A, n_nodes):
    dim = n_nodes * N_KIN
    return A.shape[0] >= dim and np.linalg.matrix_rank(A) == dim


def solve_dense(A, b, n_nodes):
    dim = n_nodes * N_KIN
    if not _full_rank(A, n_nodes):
        raise RankDeficient(f"window is underdetermined ({A.shape[0]} rows, {dim} unknowns)")
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    info = A.T @ A
    cov = np.linalg.inv(info)
    covs = np.stack([symmetrize_psd(cov[k * N_KIN:(k + 1) * N_KIN, k * N_KIN:(k + 1) * N_KIN])
                     for k in range(n_nodes)])
    return x.reshape(n_nodes, N_KIN), covs


def fixed_lag_smooth(window: SmootherWindow) -> SmoothedStates:
    if not window.nodes:
        raise RankDeficient("empty window")
    if window.prior_L is None and not any(nd.pos is not None for nd in window.nodes):
        raise RankDeficient("no position measurement and no prior in the window")
    A, b = window.system()
    if not _full_rank(A, len(window.nodes)):
        A, b = window.system(regularize=True)
    means, covs = solve_dense(A, b, len(window.nodes))
    return SmoothedStates(np.array([nd.t for nd in window.nodes]), means, covs)


def batch_smooth(nodes, q=1.0, motion_weight=1.0) -> SmoothedStates:
    """Full-history solve with the same factors and no marginalization (reference)."""
    w = SmootherWindow(lag=max(1, len(nodes)), q=q, motion_weight=motion_weight)
    w.nodes = list(nodes)
    return fixed_lag_smooth(w)

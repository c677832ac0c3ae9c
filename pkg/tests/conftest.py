import itertools
import math

import numpy as np
import pytest

from probgrasp.geometry import CameraIntrinsics, GripperModel, Pose, project, random_rotation
from probgrasp.pnp import CorrespondenceSet
from probgrasp.prob_pnp import planar_pose, solve_planar

ACCEPTANCE_LINES: list[str] = []

K = CameraIntrinsics()
G = GripperModel()


def random_pose(rng, depth=(0.3, 0.8), lateral=0.1) -> Pose:
    t = np.array([rng.uniform(-lateral, lateral), rng.uniform(-0.8 * lateral, 0.8 * lateral), rng.uniform(*depth)])
    return Pose.from_matrix(random_rotation(rng), t)


def corner_observation(pose: Pose, noise_px: float = 0.0, rng=None, w=1.0) -> CorrespondenceSet:
    p2d = project(K, pose.apply(G.corners))
    if noise_px:
        p2d = p2d + rng.normal(0.0, noise_px, p2d.shape)
    return CorrespondenceSet(p2d, G.corners, np.full((4, 2), float(w)), K)


def planar_problem(seed):
    """Random in-plane problem (rotation about the optical axis, lateral shift at depth 0.5) and its planar mode."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 9))
    p3d = np.column_stack([rng.uniform(-0.05, 0.05, n), rng.uniform(-0.05, 0.05, n), rng.uniform(-0.03, 0.03, n)])
    th, x, y = rng.uniform(-1, 1), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)
    gt = planar_pose(th, x, y, 0.5)
    X = CorrespondenceSet(project(K, gt.apply(p3d)) + rng.normal(0, 1.5, (n, 2)), p3d, rng.uniform(0.3, 1.0, (n, 2)), K)
    mode = solve_planar(X, planar_pose(th + 0.05, x + 0.003, y - 0.002, 0.5))
    return X, mode


def optimal_assignment(D: np.ndarray):
    """Exhaustive minimum-total one-to-one assignment of size min(P, G): ``(total, sorted pairs)``."""
    n_p, n_g = D.shape
    best, best_pairs = math.inf, []
    if n_p <= n_g:
        for cols in itertools.permutations(range(n_g), n_p):
            tot = sum(D[r, c] for r, c in enumerate(cols))
            if tot < best:
                best, best_pairs = tot, list(enumerate(cols))
    else:
        for rows in itertools.permutations(range(n_p), n_g):
            tot = sum(D[r, c] for c, r in enumerate(rows))
            if tot < best:
                best, best_pairs = tot, [(r, c) for c, r in enumerate(rows)]
    return (0.0 if not best_pairs else best), sorted(best_pairs)


def random_pose_cloud(rng, n: int, spread: float = 0.05) -> list[Pose]:
    return [Pose.from_rotvec(rng.normal(0, 0.5, 3), rng.uniform(-spread, spread, 3)) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

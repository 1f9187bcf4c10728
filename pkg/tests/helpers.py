"""試験用の小さな補助関数"""

import numpy as np

from hdivflow.services.function_space import build_pressure_space, build_velocity_space
from hdivflow.services.mesh import structured_triangulation


def make_spaces(n, k, bc):
    velocity_space = build_velocity_space(structured_triangulation(n), k, bc)
    return velocity_space, build_pressure_space(velocity_space.mesh, k)


def linear_field(x):
    """RT_1 に含まれる一次のベクトル場 (x1 + 2x2, 3x1 − x2)"""
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 0] + 2.0 * x[..., 1], 3.0 * x[..., 0] - x[..., 1]], axis=-1)


def linear_gradient(x):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.array([[1.0, 2.0], [3.0, -1.0]]), x.shape[:-1] + (2, 2))


def shear_field(x):
    """(x2, 0): x1 方向に周期的で上下の壁に接する"""
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 1], np.zeros(x.shape[:-1])], axis=-1)

# app/physics/kernels.py

"""
================================================================================
 粒子系统计算内核 (app/physics/kernels.py)
================================================================================

模块功能:
本模块是模拟器的“计算引擎”：成对力、最近邻搜索和半隐式欧拉积分。模拟一次
晶化实验需要数十万个积分步，每步 O(N^2) 次距离计算，纯 Python 无法承受，因此
这里的函数全部用 Numba 的 `@njit(cache=True)` 编译，只接受并返回 NumPy 数组。

力的方向约定:
`pair_force(kind, p, ri, rj)` 返回接收者 v_i 受到发送者 v_j 的力，与解码器
NN(x_i, x_j) 的含义一致。n_ij = (r_j - r_i) / |r_j - r_i| 是由 i 指向 j 的单位向量。

- 弹簧:  F = k (r - L) n_ij                         p = [k, L, 0]
- 电荷:  F = -c q_i q_j n_ij / (r + δ)^2            p = [c q_i q_j, δ, 0]
- 晶化:  F = V'(r) n_ij，V = V_LJ + s C r^-4        p = [σ, ε, s C]
         其中同种粒子 s = -1（吸引），异种粒子 s = +1（排斥）。

每种相互作用类型对应参数表 `type_params` 中的一行。
"""
import numpy as np
from numba import njit

SPRING = 0
CHARGE = 1
CRYSTALLIZATION = 2

# 坐标绝对值超过该阈值即判定为发散
DIVERGENCE_LIMIT = 1e6


@njit(cache=True)
def pair_force(kind, p, ri, rj):
    out = np.zeros(ri.shape[0], dtype=np.float64)
    dx = rj - ri
    r = np.sqrt(np.sum(dx * dx))
    if r == 0.0:
        return out
    if kind == SPRING:
        mag = p[0] * (r - p[1])
    elif kind == CHARGE:
        rs = r + p[1]
        mag = -p[0] / (rs * rs)
    else:
        sigma, eps, dip = p[0], p[1], p[2]
        s6 = (sigma / r) ** 6
        # dV_LJ/dr + d(dip * r^-4)/dr
        mag = 4.0 * eps * (6.0 * s6 - 12.0 * s6 * s6) / r - 4.0 * dip / r ** 5
    for a in range(ri.shape[0]):
        out[a] = mag * dx[a] / r
    return out


@njit(cache=True)
def pair_forces_batch(kind, type_params, types, ri, rj):
    """对扁平化的 (E, d) 边数组逐条计算成对力。"""
    out = np.zeros(ri.shape, dtype=np.float64)
    for e in range(ri.shape[0]):
        out[e] = pair_force(kind, type_params[types[e]], ri[e], rj[e])
    return out


@njit(cache=True)
def nearest_neighbors(pos, n_neighbors):
    """
    每个粒子的 n 个最近邻（不含自身）。距离相同时下标较小者优先。

    Args:
        pos (np.ndarray): (N, d) 坐标。
        n_neighbors (int): 邻居数 n，要求 n <= N - 1。

    Returns:
        np.ndarray: (N, n) int64 邻居下标，每行按距离升序排列。
    """
    N = pos.shape[0]
    out = np.empty((N, n_neighbors), dtype=np.int64)
    d2 = np.empty(N, dtype=np.float64)
    for i in range(N):
        for j in range(N):
            diff = pos[j] - pos[i]
            d2[j] = np.sum(diff * diff)
        d2[i] = np.inf
        order = np.argsort(d2, kind="mergesort")
        for k in range(n_neighbors):
            out[i, k] = order[k]
    return out


@njit(cache=True)
def all_pairs_neighbors(N):
    out = np.empty((N, N - 1), dtype=np.int64)
    for i in range(N):
        c = 0
        for j in range(N):
            if j != i:
                out[i, c] = j
                c += 1
    return out


@njit(cache=True)
def accelerations(kind, type_params, types, pos, masses, neighbors):
    """a_i = Σ_{j∈Γ(i)} F(i <- j) / m_i。types 为 (N, N) 边类型矩阵。"""
    N, d = pos.shape
    acc = np.zeros((N, d), dtype=np.float64)
    for i in range(N):
        for c in range(neighbors.shape[1]):
            j = neighbors[i, c]
            k = types[i, j]
            if k < 0:
                continue
            acc[i] += pair_force(kind, type_params[k], pos[i], pos[j])
        acc[i] /= masses[i]
    return acc


@njit(cache=True)
def integrate(kind, type_params, types, pos0, vel0, masses, dt, n_frames, stride, n_neighbors):
    """
    半隐式欧拉积分：v^{t+1} = v^t + a^t dt，r^{t+1} = r^t + v^{t+1} dt。

    每 `stride` 个积分步记录一帧，共记录 `n_frames` 帧（含初始帧）。
    n_neighbors <= 0 表示全连接，否则每一步都重新计算 n 近邻。

    Returns:
        tuple: (positions (F, N, d), velocities (F, N, d), neighbors (F, N, n),
                发散步号；未发散时为 -1)
    """
    N, d = pos0.shape
    n_cols = N - 1 if n_neighbors <= 0 else n_neighbors
    positions = np.zeros((n_frames, N, d), dtype=np.float64)
    velocities = np.zeros((n_frames, N, d), dtype=np.float64)
    frame_neighbors = np.zeros((n_frames, N, n_cols), dtype=np.int64)
    pos = pos0.copy()
    vel = vel0.copy()
    fixed = all_pairs_neighbors(N)
    n_steps = (n_frames - 1) * stride
    for step in range(n_steps + 1):
        if n_neighbors <= 0:
            nbr = fixed
        else:
            nbr = nearest_neighbors(pos, n_neighbors)
        if step % stride == 0:
            f = step // stride
            positions[f] = pos
            velocities[f] = vel
            frame_neighbors[f] = nbr
        if step == n_steps:
            break
        acc = accelerations(kind, type_params, types, pos, masses, nbr)
        vel = vel + acc * dt
        pos = pos + vel * dt
        if not np.all(np.isfinite(pos)) or np.max(np.abs(pos)) > DIVERGENCE_LIMIT:
            return positions, velocities, frame_neighbors, step + 1
    return positions, velocities, frame_neighbors, -1

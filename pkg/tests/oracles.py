"""Straight-line reference implementations used only by the tests.

Each oracle is written independently of the package internals: plain loops,
scalar math, no shared helpers beyond the public data types.
"""
import math

import numpy as np

AXES = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]


def bilinear_field(planes, aabb, time_range, mu, t):
    """Product over planes of an explicit four-corner bilinear lookup."""
    coords = []
    for axis in range(4):
        if axis < 3:
            lo, hi = aabb[axis], aabb[axis + 3]
            value = mu[axis]
        else:
            lo, hi = time_range
            value = t
        # resolution of this axis from the first plane that carries it
        for (a, b), P in zip(AXES, planes):
            if a == axis:
                R = P.shape[0]
                break
            if b == axis:
                R = P.shape[1]
                break
        u = (value - lo) / (hi - lo) * (R - 1)
        u = min(max(u, 0.0), R - 1.0)
        i = min(int(math.floor(u)), R - 2)
        coords.append((i, u - i))
    d = planes[0].shape[2]
    out = np.ones(d)
    for (a, b), P in zip(AXES, planes):
        (i, fa), (j, fb) = coords[a], coords[b]
        corners = [
            ((i, j), (1 - fa) * (1 - fb)),
            ((i + 1, j), fa * (1 - fb)),
            ((i, j + 1), (1 - fa) * fb),
            ((i + 1, j + 1), fa * fb),
        ]
        v = np.zeros(d)
        for (ci, cj), w in corners:
            for k in range(d):
                v[k] += w * P[ci, cj, k]
        out = out * v
    return out


def dense_forward(weights, biases, f):
    h = list(f)
    for layer, (W, b) in enumerate(zip(weights, biases)):
        nxt = []
        for r in range(W.shape[0]):
            acc = b[r]
            for c in range(W.shape[1]):
                acc += W[r, c] * h[c]
            if layer < len(weights) - 1:
                acc = max(acc, 0.0)
            nxt.append(acc)
        h = nxt
    return np.array(h)


def block_average(values, r1, r2):
    R1, R2, d = values.shape
    out = np.zeros((R1 // r1, R2 // r2, d))
    for i in range(R1 // r1):
        for j in range(R2 // r2):
            for k in range(d):
                acc = 0.0
                for a in range(i * r1, (i + 1) * r1):
                    for b in range(j * r2, (j + 1) * r2):
                        acc += values[a, b, k]
                out[i, j, k] = acc / (r1 * r2)
    return out


def flat_norm(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)))


def mean_norm(frames_a, frames_b):
    return math.fsum(flat_norm(a, b) for a, b in zip(frames_a, frames_b)) / len(frames_a)


def sh_color(sh, dirv):
    """3D-GS real SH polynomials written out per term, +0.5 and clamp."""
    x, y, z = dirv
    C0, C1 = 0.28209479177387814, 0.4886025119029199
    C2 = [1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396]
    C3 = [-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
          -0.4570457994644658, 1.445305721320277, -0.5900435899266435]
    Y = [C0, -C1 * y, C1 * z, -C1 * x,
         C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * z * z - x * x - y * y), C2[3] * x * z, C2[4] * (x * x - y * y),
         C3[0] * y * (3 * x * x - y * y), C3[1] * x * y * z, C3[2] * y * (4 * z * z - x * x - y * y),
         C3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y), C3[4] * x * (4 * z * z - x * x - y * y),
         C3[5] * z * (x * x - y * y), C3[6] * x * (x * x - 3 * y * y)]
    B = sh.shape[1]
    return [min(max(sum(sh[c, b] * Y[b] for b in range(B)) + 0.5, 0.0), 1.0) for c in range(3)]


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def project_one(center, q, s, cam):
    """Mean, 2D covariance, depth of one Gaussian via explicit matrices."""
    W = cam.world_to_camera[:3, :3]
    tvec = W @ center + cam.world_to_camera[:3, 3]
    x, y, z = tvec
    J = np.array([[cam.fx / z, 0, -cam.fx * x / z**2], [0, cam.fy / z, -cam.fy * y / z**2]])
    R = quat_to_matrix(q)
    Sigma = R @ np.diag(np.asarray(s) ** 2) @ R.T
    cov = J @ W @ Sigma @ W.T @ J.T + 0.3 * np.eye(2)
    mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    return mean, cov, z


def brute_force_render(cloud, cam):
    """Per-pixel compositing over every Gaussian, scalar loops over the sorted list.

    Returns (image, hit_counts, weight_sum, transmittance).
    """
    n = len(cloud)
    entries = []
    cam_center = -cam.world_to_camera[:3, :3].T @ cam.world_to_camera[:3, 3]
    for i in range(n):
        mean, cov, z = project_one(cloud.centers[i], cloud.rotations[i], cloud.scales[i], cam)
        if z <= 0.01:
            continue
        v = cloud.centers[i] - cam_center
        color = sh_color(cloud.sh[i], v / np.linalg.norm(v))
        entries.append((z, i, mean, np.linalg.inv(cov), color))
    entries.sort(key=lambda e: (e[0], e[1]))
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    hits = np.zeros(n, dtype=np.int64)
    wsum = np.zeros((H, W))
    trans = np.ones((H, W))
    for r in range(H):
        for c in range(W):
            px, py = c + 0.5, r + 0.5
            T = 1.0
            acc = [0.0, 0.0, 0.0]
            total_w = 0.0
            for z, i, mean, conic, color in entries:
                dx, dy = px - mean[0], py - mean[1]
                m = conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy
                alpha = min(0.99, cloud.opacities[i] * math.exp(-0.5 * m))
                if alpha < 1 / 255:
                    continue
                if T < 1e-4:
                    break
                w = alpha * T
                for k in range(3):
                    acc[k] += w * color[k]
                total_w += w
                hits[i] += 1
                T *= 1 - alpha
            image[r, c] = acc
            wsum[r, c] = total_w
            trans[r, c] = T
    return image, hits, wsum, trans


def ssim_windowed(a, b, k1=0.01, k2=0.03, L=1.0):
    """SSIM by explicit per-window weighted statistics (valid positions only)."""
    size, sigma = 11, 1.5
    g = [math.exp(-((i - 5) ** 2) / (2 * sigma**2)) for i in range(size)]
    total = sum(g)
    g = [v / total for v in g]
    w = np.outer(g, g)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    H, W, C = a.shape
    vals = []
    for ch in range(C):
        x, y = a[..., ch], b[..., ch]
        acc = []
        for r in range(H - size + 1):
            for c in range(W - size + 1):
                px = x[r:r + size, c:c + size]
                py = y[r:r + size, c:c + size]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * (px - mx) ** 2).sum()
                vy = (w * (py - my) ** 2).sum()
                cxy = (w * (px - mx) * (py - my)).sum()
                acc.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
        vals.append(np.mean(acc))
    return float(np.mean(vals))


def straight_scores(cloud, per_frame_hits, per_frame_scales, beta, h):
    """Scores written directly from the formulas with Python loops.

    per_frame_hits[t][i] and per_frame_scales[t][i] come from independent renders.
    Returns (d, d_hat, classes, IS).
    """
    n = len(cloud)
    vol = lambda s: 4.0 * math.pi * s[0] * s[1] * s[2] / 3.0  # noqa: E731
    H = [sum(int(per_frame_hits[t][i]) for t in range(len(per_frame_hits))) for i in range(n)]
    dV = [math.fsum(abs(vol(cloud.scales[i]) - vol(per_frame_scales[t][i])) for t in range(len(per_frame_scales)))
          for i in range(n)]
    d = [H[i] * dV[i] for i in range(n)]
    top = max(d) if d else 0.0
    d_hat = [x / top if top > 0 else 0.0 for x in d]
    classes = ["DG" if x > h else "SG" for x in d_hat]
    vols = sorted(vol(cloud.scales[i]) for i in range(n))
    vmax90 = vols[max(1, math.ceil(0.9 * n)) - 1]
    IS = []
    for i in range(n):
        vn = (vol(cloud.scales[i]) / vmax90) ** beta
        if classes[i] == "SG":
            IS.append(H[i] * cloud.opacities[i] * vn)
        else:
            IS.append(H[i] * dV[i] * vn)
    return np.array(d), np.array(d_hat), classes, np.array(IS)


def deform_one(field, center, q, s, t):
    """Deformed (center, quaternion, scale) of one Gaussian via the scalar oracles."""
    planes = [p.values for p in field.planes]
    f = bilinear_field(planes, field.aabb, field.time_range, center, t)
    out = dense_forward(field.mlp.weights, field.mlp.biases, f)
    dmu, dq, ds = out[:3], out[3:7], out[7:10]
    q2 = np.asarray(q, float) + dq
    q2 = q2 / np.linalg.norm(q2)
    s2 = np.maximum(np.asarray(s, float) + ds, 1e-6)
    return np.asarray(center, float) + dmu, q2, s2

"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from floodsense.tensor import Tensor


def numeric_grad(fn, arrays, i, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every entry of ``arrays[i]``."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    it = np.nditer(base[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[i][idx] += eps
        minus[i][idx] -= eps
        g[idx] = (fn(*plus) - fn(*minus)) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_op_grads(op, arrays, eps=1e-5, tol=1e-4, seed=0):
    """Compare tape gradients of ``sum(op(*tensors) * w)`` with central differences, entry by entry."""
    rng = np.random.default_rng(seed)
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    w = rng.standard_normal(out_shape)

    def scalar(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * w))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    y = op(*ts)
    (y * Tensor(w)).sum().backward()
    errs = []
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i, eps)
        errs.append(rel_err(t.grad, num))
    assert max(errs) <= tol, f"relative gradient errors {errs}"
    return max(errs)


def directional_check(loss_fn, params, eps=1e-5, n_dirs=3, seed=0):
    """Directional-derivative check along unit-norm random directions (parameters restored afterwards).

    ``loss_fn()`` builds a scalar Tensor from the current parameter values.
    Returns the worst relative error over ``n_dirs`` random directions.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]   # unit step of length eps in parameter space
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        orig = [p.data.copy() for p in params]
        for p, d, o in zip(params, dirs, orig):
            p.data = o + eps * d
        fp = loss_fn().item()
        for p, d, o in zip(params, dirs, orig):
            p.data = o - eps * d
        fm = loss_fn().item()
        for p, o in zip(params, orig):
            p.data = o
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return worst


def brute_force_families(gt, pred, K):
    """Per-class P/R/F1 for the plain, adjacent and upper-adjacent rules by explicit set counting."""
    pairs = [(int(g), int(p)) for g, p in zip(np.ravel(gt), np.ravel(pred)) if g != 255 and p != 255]

    def fam(prec_ok, rec_ok):
        P, R, F = [], [], []
        for k in range(K):
            pred_k = [(g, p) for g, p in pairs if p == k]
            gt_k = [(g, p) for g, p in pairs if g == k]
            tp_p = sum(1 for g, _ in pred_k if prec_ok(g, k))
            tp_r = sum(1 for _, p in gt_k if rec_ok(p, k))
            pr = tp_p / len(pred_k) if pred_k else 0.0
            rc = tp_r / len(gt_k) if gt_k else 0.0
            P.append(pr)
            R.append(rc)
            F.append(2 * pr * rc / (pr + rc) if pr + rc > 0 else 0.0)
        return np.array(P), np.array(R), np.array(F)

    return {
        "plain": fam(lambda g, k: g == k, lambda p, k: p == k),
        "adjacent": fam(lambda g, k: abs(g - k) <= 1, lambda p, k: abs(p - k) <= 1),
        "upper": fam(lambda g, k: g in (k - 1, k), lambda p, k: p in (k, k + 1)),
    }


def brute_harmonic(f1s, exclude):
    vals = [f for k, f in enumerate(f1s) if k not in exclude]
    if any(v == 0 for v in vals):
        return 0.0
    return len(vals) / sum(1 / v for v in vals)


def random_lti(rng, N, diagonal):
    """A stable continuous system with an invertible state matrix."""
    from floodsense.ssm import ContinuousSsm
    B, C = rng.standard_normal(N), rng.standard_normal(N)
    if diagonal:
        return ContinuousSsm(-rng.uniform(0.1, 2.0, N), B, C)
    Q, _ = np.linalg.qr(rng.standard_normal((N, N)))
    A = Q @ np.diag(-rng.uniform(0.1, 2.0, N)) @ Q.T + 0.1 * rng.standard_normal((N, N))
    return ContinuousSsm(A, B, C)


def random_selective(rng, K, N):
    from floodsense.ssm import SelectiveScanInputs
    return SelectiveScanInputs(
        x=rng.standard_normal(K), delta=rng.uniform(1e-3, 1.0, K), A=-rng.uniform(0.05, 3.0, N),
        B=rng.standard_normal((K, N)), C=rng.standard_normal((K, N)))


def tiny_model_config(dtype="float64"):
    from floodsense.encoders import ModelConfig
    return ModelConfig(embed_dim=4, dims=(4, 8, 16, 32), depths=(1, 1, 1, 1), d_state=2, expand=2,
                       patch=4, decoder_dim=4, dtype=dtype)


def random_bundle(rng, size=32, vhr=True):
    from floodsense.encoders import ModalityBundle
    v = rng.standard_normal((3, size, size)) if vhr else np.full((3, size, size), 255.0)
    return ModalityBundle(rng.standard_normal((4, size, size)), rng.standard_normal((4, size, size)),
                          rng.integers(0, 5, (1, size, size)).astype(np.float64), v)


def random_labels(rng, size=32):
    bda = rng.integers(0, 4, (size, size)).astype(np.uint8)
    bda[rng.random((size, size)) < 0.5] = 255
    return {"bda": bda, "fm": rng.integers(0, 3, (size, size)).astype(np.uint8),
            "loc": rng.integers(0, 2, (size, size)).astype(np.uint8)}


def hard_iou_oracle(gt, pred, w, K):
    """Weighted mean of (1 - IoU_c) over classes present in the valid ground truth."""
    gt, pred = np.ravel(gt), np.ravel(pred)
    valid = gt != 255
    valid &= np.asarray(w)[np.where(valid, gt, 0)] > 0
    gt, pred = gt[valid], pred[valid]
    num = den = 0.0
    for c in range(K):
        if not (gt == c).any():
            continue
        inter = np.sum((gt == c) & (pred == c))
        union = np.sum((gt == c) | (pred == c))
        num += w[c] * (1 - inter / union)
        den += w[c]
    return num / den


def random_scene(rng, n_fp, n_pts, extent=2000.0, sparse_clusters=0):
    """Rotated rectangular footprints over a square plus random PDE points.

    Each planted sparse cluster is an isolated unclaimed building with three or four
    claimed neighbours just inside 100 m and no point within 100 m of its centroid.
    """
    from floodsense.geo import Footprint, rectangle
    from floodsense.groundtruth import PdePoints

    fps = []
    for i in range(n_fp):
        cx, cy = rng.uniform(0, extent, 2)
        hw, hh = rng.uniform(4, 15, 2)
        th = rng.uniform(0, np.pi / 2)
        c, s = np.cos(th), np.sin(th)
        corners = np.array([(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh), (-hw, -hh)])
        ring = corners @ np.array([[c, s], [-s, c]]) + (cx, cy)
        fps.append(Footprint(1000 + 3 * i, [ring]))
    # cluster some points on footprints so the direct rule fires
    hits = rng.choice(n_fp, size=min(n_fp, n_pts // 2), replace=False)
    xs = [fps[h].centroid[0] + rng.uniform(-2, 2) for h in hits]
    ys = [fps[h].centroid[1] + rng.uniform(-2, 2) for h in hits]
    rest = n_pts - len(xs)
    xs += list(rng.uniform(0, extent, rest))
    ys += list(rng.uniform(0, extent, rest))
    pde = list(rng.uniform(0, 1, n_pts))
    for j in range(sparse_clusters):
        tx, ty = extent + 1000.0 * (j + 1), extent / 2
        fps.append(rectangle(900_000 + 10 * j, tx - 5, ty - 5, tx + 5, ty + 5))
        for m, ang in enumerate(rng.uniform(0, 2 * np.pi) + np.arange(int(rng.integers(3, 5))) * 1.4):
            ux, uy = np.cos(ang), np.sin(ang)
            nx, ny = tx + 96 * ux, ty + 96 * uy
            fps.append(rectangle(900_000 + 10 * j + m + 1, nx - 8, ny - 8, nx + 8, ny + 8))
            xs.append(nx + 6 * ux)
            ys.append(ny + 6 * uy)
            pde.append(float(rng.uniform(0, 1)))
    return fps, PdePoints.from_arrays(xs, ys, pde)


def brute_ground_truth(points, footprints, k, d, k_min, d_max):
    """All-pairs reference for the three labelling rules; returns {id: (source, pde)}."""
    import shapely
    from shapely.geometry import Polygon

    polys = [Polygon(fp.rings[0], fp.rings[1:]) for fp in footprints]
    cent = np.array([(p.centroid.x, p.centroid.y) for p in polys]).reshape(-1, 2)
    px, py, pde = points.x, points.y, points.pde
    src = ["none"] * len(footprints)
    val = [None] * len(footprints)
    for i, poly in enumerate(polys):
        inside = shapely.contains_xy(poly, px, py)
        if inside.any():
            src[i], val[i] = "direct", float(np.mean(pde[inside]))
    if len(px):
        dist = np.hypot(cent[:, None, 0] - px[None, :], cent[:, None, 1] - py[None, :])
        for i in range(len(footprints)):
            if src[i] == "none":
                j = int(np.argmin(dist[i]))          # first index among equal minima
                if dist[i, j] <= d_max:
                    src[i], val[i] = "nearest", float(pde[j])
    seeds = [i for i in range(len(footprints)) if src[i] != "none"]
    out = {fp.id: (src[i], val[i]) for i, fp in enumerate(footprints)}
    if not seeds:
        return out
    sc = cent[seeds]
    sv = np.array([val[i] for i in seeds])
    for i, fp in enumerate(footprints):
        if src[i] != "none":
            continue
        dd = np.hypot(sc[:, 0] - cent[i, 0], sc[:, 1] - cent[i, 1])
        order = np.argsort(dd, kind="stable")
        order = order[dd[order] <= d]
        if len(order) >= k_min:
            w = 1.0 / np.maximum(dd[order[:k]], 1.0)
            out[fp.id] = ("imputed", float(np.sum(w * sv[order[:k]]) / np.sum(w)))
    return out


def lloyd_1d(v, K, rng, iters=200):
    c = np.sort(rng.choice(np.unique(v), K, replace=False))
    for _ in range(iters):
        lab = np.argmin(np.abs(v[:, None] - c[None, :]), axis=1)
        new = np.array([v[lab == j].mean() if (lab == j).any() else c[j] for j in range(K)])
        if np.array_equal(new, c):
            break
        c = new
    lab = np.argmin(np.abs(v[:, None] - c[None, :]), axis=1)
    return float(sum(((v[lab == j] - c[j]) ** 2).sum() for j in range(K)))


def brute_aggregate(pred, grid, footprints, stat, min_pixels=4, var_threshold=0.5):
    """Per-pixel shapely containment and stdlib statistics; returns {id: (class, count, var, flags)}."""
    import statistics
    from collections import Counter
    from fractions import Fraction

    from shapely.geometry import Point, Polygon

    out = {}
    for fp in footprints:
        poly = Polygon(fp.rings[0], fp.rings[1:])
        vals = []
        for r in range(grid.height):
            for c in range(grid.width):
                x = grid.origin_x + (c + 0.5) * grid.pixel_size
                y = grid.origin_y - (r + 0.5) * grid.pixel_size
                if pred[r, c] != 255 and poly.contains(Point(x, y)):
                    vals.append(int(pred[r, c]))
        if not vals:
            out[fp.id] = (None, 0, 0.0, ["low_coverage"])
            continue
        if stat == "median":
            cls = statistics.median_high(vals)
        elif stat == "mean":
            m = Fraction(sum(vals), len(vals))
            cls = int((m + Fraction(1, 2)).__floor__())
        elif stat == "mode":
            cnt = Counter(vals)
            top = max(cnt.values())
            cls = max(k for k, v in cnt.items() if v == top)
        else:
            cls = max(vals)
        var = float(statistics.pvariance(vals))
        flags = (["low_coverage"] if len(vals) < min_pixels else []) + \
                (["high_disagreement"] if var > var_threshold else [])
        out[fp.id] = (cls, len(vals), var, flags)
    return out


def random_pixel_scene(rng, size=24, n_fp=10):
    """A prediction raster with some nodata and footprints of mixed shape over it."""
    from floodsense.geo import Footprint, GridSpec

    grid = GridSpec(size, size, 1000.0, 2000.0, 2.0)
    pred = rng.integers(0, 4, (size, size)).astype(np.uint8)
    pred[rng.random((size, size)) < 0.05] = 255
    fps = []
    for i in range(n_fp):
        cx = 1000.0 + rng.uniform(0, 2 * size)
        cy = 2000.0 - rng.uniform(0, 2 * size)
        n = int(rng.integers(3, 7))
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = rng.uniform(2, 9, n)
        ring = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], 1)
        fps.append(Footprint(int(rng.integers(0, 10**6)) * 10 + i, [np.vstack([ring, ring[:1]])]))
    return pred, grid, fps


def cli_pipeline(root, seed=7, chips=16, steps=2, extra_train=()):
    """synth -> impute -> train -> predict -> aggregate -> export -> eval; returns the exit codes."""
    from floodsense.cli import run

    root = str(root)
    ev, run_dir = f"{root}/event", f"{root}/run"
    steps_argv = [
        ["synth", "--seed", str(seed), "--chips", str(chips), "--out", ev],
        ["impute", "--data", ev, "--out", f"{root}/labels"],
        ["train", "--data", ev, "--seed", str(seed), "--steps", str(steps), "--batch-size", "1",
         "--accumulation", "2", "--lr", "1e-3", "--out", run_dir, *extra_train],
        ["predict", "--data", ev, "--run", run_dir, "--out", f"{root}/preds"],
        ["aggregate", "--pred", f"{root}/preds", "--footprints", f"{ev}/footprints.geojson",
         "--out", f"{root}/records.json"],
        ["export", "--records", f"{root}/records.json", "--footprints", f"{ev}/footprints.geojson",
         "--out", f"{root}/damage_map.geojson"],
        ["eval", "--data", ev, "--run", run_dir, "--split", "all", "--out", f"{root}/eval.json"],
    ]
    return {argv[0]: run(argv) for argv in steps_argv}


def tree_bytes(root):
    from pathlib import Path
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

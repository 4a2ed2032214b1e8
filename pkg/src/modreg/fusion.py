"""Cross-terms and estimators for pairwise-only and partially-paired data.

The three averages making up the proxy cross-term each need only (x, z)
or (z, y) pairs, so every observation block contributes to the terms it
can support:

    c_hat = mean_{x rows}[x mu_y(z)] + mean_{y rows}[mu_x(z) y]
            - mean_{all rows}[mu_x(z) mu_y(z)]

Conditional independence of x and y given z is a documented precondition
for the pairwise-only estimator; it is not checkable from pairs alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FoldAssignment, FusionDataset, split_folds
from .errors import DataError
from .learners import Learner, PenaltyConfig, _path_on, choose_lambda_index, solve_spd
from .learners import default_lambda_grid, solve_l1_quadratic
from .highdim import StructurePartition, _column_scales, _rescale_path
from .learners import LambdaPath
from .modular import ModularFit, ProxyCrossTerm, _fit_with_context, _predict_block
from .rng import derive_seed


@dataclass(frozen=True)
class FusionTermRows:
    """Per-row values of the three cross-term averages, with provenance.

    ``*_triple_row`` maps each row to its index in the triples block, or
    -1 for rows contributed by a pair block; cross-validation uses the
    map to drop held-out triples and re-assemble the term means.
    """

    xy_values: np.ndarray
    xy_triple_row: np.ndarray
    yx_values: np.ndarray
    yx_triple_row: np.ndarray
    prod_values: np.ndarray
    prod_triple_row: np.ndarray

    def assemble(self, exclude_triple_rows: np.ndarray | None = None) -> np.ndarray:
        """Term-wise means, optionally excluding a set of triple rows."""

        def term_mean(values, triple_row):
            if exclude_triple_rows is None:
                keep = values
            else:
                mask = ~np.isin(triple_row, exclude_triple_rows)
                keep = values[mask]
            if keep.shape[0] == 0:
                raise DataError("a cross-term average has no remaining rows")
            return keep.mean(axis=0)

        return (
            term_mean(self.xy_values, self.xy_triple_row)
            + term_mean(self.yx_values, self.yx_triple_row)
            - term_mean(self.prod_values, self.prod_triple_row)
        )


def _block_fold_ids(n: int, seed: int) -> np.ndarray:
    """Two-fold ids for one block; a single row sits alone in fold 1."""
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if n == 1:
        return np.ones(1, dtype=np.int64)
    return split_folds(n, 2, seed).fold_of_row


def _fit_block_models(learner, feats, targs, fold_ids_parts, k, label, p_out):
    """Fit one fold's model on the union of block rows outside fold k."""
    train_f = []
    train_t = []
    for f, t, ids in zip(feats, targs, fold_ids_parts):
        if f is None:
            continue
        keep = ids != k
        train_f.append(f[keep])
        train_t.append(t[keep])
    feats_tr = np.vstack(train_f) if train_f else np.empty((0, 0))
    targs_tr = np.concatenate([np.atleast_2d(t.T).T for t in train_t], axis=0)
    if learner.supports_multi_target:
        return _fit_with_context(learner, feats_tr, targs_tr, k, label)
    if targs_tr.ndim == 1:
        return _fit_with_context(learner, feats_tr, targs_tr, k, label)
    return [
        _fit_with_context(learner, feats_tr, targs_tr[:, j], k, f"{label}[{j}]")
        for j in range(p_out)
    ]


def _predict_rows(learner, models_by_fold, z, fold_ids, p_out):
    """Out-of-fold predictions for one block, one row at its own fold."""
    n = z.shape[0]
    out = np.empty((n, p_out))
    for k, model in models_by_fold.items():
        rows = np.flatnonzero(fold_ids == k)
        if rows.size == 0:
            continue
        if isinstance(model, list):
            out[rows] = _predict_block(learner, model, z[rows], multi=False)
        else:
            pred = np.asarray(model.predict(z[rows]), dtype=np.float64)
            out[rows] = pred[:, None] if pred.ndim == 1 else pred
    return out


def _crossfit_fusion(fd: FusionDataset, learner_x, learner_y, seed, features="z"):
    """Cross-fit mu_x and mu_y across all blocks.

    Each block is split in two; the fold-k models train on every block
    row outside fold k of its own block, and a row is predicted by the
    model of its own fold id. Returns per-block (mu_x, mu_y) arrays.
    """
    T, XZ, ZY = fd.triples, fd.xz_pairs, fd.zy_pairs
    p_x = fd.p_x
    f_t = _block_fold_ids(fd.n, seed)
    f_xz = _block_fold_ids(fd.n_xz, derive_seed(seed, 1))
    f_zy = _block_fold_ids(fd.n_yz, derive_seed(seed, 2))
    used_folds = sorted(
        set(f_t.tolist()) | set(f_xz.tolist()) | set(f_zy.tolist())
    )

    zs_x = [None if T is None else T.z, None if XZ is None else XZ.z]
    xs_x = [None if T is None else T.x, None if XZ is None else XZ.x]
    ids_x = [f_t, f_xz]
    zs_y = [None if T is None else T.z, None if ZY is None else ZY.z]
    ys_y = [None if T is None else T.y, None if ZY is None else ZY.y]
    ids_y = [f_t, f_zy]

    models_x = {
        k: _fit_block_models(learner_x, zs_x, xs_x, ids_x, k, "mu_x", p_x)
        for k in used_folds
    }
    models_y = {
        k: _fit_block_models(learner_y, zs_y, ys_y, ids_y, k, "mu_y", 1)
        for k in used_folds
    }

    def preds(block, ids):
        if block is None:
            return None, None
        mx = _predict_rows(learner_x, models_x, block.z, ids, p_x)
        my = _predict_rows(learner_y, models_y, block.z, ids, 1).ravel()
        if not (np.all(np.isfinite(mx)) and np.all(np.isfinite(my))):
            raise DataError("sub-task predictions contain non-finite values")
        return mx, my

    return preds(T, f_t), preds(XZ, f_xz), preds(ZY, f_zy)


def _stack(parts):
    parts = [p for p in parts if p is not None and p.shape[0] > 0]
    if not parts:
        raise DataError("a cross-term average has no contributing rows")
    return np.concatenate(parts, axis=0)


def _build_term_rows(fd, mu_t, mu_xz, mu_zy) -> FusionTermRows:
    T, XZ, ZY = fd.triples, fd.xz_pairs, fd.zy_pairs
    t_idx = None if T is None else np.arange(T.n)
    neg = lambda n: -np.ones(n, dtype=np.int64)

    xy_parts, xy_map = [], []
    if T is not None:
        xy_parts.append(T.x * mu_t[1][:, None])
        xy_map.append(t_idx)
    if XZ is not None:
        xy_parts.append(XZ.x * mu_xz[1][:, None])
        xy_map.append(neg(XZ.n))

    yx_parts, yx_map = [], []
    if T is not None:
        yx_parts.append(mu_t[0] * T.y[:, None])
        yx_map.append(t_idx)
    if ZY is not None:
        yx_parts.append(mu_zy[0] * ZY.y[:, None])
        yx_map.append(neg(ZY.n))

    prod_parts, prod_map = [], []
    for block, mu, idx in ((T, mu_t, t_idx), (XZ, mu_xz, None), (ZY, mu_zy, None)):
        if block is not None:
            prod_parts.append(mu[0] * mu[1][:, None])
            prod_map.append(idx if idx is not None else neg(block.n))

    return FusionTermRows(
        xy_values=_stack(xy_parts),
        xy_triple_row=np.concatenate(xy_map),
        yx_values=_stack(yx_parts),
        yx_triple_row=np.concatenate(yx_map),
        prod_values=_stack(prod_parts),
        prod_triple_row=np.concatenate(prod_map),
    )


def proxy_cross_term_miss(
    fd: FusionDataset,
    learner_x: Learner,
    learner_y: Learner,
    seed: int = 0,
) -> ProxyCrossTerm:
    """Cross-term from pairwise observations only.

    mu_y models train on the (z, y) block and mu_x models on the (x, z)
    block, cross-fit within each block. Requires the conditional
    independence of x and y given z; with no joint rows this cannot be
    checked from the data.
    """
    if fd.triples is not None:
        raise DataError("pairwise-only cross-term called with joint rows present; "
                        "use proxy_cross_term_part")
    if fd.xz_pairs is None or fd.zy_pairs is None:
        raise DataError("pairwise-only cross-term needs both an (x,z) and a (z,y) block")
    mu_t, mu_xz, mu_zy = _crossfit_fusion(fd, learner_x, learner_y, seed)
    parts = _build_term_rows(fd, mu_t, mu_xz, mu_zy)
    return ProxyCrossTerm(c_hat=parts.assemble(), kind="miss", fusion_parts=parts)


def proxy_cross_term_part(
    fd: FusionDataset,
    learner_x: Learner,
    learner_y: Learner,
    seed: int = 0,
    partition: StructurePartition | None = None,
) -> ProxyCrossTerm:
    """Cross-term using every available pair, joint rows included.

    Sub-task models train on the union of the joint rows and the relevant
    pair block (outside the row's fold). With no pair blocks this reduces
    bit-for-bit to the joint-data cross-term under shared folds. When a
    structure ``partition`` is supplied (joint rows required), the
    y-weighted average restricts to joint rows and the product average to
    x-bearing rows, since the enlarged conditioning set includes x
    columns.
    """
    if partition is not None:
        return _cross_term_part_structured(fd, learner_x, learner_y, seed, partition)
    if fd.triples is None and (fd.xz_pairs is None or fd.zy_pairs is None):
        raise DataError("need joint rows or both pair blocks")
    mu_t, mu_xz, mu_zy = _crossfit_fusion(fd, learner_x, learner_y, seed)
    parts = _build_term_rows(fd, mu_t, mu_xz, mu_zy)
    return ProxyCrossTerm(c_hat=parts.assemble(), kind="part", fusion_parts=parts)


def _cross_term_part_structured(fd, learner_x, learner_y, seed, partition):
    T, XZ = fd.triples, fd.xz_pairs
    if T is None:
        raise DataError("structure-aware fusion needs joint observations")
    p_x = fd.p_x
    if partition.p_x != p_x:
        raise DataError("partition does not conform to p_x")
    j1, j2 = partition.j1, partition.j2

    f_t = _block_fold_ids(T.n, seed)
    f_xz = _block_fold_ids(0 if XZ is None else XZ.n, derive_seed(seed, 1))
    used = sorted(set(f_t.tolist()) | set(f_xz.tolist()))

    zf_t = np.hstack([T.z, T.x[:, j2]]) if j2.size else T.z
    zf_xz = None
    if XZ is not None:
        zf_xz = np.hstack([XZ.z, XZ.x[:, j2]]) if j2.size else XZ.z

    # mu_x over j1 columns, trained on joint plus (x,z) rows
    models_x = {
        k: _fit_block_models(
            learner_x,
            [zf_t, zf_xz],
            [T.x[:, j1], None if XZ is None else XZ.x[:, j1]],
            [f_t, f_xz],
            k,
            "mu_x",
            j1.size,
        )
        for k in used
    }
    # mu_y needs y, so it trains on joint rows only
    models_y = {
        k: _fit_block_models(learner_y, [zf_t], [T.y], [f_t], k, "mu_y", 1)
        for k in used
    }

    def mu_pair(zf, ids):
        mx1 = _predict_rows(learner_x, models_x, zf, ids, j1.size)
        my = _predict_rows(learner_y, models_y, zf, ids, 1).ravel()
        return mx1, my

    mx1_t, my_t = mu_pair(zf_t, f_t)
    mu_x_t = np.empty((T.n, p_x))
    mu_x_t[:, j1] = mx1_t
    mu_x_t[:, j2] = T.x[:, j2]

    xy_parts = [T.x * my_t[:, None]]
    xy_map = [np.arange(T.n)]
    prod_parts = [mu_x_t * my_t[:, None]]
    prod_map = [np.arange(T.n)]
    if XZ is not None:
        mx1_xz, my_xz = mu_pair(zf_xz, f_xz)
        mu_x_xz = np.empty((XZ.n, p_x))
        mu_x_xz[:, j1] = mx1_xz
        mu_x_xz[:, j2] = XZ.x[:, j2]
        xy_parts.append(XZ.x * my_xz[:, None])
        xy_map.append(-np.ones(XZ.n, dtype=np.int64))
        prod_parts.append(mu_x_xz * my_xz[:, None])
        prod_map.append(-np.ones(XZ.n, dtype=np.int64))

    yx_values = mu_x_t * T.y[:, None]
    yx_values[:, j2] = T.x[:, j2] * T.y[:, None]
    parts = FusionTermRows(
        xy_values=_stack(xy_parts),
        xy_triple_row=np.concatenate(xy_map),
        yx_values=yx_values,
        yx_triple_row=np.arange(T.n),
        prod_values=_stack(prod_parts),
        prod_triple_row=np.concatenate(prod_map),
    )
    return ProxyCrossTerm(
        c_hat=parts.assemble(), kind="part", partition=partition, fusion_parts=parts
    )


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _x_bearing(fd: FusionDataset) -> np.ndarray:
    parts = []
    if fd.triples is not None:
        parts.append(fd.triples.x)
    if fd.xz_pairs is not None:
        parts.append(fd.xz_pairs.x)
    if not parts:
        raise DataError("no X-bearing rows: cannot form the design Gram matrix")
    return np.concatenate(parts, axis=0)


def fusion_fit(
    fd: FusionDataset,
    c: ProxyCrossTerm,
    penalized: PenaltyConfig | None = None,
    seed: int = 0,
    *,
    standardize: bool = True,
    folds: FoldAssignment | None = None,
) -> ModularFit:
    """Fit the fusion estimator for a given cross-term.

    The Gram matrix averages x_i x_i' over every row where x is observed.
    Unpenalized fits solve the normal equations; penalized fits run the
    l1 path with lambda cross-validated on held-out joint rows (pair
    rows always stay in the training averages). A penalized fit without
    joint rows is only possible with a single-lambda grid.
    """
    x_all = _x_bearing(fd)
    if c.p_x != x_all.shape[1]:
        raise DataError("cross-term does not conform to p_x")
    gram = x_all.T @ x_all / x_all.shape[0]
    if penalized is None:
        theta = solve_spd(gram, c.c_hat)
        objective = float(0.5 * theta @ gram @ theta - c.c_hat @ theta)
        tag = "ols" if c.kind == "identity" else "mod-ols"
        return ModularFit(
            theta_hat=theta,
            estimator_tag=tag,
            objective_value=objective,
            n=x_all.shape[0],
            partition=c.partition,
        )

    config = penalized
    scales = _column_scales(x_all, standardize)
    gram_s = gram / np.outer(scales, scales)
    c_s = c.c_hat / scales
    grid = (
        config.lambda_grid
        if config.lambda_grid is not None
        else default_lambda_grid(c_s, config.n_lambdas, config.lambda_min_ratio)
    )
    tag = "lasso" if c.kind == "identity" else "mod-lasso"

    if grid.size == 1 and fd.triples is None:
        theta_s = solve_l1_quadratic(gram_s, c_s, float(grid[0]))
        theta = theta_s / scales
        objective = float(
            0.5 * theta_s @ gram_s @ theta_s
            - c_s @ theta_s
            + grid[0] * np.abs(theta_s).sum()
        )
        return ModularFit(
            theta_hat=theta,
            estimator_tag=tag,
            objective_value=objective,
            n=x_all.shape[0],
            partition=c.partition,
        )
    if fd.triples is None:
        raise DataError(
            "cross-validating lambda needs joint rows to score on; "
            "supply a single-lambda grid or joint observations"
        )

    T = fd.triples
    if folds is None:
        k = min(config.cv_folds, T.n)
        if k < 2:
            raise DataError("lambda CV needs at least 2 joint rows")
        folds = split_folds(T.n, k, derive_seed(seed, 3))
    xz_x = None if fd.xz_pairs is None else fd.xz_pairs.x

    def fold_linear(drop_rows, keep_rows):
        if c.fusion_parts is not None:
            return c.fusion_parts.assemble(exclude_triple_rows=drop_rows)
        if c.row_contributions is not None and c.row_contributions.shape[0] == T.n:
            return c.row_contributions[keep_rows].mean(axis=0)
        raise DataError("cross-term lacks the per-row detail needed for lambda CV")

    fold_errors = np.empty((folds.k, grid.size))
    for k_i in range(1, folds.k + 1):
        drop = folds.rows_in_fold(k_i)
        keep = folds.rows_outside_fold(k_i)
        x_tr = T.x[keep] if xz_x is None else np.concatenate([T.x[keep], xz_x])
        xs_tr = x_tr / scales
        G_tr = xs_tr.T @ xs_tr / xs_tr.shape[0]
        c_tr = fold_linear(drop, keep) / scales
        coefs = _path_on(G_tr, c_tr, grid)
        x_va = T.x[drop] / scales
        resid = T.y[drop][None, :] - coefs @ x_va.T
        fold_errors[k_i - 1] = np.mean(resid**2, axis=1)
    cv_errors = fold_errors.mean(axis=0)
    cv_se = fold_errors.std(axis=0, ddof=1) / np.sqrt(folds.k)
    chosen = choose_lambda_index(cv_errors, cv_se, config.cv_rule)

    coefs_full = _path_on(gram_s, c_s, grid)
    path = _rescale_path(
        LambdaPath(
            lambdas=np.asarray(grid, dtype=np.float64),
            coefs=coefs_full,
            cv_errors=cv_errors,
            cv_se=cv_se,
            chosen_index=chosen,
            rule=config.cv_rule,
        ),
        scales,
    )
    theta_s = coefs_full[chosen]
    objective = float(
        0.5 * theta_s @ gram_s @ theta_s
        - c_s @ theta_s
        + path.chosen_lambda * np.abs(theta_s).sum()
    )
    return ModularFit(
        theta_hat=path.theta,
        estimator_tag=tag,
        objective_value=objective,
        n=x_all.shape[0],
        path=path,
        partition=c.partition,
    )

"""End-to-end pipeline: calibration to a JSON artifact, per-scan prediction,
and the latency benchmark.

The artifact stores everything a deployment needs (normalization statistics,
metric variances, filter covariances, the forest's node arrays, the kNN
points/labels, topological feature statistics, fusion parameters, and the
fitted fuzzy measure) as versioned JSON. Loading rebuilds the search index
from the stored points and reproduces predictions bit for bit.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluate as ev
from .datamodel import Bounds, Position, RadioMap, SplitSpec, stratified_split
from .filters import FilterConfig, KfState, PfParams, PfState, kf_step, pf_step, ukf_step
from .fuse import (ChoquetMeasure, GridSpec, argmax_belief, bba_from_point,
                   choquet, confidence, convex_combo, dempster_combine,
                   fit_choquet_measure, make_grid, weighted_centroid,
                   write_belief_csv, write_belief_pgm)
from .preprocess import (ChannelVariances, NormStats, apply_norm,
                         fit_channel_variances, fit_norm_stats,
                         fit_zscore_stats, normalize_matrix)
from .regress import KnnIndex, RfConfig, RfModel, build_knn_index, predict_wknn, train_rf
from .topo import augment, features_for_vector, features_matrix

ARTIFACT_VERSION = "1"

FUSION_MODES = ("dst", "choquet", "convex")


class StageError(RuntimeError):
    """Wraps a pipeline failure with the name of the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    """Calibration-time choices for one deployable pipeline."""

    norm_mode: str = "dbm_zscore"
    filter: ev.FilterSpec = field(default_factory=ev.FilterSpec)
    use_ph: bool = True
    k: int = 7
    eps: float = 1e-9
    n_trees: int = 200
    max_depth: int | None = 28
    alpha: float | None = None  # None -> select on validation
    alpha_grid: tuple = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
    cell_width: float = 0.5
    theta_discount: float = 0.05
    fusion_mode: str = "dst"
    dst_point_mode: str = "belief_weighted"
    ratios: tuple = (0.70, 0.15, 0.15)
    seed: int = 0
    grids: ev.SearchGrids | None = None  # None skips cross-validated search
    convex_lambda: float = 0.5


@dataclass(frozen=True, eq=False)
class PipelineArtifact:
    version: str
    meta: dict
    config: dict
    norm: NormStats
    variances: ChannelVariances
    filter_cfg: FilterConfig
    rf: RfModel
    knn: KnnIndex
    ph_stats: NormStats | None
    grid: GridSpec
    alpha: float
    beta: float
    theta_discount: float
    measure: ChoquetMeasure
    dst_point_mode: str
    fusion_mode: str
    k: int
    eps: float
    convex_lambda: float

    @property
    def d(self) -> int:
        return self.norm.d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def artifact_to_dict(a: PipelineArtifact) -> dict:
    return _jsonable({
        "version": a.version,
        "meta": a.meta,
        "config": a.config,
        "norm": {"mode": a.norm.mode, "mu": a.norm.mu, "sigma": a.norm.sigma,
                 "floored": a.norm.floored.astype(bool)},
        "variances": {"var": a.variances.var, "shrinkage": a.variances.shrinkage},
        "filter": {"method": a.filter_cfg.method, "q_gamma": a.filter_cfg.q_gamma,
                   "r": a.filter_cfg.r,
                   "pf": {"n_particles": a.filter_cfg.pf.n_particles,
                          "ess_tau": a.filter_cfg.pf.ess_tau,
                          "predict_sigma": a.filter_cfg.pf.predict_sigma,
                          "seed": a.filter_cfg.pf.seed}},
        "rf": a.rf.to_dict(),
        "knn": {"points": a.knn.points, "labels": a.knn.labels,
                "var": a.knn.metric.var, "k": a.k, "eps": a.eps},
        "ph_stats": (None if a.ph_stats is None else
                     {"mu": a.ph_stats.mu, "sigma": a.ph_stats.sigma,
                      "floored": a.ph_stats.floored.astype(bool)}),
        "fusion": {"mode": a.fusion_mode, "alpha": a.alpha, "beta": a.beta,
                   "cell_width": a.grid.h, "theta_discount": a.theta_discount,
                   "dst_point_mode": a.dst_point_mode,
                   "bounds": a.grid.bounds.as_tuple(),
                   "measure": {"mu1": a.measure.mu1, "mu2": a.measure.mu2},
                   "convex_lambda": a.convex_lambda},
    })


def artifact_from_dict(d: dict) -> PipelineArtifact:
    if d.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"artifact version {d.get('version')!r} is not "
                         f"supported (expected {ARTIFACT_VERSION!r})")
    norm = NormStats(d["norm"]["mode"], np.array(d["norm"]["mu"]),
                     np.array(d["norm"]["sigma"]),
                     np.array(d["norm"]["floored"], dtype=bool))
    variances = ChannelVariances(np.array(d["variances"]["var"]),
                                 d["variances"]["shrinkage"])
    f = d["filter"]
    filter_cfg = FilterConfig(f["method"], f["q_gamma"], np.array(f["r"]),
                              pf=PfParams(**f["pf"]))
    rf = RfModel.from_dict(d["rf"])
    knn_var = ChannelVariances(np.array(d["knn"]["var"]))
    knn = build_knn_index(np.array(d["knn"]["points"]),
                          np.array(d["knn"]["labels"]), knn_var)
    ph_stats = None
    if d["ph_stats"] is not None:
        ph_stats = NormStats("dbm_zscore", np.array(d["ph_stats"]["mu"]),
                             np.array(d["ph_stats"]["sigma"]),
                             np.array(d["ph_stats"]["floored"], dtype=bool))
    fusion = d["fusion"]
    grid = make_grid(Bounds(*fusion["bounds"]), fusion["cell_width"])
    return PipelineArtifact(
        version=d["version"], meta=d["meta"], config=d["config"], norm=norm,
        variances=variances, filter_cfg=filter_cfg, rf=rf, knn=knn,
        ph_stats=ph_stats, grid=grid, alpha=fusion["alpha"],
        beta=fusion["beta"], theta_discount=fusion["theta_discount"],
        measure=ChoquetMeasure(**fusion["measure"]),
        dst_point_mode=fusion["dst_point_mode"], fusion_mode=fusion["mode"],
        k=d["knn"]["k"], eps=d["knn"]["eps"],
        convex_lambda=fusion["convex_lambda"])


def save_artifact(a: PipelineArtifact, path) -> None:
    """Serialize atomically: the file appears only once fully written."""
    payload = json.dumps(artifact_to_dict(a), sort_keys=True, indent=1)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(payload + "\n")
    os.replace(tmp, path)


def load_artifact(path) -> PipelineArtifact:
    with open(path) as fh:
        return artifact_from_dict(json.load(fh))


def fit_pipeline(data: RadioMap, cfg: PipelineConfig = PipelineConfig()) -> PipelineArtifact:
    """Calibrate one pipeline on a survey; every stage failure names itself."""

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # noqa: BLE001 - rewrap with stage context
            raise StageError(name, exc) from exc

    train, val, _test = stage("split", stratified_split, data,
                              SplitSpec(cfg.ratios, cfg.seed))
    norm = stage("normalize", fit_norm_stats, train, cfg.norm_mode)
    xtr = normalize_matrix(train.rss_matrix(), norm)
    variances = stage("variances", fit_channel_variances, xtr)

    fspec = cfg.filter
    k, n_trees, max_depth = cfg.k, cfg.n_trees, cfg.max_depth
    alpha, cell_width = cfg.alpha, cfg.cell_width
    if cfg.grids is not None:
        sel = stage("grid-search", ev.cv_grid_search, train, cfg.grids,
                    5, cfg.seed, cfg.filter.method, cfg.norm_mode,
                    cfg.theta_discount, cfg.dst_point_mode)
        fspec = replace(fspec, gamma=sel.gamma, n_particles=sel.n_particles,
                        ess_tau=sel.ess_tau)
        k, n_trees, max_depth = sel.k, sel.n_trees, sel.max_depth
        alpha, cell_width = sel.alpha, sel.cell_width

    filter_cfg = FilterConfig(fspec.method, fspec.gamma, variances.var,
                              pf=PfParams(fspec.n_particles, fspec.ess_tau,
                                          fspec.predict_sigma,
                                          seed=ev.derive_seed(cfg.seed, 101)))

    ph_stats = None
    features = xtr
    if cfg.use_ph:
        ph_train = stage("ph-features", features_matrix, xtr)
        ph_stats = fit_zscore_stats(ph_train)
        features = np.hstack([xtr, (ph_train - ph_stats.mu) / ph_stats.sigma])
    metric = stage("metric", fit_channel_variances, features)

    ytr = train.xy_matrix()
    rf = stage("train-rf", train_rf, features, ytr,
               RfConfig(n_trees, max_depth, seed=ev.derive_seed(cfg.seed, 1)))
    knn = stage("index-knn", build_knn_index, features, ytr, metric)
    grid = make_grid(data.bounds, cell_width)

    # validation pass: DST scale, confidence scale, fuzzy measure
    xval = normalize_matrix(val.rss_matrix(), norm)
    xval_f = ev.filter_streams_by_rp(xval, val.rp_ids(), filter_cfg)
    if cfg.use_ph:
        ph_val = features_matrix(xval_f)
        xval_feat = np.hstack([xval_f, (ph_val - ph_stats.mu) / ph_stats.sigma])
    else:
        xval_feat = xval_f
    yval = val.xy_matrix()
    p_rf = rf.predict_batch(xval_feat)
    p_knn = np.array([predict_wknn(knn, x, min(k, knn.m), cfg.eps).xy
                      for x in xval_feat])
    if alpha is None:
        alpha = stage("select-alpha", ev.select_alpha, p_rf, p_knn, yval,
                      grid, cfg.alpha_grid, cfg.theta_discount,
                      cfg.dst_point_mode)
    med = ev.median_min_centroid_distance(np.vstack([p_rf, p_knn]), grid)
    beta = 1.0 / max(med, 1e-9)

    err_rf = ev.euclidean_errors(p_rf, yval)
    err_knn = ev.euclidean_errors(p_knn, yval)
    scores = np.column_stack([
        [confidence(Position(*p), grid, beta) for p in p_rf],
        [confidence(Position(*p), grid, beta) for p in p_knn]])
    targets = np.exp(-beta * np.minimum(err_rf, err_knn))
    measure = stage("fit-measure", fit_choquet_measure, scores, targets).measure

    meta = {"dataset": data.meta.get("name", "unknown"),
            "n_wifi": data.meta["n_wifi"], "n_ble": data.meta["n_ble"],
            "d": data.d, "channel_kinds": list(data.channel_kinds),
            "n_train": train.n_samples, "n_val": val.n_samples,
            "seed": cfg.seed}
    config_snapshot = _jsonable({
        "norm_mode": cfg.norm_mode, "filter": vars(fspec).copy(),
        "use_ph": cfg.use_ph, "k": k, "eps": cfg.eps, "n_trees": n_trees,
        "max_depth": max_depth, "alpha_grid": list(cfg.alpha_grid),
        "ratios": list(cfg.ratios), "seed": cfg.seed,
        "fusion_mode": cfg.fusion_mode})
    return PipelineArtifact(
        version=ARTIFACT_VERSION, meta=meta, config=config_snapshot, norm=norm,
        variances=variances, filter_cfg=filter_cfg, rf=rf, knn=knn,
        ph_stats=ph_stats, grid=grid, alpha=float(alpha), beta=float(beta),
        theta_discount=cfg.theta_discount, measure=measure,
        dst_point_mode=cfg.dst_point_mode, fusion_mode=cfg.fusion_mode,
        k=int(k), eps=cfg.eps, convex_lambda=cfg.convex_lambda)


@dataclass
class PredictResult:
    position: Position
    rf_position: Position
    knn_position: Position
    confidence_rf: float
    confidence_knn: float
    fused_confidence: float
    bba: object | None = None


class PredictorSession:
    """Stateful per-scan predictor; filter state persists across calls.

    One-shot prediction is a fresh session per scan (the filter then passes
    the first observation through, per the initialize-at-observation rule).
    """

    def __init__(self, artifact: PipelineArtifact):
        self.artifact = artifact
        self._kf: list[KfState] | None = None
        self._pf: list[PfState] | None = None
        self._pf_rngs = None

    def _filter_scan(self, z: np.ndarray) -> np.ndarray:
        a = self.artifact
        cfg = a.filter_cfg
        if cfg.method == "none":
            return z
        if cfg.method in ("kf", "ukf"):
            if self._kf is None:
                self._kf = [KfState(float(z[i]), float(cfg.r[i]))
                            for i in range(len(z))]
                return z.copy()
            out = np.empty_like(z)
            for i, state in enumerate(self._kf):
                r = float(cfg.r[i])
                if cfg.method == "kf":
                    new = kf_step(state, float(z[i]), cfg.q_gamma * r, r)
                else:
                    new = ukf_step(state, float(z[i]), cfg.q_gamma * r, r,
                                   cfg.ukf)
                self._kf[i] = new
                out[i] = new.x_hat
            return out
        if self._pf is None:
            self._pf_rngs = [np.random.default_rng(
                np.random.SeedSequence(cfg.pf.seed, spawn_key=(i,)))
                for i in range(len(z))]
            m = cfg.pf.n_particles
            self._pf = [PfState(self._pf_rngs[i].normal(float(z[i]), 1.0, m),
                                np.full(m, 1.0 / m)) for i in range(len(z))]
            return np.array([s.estimate for s in self._pf])
        out = np.empty_like(z)
        for i, state in enumerate(self._pf):
            new = pf_step(state, float(z[i]), float(cfg.r[i]),
                          cfg.pf.ess_tau, cfg.pf.predict_sigma,
                          self._pf_rngs[i])
            self._pf[i] = new
            out[i] = new.estimate
        return out

    def predict(self, raw_scan, fusion_mode: str | None = None,
                convex_lambda: float | None = None,
                keep_bba: bool = False) -> PredictResult:
        a = self.artifact
        scan = np.asarray(raw_scan, dtype=float)
        if scan.shape != (a.d,):
            raise ValueError(f"scan must have {a.d} channels, got {scan.shape}")
        mode = fusion_mode or a.fusion_mode
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        lam = a.convex_lambda if convex_lambda is None else convex_lambda

        z = apply_norm(scan, a.norm)
        z = self._filter_scan(z)
        feat = z
        if a.ph_stats is not None:
            feat = augment(z, features_for_vector(z), a.ph_stats)
        r_rf = Position(*a.rf.predict_batch(feat.reshape(1, -1))[0])
        r_knn = predict_wknn(a.knn, feat, min(a.k, a.knn.m), a.eps)
        s_rf = confidence(r_rf, a.grid, a.beta)
        s_knn = confidence(r_knn, a.grid, a.beta)
        fused_conf = choquet(s_rf, s_knn, a.measure)

        bba = None
        if mode == "dst":
            m1 = bba_from_point(r_rf, a.grid, a.alpha, a.theta_discount)
            m2 = bba_from_point(r_knn, a.grid, a.alpha, a.theta_discount)
            bba = dempster_combine(m1, m2)
            if a.dst_point_mode == "argmax_centroid":
                position = argmax_belief(bba, a.grid)[1]
            else:
                position = weighted_centroid(bba, a.grid)
        elif mode == "choquet":
            num = s_rf * a.measure.mu1
            den = num + s_knn * a.measure.mu2
            lam_star = 0.5 if den <= 0 else min(1.0, max(0.0, num / den))
            position = convex_combo(r_rf, r_knn, lam_star)
        else:
            position = convex_combo(r_rf, r_knn, lam)
        return PredictResult(position, r_rf, r_knn, s_rf, s_knn, fused_conf,
                             bba if keep_bba else None)


def predict_one(artifact: PipelineArtifact, raw_scan, **kwargs) -> PredictResult:
    return PredictorSession(artifact).predict(raw_scan, **kwargs)


def export_belief_map(artifact: PipelineArtifact, raw_scan, pgm_path,
                      csv_path=None) -> tuple[int, Position]:
    """Write the fused belief map for one scan; returns the argmax cell."""
    res = PredictorSession(artifact).predict(raw_scan, fusion_mode="dst",
                                             keep_bba=True)
    write_belief_pgm(res.bba, artifact.grid, pgm_path)
    if csv_path is not None:
        write_belief_csv(res.bba, artifact.grid, csv_path)
    return argmax_belief(res.bba, artifact.grid)


# ---------------------------------------------------------------------------
# latency benchmark (per-update cost model validation)
# ---------------------------------------------------------------------------

def _median_ns(samples) -> float:
    return float(np.median(np.asarray(samples)))


def _time_stage(fn, n: int) -> float:
    out = []
    for _ in range(n):
        t0 = time.perf_counter_ns()
        fn()
        out.append(time.perf_counter_ns() - t0)
    return _median_ns(out)


def bench_pipeline(artifact: PipelineArtifact, n_queries: int = 50,
                   seed: int = 0) -> dict:
    """Median per-stage latency plus log-log scaling slopes in the number of
    trees, particles, and grid cells (each varied alone)."""
    rng = np.random.default_rng(seed)
    a = artifact
    scans = rng.uniform(-90.0, -30.0, size=(n_queries, a.d))
    z_all = normalize_matrix(scans, a.norm)

    session = PredictorSession(a)
    session.predict(scans[0])  # warm state so the filter stage is a step

    report: dict = {"stages_ns": {}, "scaling": {}}

    i_query = {"i": 0}

    def next_z():
        i_query["i"] = (i_query["i"] + 1) % n_queries
        return z_all[i_query["i"]]

    z0 = z_all[0]
    report["stages_ns"]["filter"] = _time_stage(
        lambda: session._filter_scan(z0), n_queries)
    if a.ph_stats is not None:
        report["stages_ns"]["ph"] = _time_stage(
            lambda: features_for_vector(next_z()), n_queries)
        feats = np.array([augment(z, features_for_vector(z), a.ph_stats)
                          for z in z_all])
    else:
        feats = z_all
    report["stages_ns"]["rf"] = _time_stage(
        lambda: a.rf.predict_batch(feats[i_query["i"]].reshape(1, -1)),
        n_queries)

    def knn_once():
        next_z()
        predict_wknn(a.knn, feats[i_query["i"]], min(a.k, a.knn.m), a.eps)

    report["stages_ns"]["knn"] = _time_stage(knn_once, n_queries)

    p0 = Position(*a.rf.predict_batch(feats[0].reshape(1, -1))[0])
    p1 = predict_wknn(a.knn, feats[0], min(a.k, a.knn.m), a.eps)

    def dst_once(grid):
        m = dempster_combine(
            bba_from_point(p0, grid, a.alpha, a.theta_discount),
            bba_from_point(p1, grid, a.alpha, a.theta_discount))
        weighted_centroid(m, grid)

    report["stages_ns"]["dst"] = _time_stage(lambda: dst_once(a.grid), n_queries)

    # scaling in T (trees used), M_p (particles), S (cells)
    tree_counts = [t for t in (25, 50, 100, 200, 400) if t <= len(a.rf.trees)]
    if len(tree_counts) >= 2:
        lat = []
        for t in tree_counts:
            sub = RfModel(a.rf.config, a.rf.n_features, a.rf.trees[:t])
            lat.append(_time_stage(
                lambda m=sub: m.predict_batch(feats[0].reshape(1, -1)),
                max(15, n_queries // 2)))
        report["scaling"]["n_trees"] = _loglog_slope(tree_counts, lat)

    particle_counts = (1_000, 4_000, 16_000)
    lat = []
    for mp in particle_counts:
        prng = np.random.default_rng(seed)
        state = PfState(prng.normal(0.0, 1.0, mp), np.full(mp, 1.0 / mp))
        lat.append(_time_stage(
            lambda s=state, g=prng: pf_step(s, 0.1, 1.0, 0.3, 1.0, g),
            max(15, n_queries // 2)))
    report["scaling"]["n_particles"] = _loglog_slope(particle_counts, lat)
    report["pf_step_ns"] = lat[-1]

    widths = (2.0, 1.0, 0.5, 0.25)
    cells, lat = [], []
    for h in widths:
        grid = make_grid(a.grid.bounds, h)
        cells.append(grid.n_cells)
        lat.append(_time_stage(lambda g=grid: dst_once(g),
                               max(15, n_queries // 2)))
    report["scaling"]["n_cells"] = _loglog_slope(cells, lat)

    # PF-vs-KF per-update cost at the artifact's particle count
    mp = a.filter_cfg.pf.n_particles
    prng = np.random.default_rng(seed)
    pf_state = PfState(prng.normal(0.0, 1.0, mp), np.full(mp, 1.0 / mp))
    pf_ns = _time_stage(lambda: pf_step(pf_state, 0.1, 1.0, 0.3, 1.0, prng),
                        n_queries)
    kf_state = KfState(0.0, 1.0)
    kf_ns = _time_stage(lambda: kf_step(kf_state, 0.1, 0.5, 1.0), n_queries)
    report["pf_vs_kf_ratio"] = pf_ns / max(kf_ns, 1.0)
    report["pf_ns"] = pf_ns
    report["kf_ns"] = kf_ns
    return report


def _loglog_slope(xs, ys) -> float:
    slope = np.polyfit(np.log(np.asarray(xs, dtype=float)),
                       np.log(np.asarray(ys, dtype=float)), 1)[0]
    return float(slope)

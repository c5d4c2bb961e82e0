"""Twin-cohort simulation, multinomial subsampling and power studies.

Abundances are log-normal; within each twin pair the first ``|shrunk|`` OTUs
are pulled toward the pair's geometric mean by an exponent ``gamma0`` (MZ) or
``gamma0 / 2`` (DZ), then each row is renormalized.
"""

from __future__ import annotations

import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .abundance import OtuTable, RelAbundance, branch_proportions, to_relative
from .diversity import gower_center, root_unifrac
from .models import (
    CohortStructure,
    FitError,
    _identifiable,
    _normal_from_surface,
    _project_kernels,
    _Surface,
    _wishart_from_surface,
    _z_logdet,
    project_sym,
    wishart_fit_gower,
)
from .numerics import seeded_rng
from .pipeline import METHODS, trait
from .phylo import PhyloTree, branch_subset, parse_newick

__all__ = [
    "SimConfig",
    "PowerStudyConfig",
    "PowerTable",
    "ConfigError",
    "METHODS",
    "figure1_tree",
    "gen_twin_abundances",
    "subsample_depth",
    "study_nodes",
    "power_study",
    "sequencing_noise_study",
    "load_study_config",
]

log = logging.getLogger(__name__)

UNIVARIATE = {"logit", "boxcox"}


class ConfigError(ValueError):
    pass


def figure1_tree() -> PhyloTree:
    """The bundled 10-OTU tree with internal nodes labelled T1..T9.

    Topology follows the simulation tree of the reference study; branch
    lengths are all equal because the originals are not available.
    """
    text = resources.files("kinfrac").joinpath("data/figure1_tree.nwk").read_text("utf-8")
    return parse_newick(text)


@dataclass(frozen=True)
class SimConfig:
    n_mz: int = 50
    n_dz: int = 50
    R: int = 10
    mu0: float | tuple = 0.0
    sigma0_sq: float = 2.0
    rho0: float = 0.0
    gamma0: float = 0.0
    shrunk: tuple = (0, 1, 2, 3, 4, 5)
    seed: int = 0

    def __post_init__(self):
        if self.n_mz < 0 or self.n_dz < 0 or self.n_mz + self.n_dz < 2:
            raise ConfigError("need at least two twin pairs")
        if self.R < 2:
            raise ConfigError("R must be at least 2")
        if not self.sigma0_sq > 0:
            raise ConfigError("sigma0_sq must be positive")
        if not 0 <= self.rho0 < 1:
            raise ConfigError("rho0 must lie in [0, 1)")
        if not 0 <= self.gamma0 <= 1:
            raise ConfigError("gamma0 must lie in [0, 1]")
        shrunk = tuple(int(r) for r in self.shrunk)
        if any(r < 0 or r >= self.R for r in shrunk) or len(set(shrunk)) != len(shrunk):
            raise ConfigError("shrunk OTU indices must be distinct and in range")
        object.__setattr__(self, "shrunk", shrunk)
        if np.ndim(self.mu0) and len(self.mu0) != self.R:
            raise ConfigError("mu0 must be a scalar or have R entries")

    @property
    def gamma1(self) -> float:
        return self.gamma0 / 2

    @property
    def mean(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mu0, dtype=float), (self.R,)).copy()

    @property
    def cov(self) -> np.ndarray:
        R = self.R
        return self.sigma0_sq * ((1 - self.rho0) * np.eye(R) + self.rho0 * np.ones((R, R)))


def gen_twin_abundances(config: SimConfig, rng: np.random.Generator | None = None,
                        otu_ids: Sequence[str] | None = None
                        ) -> tuple[RelAbundance, CohortStructure]:
    """Simulate relative abundances for ``n_mz`` MZ and ``n_dz`` DZ pairs.

    Samples ``2f`` and ``2f + 1`` form pair ``f``; MZ pairs come first.
    """
    rng = rng if rng is not None else seeded_rng(config.seed)
    cohort = CohortStructure.twins(config.n_mz, config.n_dz)
    n, R = cohort.n, config.R
    loga = rng.multivariate_normal(config.mean, config.cov, size=n, method="cholesky")
    theta = np.exp(loga - loga.max(axis=1, keepdims=True))
    theta /= theta.sum(axis=1, keepdims=True)
    if config.gamma0 > 0 and config.shrunk:
        cols = list(config.shrunk)
        npairs = config.n_mz + config.n_dz
        gam = np.where(np.arange(npairs) < config.n_mz, config.gamma0, config.gamma1)[:, None]
        a, b = theta[0::2][:, cols], theta[1::2][:, cols]
        geo = np.sqrt(a * b)
        theta[0::2, cols] = geo**gam * a ** (1 - gam)
        theta[1::2, cols] = geo**gam * b ** (1 - gam)
        theta /= theta.sum(axis=1, keepdims=True)
    ids = tuple(otu_ids) if otu_ids is not None else tuple(f"OTU{r + 1}" for r in range(R))
    return RelAbundance(cohort.sample_ids, ids, theta), cohort


def subsample_depth(rel: RelAbundance, xi: int, rng: np.random.Generator) -> OtuTable:
    """Multinomial counts of total ``xi`` per sample with probabilities ``theta``."""
    if int(xi) != xi or xi < 1:
        raise ValueError("sequencing depth must be a positive integer")
    p = rel.theta / rel.theta.sum(axis=1, keepdims=True)
    counts = rng.multinomial(int(xi), p)
    return OtuTable(rel.sample_ids, rel.otu_ids, counts)


# --- power study -------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    name: str
    otus: tuple
    subset: np.ndarray
    n_shrunk: int
    n_other: int
    is_root: bool


def study_nodes(tree: PhyloTree, names: Sequence[str] | None = None,
                shrunk_otus: Sequence[str] = ()) -> list[Node]:
    """Internal nodes named ``T1, T2, ...``.

    Labelled internal nodes keep their labels. In an unlabelled tree ``Te`` is
    the ``e``-th internal node in post-order.
    """
    internal = list(tree.internal_nodes)
    by_name = {}
    for e, v in enumerate(internal, start=1):
        by_name[f"T{e}"] = v
    for v in internal:
        if tree.labels[v]:
            by_name[tree.labels[v]] = v
    if names is None:
        names = [f"T{e}" for e in range(1, len(internal) + 1)]
    shrunk = set(shrunk_otus)
    out = []
    for nm in names:
        if nm not in by_name:
            raise ConfigError(f"tree has no internal node {nm!r}")
        v = by_name[nm]
        otus = tuple(sorted(tree.clade(v)))
        s = sum(o in shrunk for o in otus)
        out.append(Node(nm, otus, branch_subset(tree, otus), s, len(otus) - s, v == tree.root))
    return out


@dataclass(frozen=True)
class PowerStudyConfig:
    sim: SimConfig = SimConfig()
    gamma0: tuple = (0.0,)
    rho0: tuple = (0.0,)
    nodes: tuple | None = None
    methods: tuple = ("wishart",)
    n_sim: int = 200
    n_perm: int = 100
    alpha: float = 0.05
    seed: int = 0
    restarts: int = 1
    early_stop: bool = True
    tree: str = "builtin:figure1"

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s): {', '.join(bad)}")
        for g in self.gamma0:
            if not 0 <= g <= 1:
                raise ConfigError(f"gamma0 value {g} outside [0, 1]")
        for r in self.rho0:
            if not 0 <= r < 1:
                raise ConfigError(f"rho0 value {r} outside [0, 1)")
        if self.n_sim < 1 or self.n_perm < 1:
            raise ConfigError("n_sim and n_perm must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")

    def cells(self) -> list[tuple[float, float]]:
        return [(g, r) for g in self.gamma0 for r in self.rho0]

    def load_tree(self, base: Path | None = None) -> PhyloTree:
        if self.tree == "builtin:figure1":
            return figure1_tree()
        path = Path(self.tree)
        if base is not None and not path.is_absolute():
            path = base / path
        return parse_newick(path.read_text(encoding="utf-8"))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sim"]["shrunk"] = list(self.sim.shrunk)
        return out


def cell_key(gamma0: float, rho0: float) -> tuple[int, int]:
    """Stable integer key of a grid cell, used to derive its random streams."""
    return int(round(gamma0 * 1_000_000)), int(round(rho0 * 1_000_000))


def cell_name(gamma0: float, rho0: float) -> str:
    return f"gamma{gamma0:g}_rho{rho0:g}"


class _PermKernels:
    """Projected kernel stacks for the observed and permuted A, built lazily."""

    def __init__(self, L, cohort: CohortStructure, perms):
        self.L, self.A, self.perms = L, cohort.A, perms
        K = _project_kernels(L, cohort.A, cohort.C)
        self.KC = K[1]
        self.obs = (K, _identifiable(K))
        self.cache: dict[int, tuple] = {}

    def __getitem__(self, i):
        if i not in self.cache:
            p = self.perms[i]
            W = self.L @ self.A[np.ix_(p, p)] @ self.L.T
            K = np.stack([(W + W.T) / 2, self.KC, np.eye(self.L.shape[0])])
            self.cache[i] = (K, _identifiable(K))
        return self.cache[i]


def _test_one(fit_obs, fit_perm, n_perm, alpha, early_stop):
    """Observed estimate, permutation p-value and decision.

    With ``early_stop`` the loop ends once the number of exceedances already
    forces ``p >= alpha``; the decision is the same as with all rounds.
    """
    h = fit_obs()
    limit = alpha * n_perm
    hits = done = failed = 0
    for i in range(n_perm):
        try:
            hp = fit_perm(i)
        except (FitError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.info("permutation %d failed: %s", i, exc)
            failed += 1
            continue
        done += 1
        hits += hp > h
        if early_stop and hits >= limit:
            break
    if done == 0:
        return {"status": "failed", "h": h}
    stopped = early_stop and hits >= limit
    p = hits / done
    return {"status": "ok", "h": float(h), "p": p, "p_is_lower_bound": bool(stopped and done < n_perm),
            "reject": bool(p < alpha), "n_perm_used": done, "n_failed": failed}


def _run_round(job) -> dict:
    cfg, tree, gamma0, rho0, r, nodes = job
    rng = seeded_rng(cfg.seed, (*cell_key(gamma0, rho0), r))
    sim = replace(cfg.sim, gamma0=gamma0, rho0=rho0)
    otu_ids = [f"OTU{i + 1}" for i in range(sim.R)]
    rel, cohort = gen_twin_abundances(sim, rng, otu_ids)
    P = branch_proportions(rel, tree).P
    n = cohort.n
    perms = [rng.permutation(n) for _ in range(cfg.n_perm)]
    L = cohort.projector().L
    K = _PermKernels(L, cohort, perms)
    out = {}
    warnings.simplefilter("ignore")
    for node in nodes:
        U = root_unifrac(P, subset=node.subset, lengths=tree.branch_lengths).U
        M = gower_center(U).M
        for method in cfg.methods:
            key = f"{node.name}|{method}"
            try:
                if method == "wishart":
                    Z = project_sym(L, M)
                    ldZ = _z_logdet(Z, True)

                    def fit(kern, Z=Z, ldZ=ldZ):
                        return _wishart_from_surface(_Surface(kern[0], Z), kern[1], ldZ,
                                                     restarts=cfg.restarts, seed=cfg.seed).h
                else:
                    if method in UNIVARIATE and node.is_root:
                        out[key] = {"status": "na"}
                        continue
                    y = trait(method, U=U, M=M, theta_e=rel.node_abundance(node.otus),
                              seed=cfg.seed)
                    ry = L @ y

                    def fit(kern, ry=ry, yy=float(y @ y)):
                        return _normal_from_surface(_Surface(kern[0], ry), kern[1],
                                                    restarts=cfg.restarts, seed=cfg.seed,
                                                    ref_norm2=yy).h
                out[key] = _test_one(lambda: fit(K.obs), lambda i: fit(K[i]),
                                     cfg.n_perm, cfg.alpha, cfg.early_stop)
            except (FitError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                out[key] = {"status": "failed", "error": str(exc)}
    return out


def _aggregate(rounds: list[dict], nodes, methods, alpha) -> dict:
    res = {}
    for node in nodes:
        res[node.name] = {}
        for m in methods:
            key = f"{node.name}|{m}"
            recs = [r[key] for r in rounds]
            ok = [x for x in recs if x["status"] == "ok"]
            na = sum(x["status"] == "na" for x in recs)
            failed = sum(x["status"] == "failed" for x in recs)
            if failed:
                warnings.warn(f"{node.name}/{m}: {failed} simulation rounds failed and were "
                              "excluded", stacklevel=3)
            if not ok:
                res[node.name][m] = {"rate": None, "n": 0, "n_reject": 0, "n_na": na,
                                     "n_failed": failed, "ci95": None, "mean_h": None}
                continue
            k = sum(x["reject"] for x in ok)
            ci = stats.binomtest(k, len(ok)).proportion_ci(0.95, method="exact")
            res[node.name][m] = {
                "rate": k / len(ok), "n": len(ok), "n_reject": k, "n_na": na,
                "n_failed": failed, "ci95": [float(ci.low), float(ci.high)],
                "mean_h": float(np.mean([x["h"] for x in ok])),
            }
    return res


@dataclass
class PowerTable:
    """Rejection rates at level ``alpha`` per grid cell, node and method."""

    cells: list
    nodes: list
    node_counts: dict
    methods: list
    n_sim: int
    n_perm: int
    alpha: float = 0.05
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def cell(self, gamma0: float, rho0: float) -> dict:
        for c in self.cells:
            if math.isclose(c["gamma0"], gamma0) and math.isclose(c["rho0"], rho0):
                return c
        raise KeyError(f"no cell gamma0={gamma0}, rho0={rho0}")

    def rate(self, gamma0: float, rho0: float, node: str, method: str) -> float:
        r = self.cell(gamma0, rho0)["results"][node][method]["rate"]
        return float("nan") if r is None else r

    def to_tsv(self) -> str:
        buf = io.StringIO()
        cols = [(c, m) for c in self.cells for m in self.methods]
        buf.write("node\t(s,u)\t" + "\t".join(
            f"{cell_name(c['gamma0'], c['rho0'])}:{m}" for c, m in cols) + "\n")
        for nm in self.nodes:
            s, u = self.node_counts[nm]
            vals = []
            for c, m in cols:
                r = c["results"][nm][m]["rate"]
                vals.append("NA" if r is None else f"{r:.3f}")
            buf.write(f"{nm}\t({s},{u})\t" + "\t".join(vals) + "\n")
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"n_sim": self.n_sim, "n_perm": self.n_perm, "alpha": self.alpha,
                "seed": self.seed, "methods": list(self.methods), "nodes": list(self.nodes),
                "node_counts": {k: list(v) for k, v in self.node_counts.items()},
                "cells": self.cells, "meta": self.meta}

    def write(self, out_dir: str | Path):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "power_table.tsv").write_text(self.to_tsv(), encoding="utf-8")
        (out / "power_table.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True),
                                              encoding="utf-8")


def _map(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def power_study(cfg: PowerStudyConfig, tree: PhyloTree | None = None, *,
                out_dir: str | Path | None = None, resume: bool = False, threads: int = 1,
                progress: Callable[[str], None] | None = None) -> PowerTable:
    """Rejection rates of the permutation test over the ``gamma0 x rho0`` grid.

    Round ``r`` of a cell draws from stream ``(seed, cell key, r)``. Within a
    round all nodes and methods share the simulated data and the permutation
    list. With ``out_dir`` each finished cell is saved under ``cells/``; with
    ``resume`` saved cells are loaded instead of recomputed.
    """
    tree = tree if tree is not None else cfg.load_tree()
    otu_ids = [f"OTU{i + 1}" for i in range(cfg.sim.R)]
    missing = set(otu_ids) - set(tree.leaf_labels)
    if missing:
        raise ConfigError(f"tree lacks simulated OTU labels: {', '.join(sorted(missing))}")
    shrunk_otus = [otu_ids[i] for i in cfg.sim.shrunk]
    nodes = study_nodes(tree, cfg.nodes, shrunk_otus)
    cell_dir = Path(out_dir) / "cells" if out_dir is not None else None
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
    # saved configs went through JSON, so compare in that form
    cfg_json = json.loads(json.dumps(cfg.to_dict()))
    cells = []
    for gamma0, rho0 in cfg.cells():
        path = cell_dir / f"{cell_name(gamma0, rho0)}.json" if cell_dir is not None else None
        if resume and path is not None and path.exists():
            saved = json.loads(path.read_text(encoding="utf-8"))
            if saved.get("config") == cfg_json:
                cells.append(saved["cell"])
                if progress:
                    progress(f"cell {cell_name(gamma0, rho0)}: loaded")
                continue
            log.warning("saved cell %s was produced by a different config; recomputing", path)
        jobs = [(cfg, tree, gamma0, rho0, r, nodes) for r in range(cfg.n_sim)]
        rounds = _map(_run_round, jobs, threads)
        cell = {"gamma0": gamma0, "rho0": rho0, "n_sim": cfg.n_sim,
                "results": _aggregate(rounds, nodes, cfg.methods, cfg.alpha)}
        cells.append(cell)
        if path is not None:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps({"config": cfg.to_dict(), "cell": cell}, sort_keys=True),
                           encoding="utf-8")
            tmp.replace(path)
        if progress:
            progress(f"cell {cell_name(gamma0, rho0)}: done")
    table = PowerTable(cells, [nd.name for nd in nodes],
                       {nd.name: (nd.n_shrunk, nd.n_other) for nd in nodes},
                       list(cfg.methods), cfg.n_sim, cfg.n_perm, cfg.alpha, cfg.seed,
                       meta={"config": cfg.to_dict(), "early_stop": cfg.early_stop})
    if out_dir is not None:
        table.write(out_dir)
    return table


# --- sequencing noise ------------------------------------------------------------

def sequencing_noise_study(rel: RelAbundance, cohort: CohortStructure, tree: PhyloTree,
                           depths: Sequence[int], n_rounds: int, seed: int, *,
                           subset=None, restarts: int = 1) -> dict:
    """Wishart ``h`` from multinomially subsampled data against the full-data value.

    Returns ``{"h_true": float, "h": {depth: array of n_rounds estimates}}``.
    Round ``r`` at depth index ``j`` uses stream ``(seed, j, r)``.
    """
    def h_of(theta_rel):
        P = branch_proportions(theta_rel, tree).P
        M = gower_center(root_unifrac(P, subset=subset, lengths=tree.branch_lengths).U).M
        return wishart_fit_gower(M, cohort, restarts=restarts, require_pd=False).h

    h_true = h_of(rel)
    out = {}
    for j, xi in enumerate(depths):
        hs = []
        for r in range(n_rounds):
            table = subsample_depth(rel, xi, seeded_rng(seed, (j, r)))
            hs.append(h_of(to_relative(table, pseudo=0.0)))
        out[int(xi)] = np.array(hs)
    return {"h_true": float(h_true), "h": out}


# --- config files ----------------------------------------------------------------

_LIST_KEYS = {"gamma0", "rho0", "nodes", "methods", "shrunk", "mu0"}
_SIM_KEYS = {"n_mz", "n_dz", "R", "mu0", "sigma0_sq", "shrunk"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("tree",):
        return raw
    if key in ("nodes", "methods"):
        if key == "nodes" and raw.lower() == "all":
            return None
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if key == "early_stop":
        if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "yes", "1")
    try:
        if key in _LIST_KEYS:
            vals = [x.strip() for x in raw.split(",") if x.strip()]
            if key == "shrunk":
                return tuple(int(v) - 1 for v in vals)  # 1-based in files
            if key == "mu0":
                return float(vals[0]) if len(vals) == 1 else tuple(float(v) for v in vals)
            return tuple(float(v) for v in vals)
        if key in ("n_mz", "n_dz", "R", "n_sim", "n_perm", "seed", "restarts"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


_ALL_KEYS = _SIM_KEYS | {"gamma0", "rho0", "nodes", "methods", "n_sim", "n_perm", "alpha",
                         "seed", "restarts", "early_stop", "tree"}


def load_study_config(path: str | Path) -> PowerStudyConfig:
    """Read ``key = value`` lines; lists are comma-separated, ``#`` starts a comment.

    ``shrunk`` lists 1-based OTU positions. ``tree`` is a Newick path relative
    to the config file, or ``builtin:figure1``.
    """
    path = Path(path)
    sim_kw, kw = {}, {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            val = _parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        (sim_kw if key in _SIM_KEYS else kw)[key] = val
    if "tree" in kw and kw["tree"] != "builtin:figure1":
        t = Path(kw["tree"])
        kw["tree"] = str(t if t.is_absolute() else (path.parent / t).resolve())
    try:
        return PowerStudyConfig(sim=SimConfig(**sim_kw), **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

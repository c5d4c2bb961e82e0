"""Command-line interface.

Exit status: 0 on success, 1 on a numerical failure, 2 on bad input. Data goes
to files or stdout; messages go to stderr. Each run writes a JSON manifest
next to its output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .abundance import TableError, branch_proportions, load_otu_table, to_relative
from .diversity import (
    DissimilarityMatrix,
    RankDeficientError,
    gower_center,
    read_matrix_tsv,
    root_unifrac,
    warn_if_not_distinct,
)
from .inference import bootstrap_ci, permutation_test
from .models import CohortStructure, FitError
from .numerics import NonFiniteObjectiveError
from .ordination import metric_mds, nonmetric_mds, pcoa
from .phylo import NewickError, branch_subset, read_newick
from .pipeline import METHODS, BootstrapEstimator, NormalPermFit, WishartPermFit, fit_method, trait
from .sim import ConfigError, load_study_config, power_study

log = logging.getLogger("kinfrac")


class InputError(Exception):
    pass


INPUT_ERRORS = (InputError, TableError, NewickError, ConfigError, RankDeficientError,
                FileNotFoundError, IsADirectoryError, PermissionError, KeyError, ValueError)
NUMERIC_ERRORS = (FitError, np.linalg.LinAlgError, NonFiniteObjectiveError, FloatingPointError)


# --- helpers -----------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("KINFRAC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"KINFRAC_THREADS must be an integer, got {env!r}") from None
    return 1


def _write(text: str, out: str | None):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _finite(x):
    """JSON-safe float (NaN and infinities become null)."""
    x = float(x)
    return x if np.isfinite(x) else None


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _finite(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _manifest(args, inputs: dict, outputs: list, started: float, extra: dict | None = None):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
    out = {
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items() if v},
        "outputs": {str(p): _sha256(p) for p in outputs if p and Path(p).is_file()},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        out.update(extra)
    return out


def _write_manifest(args, inputs, outputs, started, extra=None):
    target = getattr(args, "manifest", None)
    if target is None:
        primary = next((p for p in outputs if p and p != "-"), None)
        if primary is None:
            return
        p = Path(primary)
        target = (p / "manifest.json") if p.is_dir() else p.with_name(p.name + ".manifest.json")
    Path(target).write_text(_dump(_manifest(args, inputs, outputs, started, extra)),
                            encoding="utf-8")


# --- input loading ---------------------------------------------------------------------

def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise InputError(f"{path}: empty file")
    return rows[0], rows[1:]


def load_families(path, sample_ids):
    header, rows = _read_csv(path)
    if len(header) < 3:
        raise InputError(f"{path}: expected columns sample,family,zygosity")
    fam, zyg = {}, {}
    for lineno, r in enumerate(rows, start=2):
        if len(r) < 3:
            raise InputError(f"{path}:{lineno}: expected 3 fields")
        sid, fid, z = r[0].strip(), r[1].strip(), r[2].strip().upper()
        if z not in ("MZ", "DZ", "NA"):
            raise InputError(f"{path}:{lineno}: zygosity must be MZ, DZ or NA, got {r[2]!r}")
        if sid in fam:
            raise InputError(f"{path}:{lineno}: duplicate sample {sid!r}")
        if fid in zyg and zyg[fid] != z:
            raise InputError(f"{path}:{lineno}: family {fid!r} has conflicting zygosity")
        fam[sid] = fid
        zyg[fid] = z
    missing = [s for s in sample_ids if s not in fam]
    if missing:
        raise InputError(f"{path}: no family entry for sample(s) {', '.join(missing[:5])}")
    return [fam[s] for s in sample_ids], zyg


def load_covariates(path, sample_ids, intercept: bool):
    n = len(sample_ids)
    if path is None:
        if not intercept:
            raise InputError("--no-intercept needs a covariates file")
        return np.ones((n, 1))
    header, rows = _read_csv(path)
    vals = {}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            vals[r[0].strip()] = [float(c) for c in r[1:]]
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric covariate") from None
    missing = [s for s in sample_ids if s not in vals]
    if missing:
        raise InputError(f"{path}: no covariates for sample(s) {', '.join(missing[:5])}")
    X = np.array([vals[s] for s in sample_ids]).reshape(n, len(header) - 1)
    if intercept:
        X = np.hstack([np.ones((n, 1)), X])
    if X.shape[1] == 0:
        raise InputError("covariate matrix has no columns")
    return X


def _leaf_set(args, tree):
    if getattr(args, "node", None) and getattr(args, "subset", None):
        raise InputError("use either --node or --subset, not both")
    if getattr(args, "node", None):
        try:
            v = tree.find_node(args.node)
        except KeyError:
            raise InputError(f"tree has no node named {args.node!r}") from None
        return sorted(tree.clade(v))
    if getattr(args, "subset", None):
        otus = [o.strip() for o in args.subset.split(",") if o.strip()]
        unknown = [o for o in otus if o not in tree.leaf_index]
        if unknown:
            raise InputError(f"unknown OTU(s) in --subset: {', '.join(unknown)}")
        return otus
    return None


class Data:
    """Everything a fitting command needs, aligned to one sample order."""

    def __init__(self, args):
        self.inputs = {}
        self.U = None
        self.rel = None
        self.otus = None
        if args.dissimilarity:
            if args.tree or args.otu_table:
                raise InputError("give either --dissimilarity or --tree/--otu-table")
            dm = read_matrix_tsv(args.dissimilarity)
            self.inputs["dissimilarity"] = args.dissimilarity
            self.sample_ids = dm.ids
            self.U = dm.U
        else:
            if not (args.tree and args.otu_table):
                raise InputError("need --tree and --otu-table (or --dissimilarity)")
            tree = read_newick(args.tree)
            for w in tree.warnings:
                log.warning("%s: %s", args.tree, w)
            table = load_otu_table(Path(args.otu_table))
            self.inputs.update(tree=args.tree, otu_table=args.otu_table)
            self.rel = to_relative(table, args.pseudo)
            self.sample_ids = table.sample_ids
            self.otus = _leaf_set(args, tree)
            P = branch_proportions(self.rel, tree).P
            subset = branch_subset(tree, self.otus) if self.otus is not None else None
            Psub = P[:, subset] if subset is not None else P
            warn_if_not_distinct(Psub)
            self.U = root_unifrac(P, tree, subset).U
        fam_ids, zyg = load_families(args.families, self.sample_ids)
        self.inputs["families"] = args.families
        X = load_covariates(args.covariates, self.sample_ids, not args.no_intercept)
        if args.covariates:
            self.inputs["covariates"] = args.covariates
        self.cohort = CohortStructure.from_families(self.sample_ids, fam_ids, zyg, X)

    def theta_e(self, method):
        if method not in ("logit", "boxcox"):
            return None
        if self.rel is None:
            raise InputError(f"method {method} needs --tree and --otu-table")
        otus = self.otus if self.otus is not None else self.rel.otu_ids
        return self.rel.node_abundance(otus)


# --- commands ---------------------------------------------------------------------------

def cmd_unifrac(args):
    started = time.time()
    tree = read_newick(args.tree)
    for w in tree.warnings:
        log.warning("%s: %s", args.tree, w)
    table = load_otu_table(Path(args.otu_table))
    rel = to_relative(table, args.pseudo)
    otus = _leaf_set(args, tree)
    subset = branch_subset(tree, otus) if otus is not None else None
    P = branch_proportions(rel, tree)
    dm = root_unifrac(P, tree, subset)
    _write(dm.to_tsv(), args.output)
    _write_manifest(args, {"tree": args.tree, "otu_table": args.otu_table}, [args.output], started)
    return 0


def _fit_record(fit, method) -> dict:
    d = fit.to_dict()
    d["method"] = method
    return _clean(d)


def cmd_fit(args):
    started = time.time()
    data = Data(args)
    fit = fit_method(args.method, data.cohort, U=data.U, theta_e=data.theta_e(args.method),
                     restarts=args.restarts, seed=args.seed or 0)
    if not fit.converged:
        log.warning("optimizer did not reach the gradient tolerance (grad norm %.3g)",
                    fit.grad_norm)
    _write(_dump(_fit_record(fit, args.method)), args.output)
    _write_manifest(args, data.inputs, [args.output], started)
    return 0


def _perm_fit(args, data):
    if args.method == "wishart":
        return WishartPermFit(gower_center(data.U).M, data.cohort, restarts=args.restarts,
                              seed=args.seed)
    y = trait(args.method, U=data.U, theta_e=data.theta_e(args.method), seed=args.seed)
    return NormalPermFit(y, data.cohort, restarts=args.restarts, seed=args.seed)


def cmd_test(args):
    started = time.time()
    data = Data(args)
    fit = _perm_fit(args, data)
    res = permutation_test(fit, data.cohort.A, args.n_perm, args.seed, C=data.cohort.C,
                           permute_c=args.permute_c, add_one=args.add_one,
                           threads=_threads(args))
    out = _clean(res.to_dict())
    out["method"] = args.method
    _write(_dump(out), args.output)
    outputs = [args.output]
    if args.rounds:
        _write("round\th\n" + "".join(f"{i}\t{h!r}\n" for i, h in enumerate(res.h_perm)),
               args.rounds)
        outputs.append(args.rounds)
    _write_manifest(args, data.inputs, outputs, started)
    return 0


def cmd_ci(args):
    started = time.time()
    data = Data(args)
    est = BootstrapEstimator(args.method, data.cohort, U=data.U,
                             theta_e=data.theta_e(args.method), restarts=args.restarts,
                             seed=args.seed)
    h_hat = fit_method(args.method, data.cohort, U=data.U, theta_e=data.theta_e(args.method),
                       restarts=args.restarts, seed=args.seed).h
    res = bootstrap_ci(est, data.cohort.families(), args.n_boot, args.alpha, args.seed,
                       h_hat=h_hat, threads=_threads(args))
    out = _clean(res.to_dict())
    out["method"] = args.method
    _write(_dump(out), args.output)
    outputs = [args.output]
    if args.rounds:
        _write("round\th\n" + "".join(f"{i}\t{h!r}\n" for i, h in enumerate(res.h_boot)),
               args.rounds)
        outputs.append(args.rounds)
    _write_manifest(args, data.inputs, outputs, started)
    return 0


def cmd_ordinate(args):
    started = time.time()
    if args.dissimilarity:
        dm = read_matrix_tsv(args.dissimilarity)
        inputs = {"dissimilarity": args.dissimilarity}
    else:
        if not (args.tree and args.otu_table):
            raise InputError("need --dissimilarity or --tree/--otu-table")
        tree = read_newick(args.tree)
        table = load_otu_table(Path(args.otu_table))
        otus = _leaf_set(args, tree)
        subset = branch_subset(tree, otus) if otus is not None else None
        dm = root_unifrac(branch_proportions(to_relative(table, args.pseudo), tree), tree, subset)
        inputs = {"tree": args.tree, "otu_table": args.otu_table}
    if args.method == "pcoa":
        emb = pcoa(gower_center(dm.U).M, args.dims)
    elif args.method == "mmds":
        emb = metric_mds(dm.U, args.dims)
    else:
        if args.seed is None:
            raise InputError("nmds is randomized: --seed is required")
        emb = nonmetric_mds(dm.U, args.dims, seed=args.seed)
    _write(emb.to_tsv(dm.ids), args.output)
    outputs = [args.output]
    if args.meta:
        _write(_dump(_clean(emb.metadata())), args.meta)
        outputs.append(args.meta)
    _write_manifest(args, inputs, outputs, started)
    return 0


def cmd_simulate(args):
    started = time.time()
    cfg = load_study_config(args.config)
    cfg = replace(cfg, seed=args.seed)
    out = Path(args.output)
    table = power_study(cfg, out_dir=out, resume=args.resume, threads=_threads(args),
                        progress=lambda msg: log.info("%s", msg))
    log.info("wrote %s", out / "power_table.tsv")
    _write_manifest(args, {"config": args.config},
                    [out, out / "power_table.tsv", out / "power_table.json"], started,
                    extra={"resolved_config": cfg.to_dict()})
    if args.print:
        sys.stdout.write(table.to_tsv())
    return 0


# --- parser ------------------------------------------------------------------------------

def _data_args(p, families=True):
    g = p.add_argument_group("input")
    g.add_argument("--tree", help="Newick tree file")
    g.add_argument("--otu-table", help="tab-separated OTU table (OTUs x samples)")
    g.add_argument("--dissimilarity", help="precomputed dissimilarity matrix TSV")
    g.add_argument("--node", help="restrict to the OTUs under this internal node")
    g.add_argument("--subset", help="restrict to these OTUs (comma-separated)")
    g.add_argument("--pseudo", type=float, default=1.0, help="pseudo count (default 1)")
    if families:
        g.add_argument("--families", required=True, help="CSV: sample,family,zygosity")
        g.add_argument("--covariates", help="CSV with a header; first column is the sample id")
        g.add_argument("--no-intercept", action="store_true",
                       help="do not prepend an intercept column")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kinfrac", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("unifrac", help="root-UniFrac dissimilarity matrix")
    p.add_argument("--tree", required=True)
    p.add_argument("--otu-table", required=True)
    p.add_argument("--node")
    p.add_argument("--subset")
    p.add_argument("--pseudo", type=float, default=1.0)
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_unifrac)

    p = sub.add_parser("fit", help="fit the ACE model with one method")
    _data_args(p)
    p.add_argument("--method", choices=METHODS, default="wishart")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=None, help="seed for random restarts")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="permutation test of zero heritability")
    _data_args(p)
    p.add_argument("--method", choices=METHODS, default="wishart")
    p.add_argument("--n-perm", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--add-one", action="store_true", help="use (count + 1) / (n + 1)")
    p.add_argument("--permute-c", action="store_true", help="permute C together with A")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--rounds", help="write per-round estimates to this TSV")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("ci", help="family-bootstrap confidence interval")
    _data_args(p)
    p.add_argument("--method", choices=METHODS, default="wishart")
    p.add_argument("--n-boot", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--rounds", help="write per-round estimates to this TSV")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("ordinate", help="PCoA, metric or non-metric MDS coordinates")
    _data_args(p, families=False)
    p.add_argument("--method", choices=("pcoa", "mmds", "nmds"), default="pcoa")
    p.add_argument("-d", "--dims", type=int, default=3)
    p.add_argument("--seed", type=int, default=None, help="required for nmds")
    p.add_argument("--meta", help="write eigenvalues / stress metadata JSON here")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_ordinate)

    p = sub.add_parser("simulate", help="power / type-I error study")
    p.add_argument("--config", required=True, help="key = value study file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--resume", action="store_true", help="reuse finished cells")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--print", action="store_true", help="also print the table to stdout")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = ap.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="kinfrac: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"kinfrac: numerical failure: {exc}", file=sys.stderr)
        return 1
    except INPUT_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"kinfrac: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

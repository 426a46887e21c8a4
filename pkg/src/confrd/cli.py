"""Command-line interface and file plumbing.

Subcommands: ``analyze`` (empirical per-block pipeline), ``simulate`` (the
replicate grid), ``report`` (statistics tables and plot-ready series from
simulation results), ``fit`` (single-block MAP fit). Each takes ``--config``
(flat INI-style key-value file with section headers), ``--seed`` and ``--out``.

Every output CSV starts with a ``# manifest: <name>`` comment tying it to the
JSON manifest written alongside; rerunning from a manifest alone reproduces
all data rows byte-identically. Exit codes: 0 success, 2 config error, 3 data
error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .asymmetry import EPS_EMPIRICAL, summarize_asymmetry
from .channels import (BlockKey, ConfusionCounts, accuracy, collapse_flag,
                       mutual_information, normalize_rows)
from .errors import (CollapsedInput, ConfigInvalid, ConfrdError,
                     DegenerateFrontier, DegenerateProportions,
                     DegenerateSample, EmptyBlock, NoKnee, NonFinite,
                     OutOfBracket, RankDeficient, SchemaMismatch, UnknownAnalysis,
                     UnknownClass, ZeroRow, ZeroVariance)
from .fit import FitConfig, map_fit_distortion
from .rd import operating_point_slope, signatures, trace_frontier
from .simgen import (DEFAULT_A_GRID, DEFAULT_LAMBDA_GENS, DEFAULT_N_PER_ROWS,
                     DEFAULT_N_SEEDS, DEFAULT_SEED_ROOT, GridConfig, knee_point,
                     run_grid)
from .stats import (bh_fdr, cell_demeaned_anova, component_regression, floor_p,
                    magnitude_regression, residualize_within_slice,
                    slice_interaction_regression, spearman,
                    two_sample_proportion_test, welch_t, wilcoxon_rank_sum)

SCHEMA = ("system_group", "experiment", "condition", "model_instance",
          "stimulus_class", "response_class", "count")

DEFAULT_VOCABULARY = tuple(f"c{i:02d}" for i in range(16))

MANIFEST_NAME = "manifest.json"

_DATA_ERRORS = (SchemaMismatch, UnknownClass, EmptyBlock, ZeroRow,
                UnknownAnalysis, FileNotFoundError)

SIM_FIELDS = (
    "structure", "a", "lambda_gen", "n_per_row", "K", "n_sinks", "seed",
    "collapse", "mean_row_entropy", "mean_row_max", "gen_converged",
    "gen_iterations", "n_clipped", "accuracy", "empirical_rate",
    "a_f", "a_f_off", "n_pairs", "f_pairs", "mean_delta", "epsilon",
    "beta_true", "beta_abs_true", "kappa_true", "auc_true", "n_segments_true",
    "s_star_true", "fit_converged", "log_posterior",
    "beta_hat", "beta_abs_hat", "kappa_hat", "auc_hat", "n_segments_hat",
    "s_star_hat", "corr_sym", "corr_antisym", "strict_pass", "flags",
)

REPORT_ANALYSES = ("recovery", "groups", "correlations", "mechanism",
                   "components", "magnitude", "anova", "series", "knees")

GROUP_METRICS = ("auc_true", "beta_abs_true", "kappa_true", "auc_hat",
                 "beta_abs_hat", "kappa_hat", "f_pairs", "a_f_off")

SERIES_METRICS = ("auc_true", "auc_hat", "f_pairs", "mean_delta", "a_f_off",
                  "accuracy")

CORR_METRICS = ("beta_abs_true", "kappa_true", "auc_true", "beta_abs_hat",
                "kappa_hat", "auc_hat")


# ------------------------------------------------------------------ low-level IO

def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "NA"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return repr(f)
    return str(v)


def _parse_cell(s: str):
    if s == "NA":
        return None
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_csv(path: Path, fieldnames, rows, manifest_name: str = MANIFEST_NAME):
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest: {manifest_name}\n")
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in fieldnames])


def read_csv(path: Path):
    """Read a package-written CSV back into typed dict rows."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: _parse_cell(v) for k, v in row.items()} for row in reader]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    command: str
    tool_version: str
    timestamp: str
    config: dict
    inputs: dict
    seed_roots: list
    outputs: list

    def write(self, path: Path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def read(path: Path) -> "RunManifest":
        with open(path) as fh:
            return RunManifest(**json.load(fh))


def _make_manifest(command: str, config: dict, inputs, seed_roots, outputs) -> RunManifest:
    digests = {str(p): _sha256(Path(p)) for p in inputs}
    return RunManifest(command=command, tool_version=__version__,
                       timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                       config=config, inputs=digests,
                       seed_roots=list(seed_roots), outputs=list(outputs))


# ------------------------------------------------------------------ config

def load_config(path) -> dict:
    """INI file -> {section: {key: string}}."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}")
    except configparser.Error as exc:
        raise ConfigInvalid(f"cannot parse config: {exc}")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def _get(cfg: dict, section: str, key: str, default):
    return cfg.get(section, {}).get(key, default)


def _as_bool(s, what: str) -> bool:
    if isinstance(s, bool):
        return s
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigInvalid(f"{what}: expected a boolean, got {s!r}")


def _as_list(s, conv, what: str):
    if isinstance(s, (list, tuple)):
        return [conv(v) for v in s]
    try:
        return [conv(tok.strip()) for tok in str(s).split(",") if tok.strip()]
    except ValueError:
        raise ConfigInvalid(f"{what}: cannot parse list {s!r}")


def _as_num(s, conv, what: str):
    try:
        return conv(s)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{what}: cannot parse {s!r}")


def grid_from_config(cfg: dict, seed_override=None) -> GridConfig:
    sec = "simulate"
    fit = FitConfig(
        prior_strength=_as_num(_get(cfg, "fit", "prior_strength", 1e-3), float, "fit.prior_strength"),
        fit_lambda=_as_num(_get(cfg, "fit", "fit_lambda", 1.0), float, "fit.fit_lambda"),
        grad_tol=_as_num(_get(cfg, "fit", "grad_tol", 0.05), float, "fit.grad_tol"),
        max_grads=_as_num(_get(cfg, "fit", "max_grads", 60), int, "fit.max_grads"),
        fd_step=_as_num(_get(cfg, "fit", "fd_step", 1e-5), float, "fit.fd_step"),
    )
    seed_root = _as_num(_get(cfg, sec, "seed_root", DEFAULT_SEED_ROOT), int, "simulate.seed_root")
    if seed_override is not None:
        seed_root = int(seed_override)
    try:
        return GridConfig(
            structures=tuple(_as_list(_get(cfg, sec, "structures", "broad_weak, sink"), str, "structures")),
            a_grid=tuple(_as_list(_get(cfg, sec, "a_grid", DEFAULT_A_GRID), float, "a_grid")),
            lambda_gens=tuple(_as_list(_get(cfg, sec, "lambda_gens", DEFAULT_LAMBDA_GENS), float, "lambda_gens")),
            n_per_rows=tuple(_as_list(_get(cfg, sec, "n_per_rows", DEFAULT_N_PER_ROWS), int, "n_per_rows")),
            n_seeds=_as_num(_get(cfg, sec, "n_seeds", DEFAULT_N_SEEDS), int, "n_seeds"),
            K=_as_num(_get(cfg, sec, "k", 16), int, "K"),
            n_sinks=_as_num(_get(cfg, sec, "n_sinks", 2), int, "n_sinks"),
            seed_root=seed_root,
            antisym_normalize=_as_bool(_get(cfg, sec, "antisym_normalize", False), "antisym_normalize"),
            compose_mode=str(_get(cfg, sec, "compose_mode", "fold")),
            fit=fit,
        )
    except ValueError as exc:
        raise ConfigInvalid(str(exc))


def _config_snapshot(cfg: dict) -> dict:
    return {f"{sec}.{key}": val for sec, kv in sorted(cfg.items())
            for key, val in sorted(kv.items())}


# ------------------------------------------------------------------ ingestion

def ingest_confusions(path, vocabulary=None):
    """Long-form CSV -> one ConfusionCounts per block.

    Rows are grouped by (system_group, experiment, condition, model_instance);
    duplicate (stimulus, response) rows accumulate. Class labels must belong
    to the declared vocabulary so sparse blocks keep a consistent K.
    """
    vocab = tuple(vocabulary) if vocabulary is not None else DEFAULT_VOCABULARY
    index = {label: i for i, label in enumerate(vocab)}
    K = len(vocab)
    if K < 2:
        raise ConfigInvalid("vocabulary needs at least 2 classes")
    blocks: dict = {}
    order: list = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise SchemaMismatch("empty input file")
    if header != SCHEMA:
        raise SchemaMismatch(f"header {header!r} does not match {SCHEMA!r}")
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(SCHEMA):
            raise SchemaMismatch(f"line {lineno}: expected {len(SCHEMA)} fields, got {len(row)}")
        sysg, exp, cond, inst, stim, resp, count_s = row
        try:
            count = int(count_s)
        except ValueError:
            raise SchemaMismatch(f"line {lineno}: count {count_s!r} is not an integer")
        if count < 0:
            raise SchemaMismatch(f"line {lineno}: negative count {count}")
        if stim not in index:
            raise UnknownClass(f"line {lineno}: stimulus class {stim!r} not in vocabulary")
        if resp not in index:
            raise UnknownClass(f"line {lineno}: response class {resp!r} not in vocabulary")
        key = (sysg, exp, cond, inst)
        if key not in blocks:
            blocks[key] = np.zeros((K, K), dtype=np.int64)
            order.append(key)
        blocks[key][index[stim], index[resp]] += count
    out = []
    for key in order:
        mat = blocks[key]
        if mat.sum() == 0:
            raise EmptyBlock(f"block {key!r} has no positive counts")
        out.append(ConfusionCounts(mat, BlockKey(*key)))
    return out


def serialize_confusions(blocks, path, vocabulary=None):
    """Inverse of ingest_confusions: nonzero cells in long form."""
    vocab = tuple(vocabulary) if vocabulary is not None else DEFAULT_VOCABULARY
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCHEMA)
        for cc in blocks:
            bk = cc.block or BlockKey("unknown", "unknown", "unknown")
            for i in range(cc.K):
                for j in range(cc.K):
                    n = int(cc.counts[i, j])
                    if n > 0:
                        writer.writerow([bk.system_group, bk.experiment, bk.condition,
                                         bk.model_instance, vocab[i], vocab[j], n])


# ------------------------------------------------------------------ analyze

def analyze_blocks(blocks, epsilon: float = EPS_EMPIRICAL, prior: str = "empirical",
                   zero_row_policy: str = "error", run_fit: bool = True,
                   fit_cfg: FitConfig = FitConfig()):
    """Per-block pipeline: collapse gate, asymmetry, accuracy, MAP fit + RD
    signatures. Collapsed blocks stay in the output, flagged, with empty
    analytics."""
    if not blocks:
        raise EmptyBlock("no blocks to analyze")
    records = []
    for cc in blocks:
        bk = cc.block or BlockKey("unknown", "unknown", "unknown")
        rec = {
            "system_group": bk.system_group, "experiment": bk.experiment,
            "condition": bk.condition, "model_instance": bk.model_instance,
            "n_trials": int(cc.counts.sum()), "k_retained": None,
            "collapse": None, "mean_row_entropy": None, "mean_row_max": None,
            "accuracy": None, "empirical_rate": None,
            "a_f": None, "a_f_off": None, "n_pairs": None, "f_pairs": None,
            "mean_delta": None, "epsilon": epsilon,
            "fit_converged": None, "log_posterior": None,
            "beta_hat": None, "beta_abs_hat": None, "kappa_hat": None,
            "auc_hat": None, "n_segments_hat": None, "s_star_hat": None,
            "flags": "",
        }
        flags = []
        norm = normalize_rows(cc, zero_row_policy=zero_row_policy, prior=prior)
        ch = norm.channel
        rec["k_retained"] = ch.K
        if ch.K < cc.K:
            flags.append("classes_dropped")
        diag = collapse_flag(ch)
        rec["collapse"] = diag.flagged
        rec["mean_row_entropy"] = diag.mean_row_entropy
        rec["mean_row_max"] = diag.mean_row_max
        rec["accuracy"] = accuracy(ch)
        rec["empirical_rate"] = mutual_information(ch)
        asym = summarize_asymmetry(ch, epsilon)
        rec["a_f"] = asym.frobenius_index
        rec["a_f_off"] = asym.offdiag_frobenius
        rec["n_pairs"] = asym.n_pairs
        rec["f_pairs"] = asym.f_pairs
        rec["mean_delta"] = asym.mean_delta
        if diag.flagged:
            flags.append("collapsed")
        elif run_fit:
            counts_used = (cc if ch.K == cc.K
                           else ConfusionCounts(cc.counts[np.ix_(norm.retained, norm.retained)], bk))
            try:
                fitres = map_fit_distortion(counts_used, fit_cfg)
            except (CollapsedInput, NonFinite) as exc:
                flags.append(f"fit_failed:{type(exc).__name__}")
            else:
                rec["fit_converged"] = fitres.converged
                rec["log_posterior"] = fitres.log_posterior
                try:
                    sig = signatures(trace_frontier(fitres.rho_hat))
                except DegenerateFrontier:
                    flags.append("frontier_hat_degenerate")
                else:
                    rec["beta_hat"] = sig.beta
                    rec["beta_abs_hat"] = sig.beta_abs
                    rec["kappa_hat"] = sig.kappa
                    rec["auc_hat"] = sig.auc
                    rec["n_segments_hat"] = sig.n_segments
                try:
                    rec["s_star_hat"] = operating_point_slope(
                        fitres.rho_hat, rec["empirical_rate"])
                except OutOfBracket:
                    flags.append("s_star_out_of_bracket")
        rec["flags"] = ";".join(flags)
        records.append(rec)
    return records


ANALYZE_FIELDS = ("system_group", "experiment", "condition", "model_instance",
                  "n_trials", "k_retained", "collapse", "mean_row_entropy",
                  "mean_row_max", "accuracy", "empirical_rate", "a_f", "a_f_off",
                  "n_pairs", "f_pairs", "mean_delta", "epsilon", "fit_converged",
                  "log_posterior", "beta_hat", "beta_abs_hat", "kappa_hat",
                  "auc_hat", "n_segments_hat", "s_star_hat", "flags")


# ------------------------------------------------------------------ simulate

def sim_result_row(res) -> dict:
    cfg = res.config
    sig_t = res.signatures_true
    sig_h = res.signatures_hat
    rec = res.recovery
    return {
        "structure": cfg.structure, "a": cfg.a, "lambda_gen": cfg.lambda_gen,
        "n_per_row": cfg.n_per_row, "K": cfg.K, "n_sinks": cfg.n_sinks,
        "seed": cfg.seed, "collapse": res.collapse,
        "mean_row_entropy": res.collapse_diag.mean_row_entropy,
        "mean_row_max": res.collapse_diag.mean_row_max,
        "gen_converged": res.gen_converged, "gen_iterations": res.gen_iterations,
        "n_clipped": res.n_clipped, "accuracy": res.accuracy_proxy,
        "empirical_rate": res.empirical_rate,
        "a_f": res.asym.frobenius_index, "a_f_off": res.asym.offdiag_frobenius,
        "n_pairs": res.asym.n_pairs, "f_pairs": res.asym.f_pairs,
        "mean_delta": res.asym.mean_delta, "epsilon": res.asym.epsilon,
        "beta_true": None if sig_t is None else sig_t.beta,
        "beta_abs_true": None if sig_t is None else sig_t.beta_abs,
        "kappa_true": None if sig_t is None else sig_t.kappa,
        "auc_true": None if sig_t is None else sig_t.auc,
        "n_segments_true": None if sig_t is None else sig_t.n_segments,
        "s_star_true": res.s_star_true,
        "fit_converged": res.fit_converged, "log_posterior": res.log_posterior,
        "beta_hat": None if sig_h is None else sig_h.beta,
        "beta_abs_hat": None if sig_h is None else sig_h.beta_abs,
        "kappa_hat": None if sig_h is None else sig_h.kappa,
        "auc_hat": None if sig_h is None else sig_h.auc,
        "n_segments_hat": None if sig_h is None else sig_h.n_segments,
        "s_star_hat": res.s_star_hat,
        "corr_sym": None if rec is None else rec.corr_sym,
        "corr_antisym": None if rec is None else rec.corr_antisym,
        "strict_pass": None if rec is None else rec.strict_pass,
        "flags": ";".join(res.flags),
    }


def simulate(cfg: dict, out_dir: Path, jobs: int = 1, seed_override=None) -> Path:
    grid = grid_from_config(cfg, seed_override)
    results = run_grid(grid, jobs=jobs)
    rows = [sim_result_row(r) for r in results]
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "results.csv"
    write_csv(out, SIM_FIELDS, rows)
    manifest = _make_manifest("simulate", _config_snapshot(cfg), [],
                              [grid.seed_root], ["results.csv"])
    manifest.write(out_dir / MANIFEST_NAME)
    return out


# ------------------------------------------------------------------ report

def _column(rows, key, where=None):
    sel = rows if where is None else [r for r in rows if where(r)]
    return np.array([r[key] for r in sel], dtype=np.float64)


def _usable(rows, *keys):
    return [r for r in rows if all(r.get(k) is not None for k in keys)]


def _slices_of(rows):
    return sorted({(r["lambda_gen"], r["n_per_row"]) for r in rows})


def recovery_table(rows):
    """Strict-recovery pass fractions per (lambda_gen, N) and structure, with
    two-sample proportion tests and BH-FDR across slices."""
    fitted = [r for r in rows if not r["collapse"] and r.get("strict_pass") is not None]
    if not fitted:
        raise UnknownAnalysis("no fitted replicates for the recovery table")
    out = []
    pvals, pidx = [], []
    for i, (lam, n) in enumerate(_slices_of(fitted)):
        cell = {"lambda_gen": lam, "n_per_row": n}
        ks = {}
        for s in ("broad_weak", "sink"):
            sub = [r for r in fitted if r["structure"] == s
                   and r["lambda_gen"] == lam and r["n_per_row"] == n]
            npass = sum(1 for r in sub if r["strict_pass"])
            ks[s] = (npass, len(sub))
            tag = "bw" if s == "broad_weak" else "sink"
            cell[f"{tag}_pass"] = npass
            cell[f"{tag}_total"] = len(sub)
            cell[f"{tag}_frac"] = npass / len(sub) if sub else None
        if ks["broad_weak"][1] and ks["sink"][1]:
            cell["delta_frac"] = cell["bw_frac"] - cell["sink_frac"]
            try:
                t = two_sample_proportion_test(*ks["broad_weak"], *ks["sink"])
                cell["z"] = t.statistic
                cell["p_raw"] = t.p_value
                cell["p"] = t.p_value_floored
                pvals.append(t.p_value)
                pidx.append(i)
            except DegenerateProportions:
                cell["z"] = None
                cell["p_raw"] = None
                cell["p"] = None
        else:
            cell["delta_frac"] = None
            cell["z"] = None
            cell["p_raw"] = None
            cell["p"] = None
        cell["p_fdr"] = None
        out.append(cell)
    if pvals:
        adj = bh_fdr(pvals)
        for i, v in zip(pidx, adj):
            out[i]["p_fdr"] = float(v)
    return ("lambda_gen", "n_per_row", "bw_pass", "bw_total", "bw_frac",
            "sink_pass", "sink_total", "sink_frac", "delta_frac", "z",
            "p_raw", "p", "p_fdr"), out


def group_tests_table(rows, metrics, groups=("broad_weak", "sink")):
    """Wilcoxon + Welch comparisons between structures, FDR over metrics."""
    live = [r for r in rows if not r["collapse"]]
    for g in groups:
        if not any(r["structure"] == g for r in live):
            raise UnknownAnalysis(f"group {g!r} has no non-collapsed replicates")
    out = []
    for metric in metrics:
        usable = _usable(live, metric)
        x = _column(usable, metric, lambda r: r["structure"] == groups[0])
        y = _column(usable, metric, lambda r: r["structure"] == groups[1])
        row = {"metric": metric, "n_1": len(x), "n_2": len(y),
               "group_1": groups[0], "group_2": groups[1]}
        if len(x) and len(y):
            try:
                w = wilcoxon_rank_sum(x, y)
                row["wilcoxon_stat"] = w.statistic
                row["wilcoxon_p_raw"] = w.p_value
                row["wilcoxon_p"] = w.p_value_floored
            except DegenerateSample:
                row["wilcoxon_stat"] = row["wilcoxon_p_raw"] = row["wilcoxon_p"] = None
            try:
                t = welch_t(x, y)
                row["welch_t"] = t.statistic
                row["welch_df"] = t.df
                row["welch_p_raw"] = t.p_value
                row["welch_p"] = t.p_value_floored
                row["ci_low"], row["ci_high"] = t.effect_ci
            except ZeroVariance:
                row["welch_t"] = row["welch_df"] = row["welch_p_raw"] = None
                row["welch_p"] = row["ci_low"] = row["ci_high"] = None
        else:
            for k in ("wilcoxon_stat", "wilcoxon_p_raw", "wilcoxon_p", "welch_t",
                      "welch_df", "welch_p_raw", "welch_p", "ci_low", "ci_high"):
                row[k] = None
        out.append(row)
    for name in ("wilcoxon_p_raw", "welch_p_raw"):
        have = [i for i, r in enumerate(out) if r.get(name) is not None]
        if have:
            adj = bh_fdr([out[i][name] for i in have])
            for i, v in zip(have, adj):
                out[i][name.replace("_p_raw", "_p_fdr")] = float(v)
    for r in out:
        r.setdefault("wilcoxon_p_fdr", None)
        r.setdefault("welch_p_fdr", None)
    return ("metric", "group_1", "group_2", "n_1", "n_2", "wilcoxon_stat",
            "wilcoxon_p_raw", "wilcoxon_p", "wilcoxon_p_fdr", "welch_t",
            "welch_df", "welch_p_raw", "welch_p", "welch_p_fdr",
            "ci_low", "ci_high"), out


def correlations_table(rows, metrics=CORR_METRICS):
    """Within-group Spearman between off-diagonal asymmetry and signatures."""
    live = [r for r in rows if not r["collapse"]]
    out = []
    for group in ("broad_weak", "sink"):
        for metric in metrics:
            usable = _usable([r for r in live if r["structure"] == group],
                             "a_f_off", metric)
            row = {"group": group, "metric": metric, "n": len(usable),
                   "spearman_rho": None}
            if len(usable) >= 3:
                try:
                    row["spearman_rho"] = spearman(_column(usable, "a_f_off"),
                                                   _column(usable, metric))
                except ZeroVariance:
                    pass
            out.append(row)
    return ("group", "metric", "n", "spearman_rho"), out


def mechanism_table(rows):
    """Per-slice accuracy-residualized regression of true RD efficiency on the
    antisymmetry magnitude, with the structure interaction."""
    usable = _usable([r for r in rows if not r["collapse"]], "auc_true", "accuracy")
    if not usable:
        raise UnknownAnalysis("no usable replicates for the mechanism table")
    slices = np.array([f"{r['lambda_gen']!r}|{r['n_per_row']}" for r in usable])
    resid = residualize_within_slice(_column(usable, "auc_true"),
                                     _column(usable, "accuracy"), slices)
    sink = np.array([1.0 if r["structure"] == "sink" else 0.0 for r in usable])
    fits = slice_interaction_regression(resid, _column(usable, "a"), sink, slices)
    out = []
    for lab, fit in zip(fits.slices, fits.fits):
        lam_s, n_s = lab.split("|")
        out.append({
            "lambda_gen": float(lam_s), "n_per_row": int(n_s),
            "slope_broad_weak": fit.coef("x"),
            "slope_sink": fit.coef("x") + fit.coef("x:group"),
            "interaction": fit.coef("x:group"),
            "p_slope": float(floor_p(fit.p("x"))),
            "p_interaction": float(floor_p(fit.p("x:group"))),
            "n": fit.n,
        })
    out.sort(key=lambda r: (r["lambda_gen"], r["n_per_row"]))
    return ("lambda_gen", "n_per_row", "slope_broad_weak", "slope_sink",
            "interaction", "p_slope", "p_interaction", "n"), out


def _residual_auc_inputs(rows):
    usable = _usable([r for r in rows if not r["collapse"]],
                     "auc_true", "accuracy", "f_pairs", "mean_delta", "a_f_off")
    if not usable:
        raise UnknownAnalysis("no usable replicates for residual regressions")
    slices = np.array([f"{r['lambda_gen']!r}|{r['n_per_row']}" for r in usable])
    resid = residualize_within_slice(_column(usable, "auc_true"),
                                     _column(usable, "accuracy"), slices)
    sink = np.array([1.0 if r["structure"] == "sink" else 0.0 for r in usable])
    return usable, slices, resid, sink


def _slice_fit_rows(fits, terms):
    detail = []
    for lab, fit in zip(fits.slices, fits.fits):
        lam_s, n_s = lab.split("|")
        row = {"lambda_gen": float(lam_s), "n_per_row": int(n_s), "n": fit.n}
        for t in terms:
            row[f"coef_{t}"] = fit.coef(t)
            row[f"p_{t}"] = fit.p(t)
        detail.append(row)
    for t in terms:
        adj = fits.term_fdr(t)
        for row, v in zip(detail, adj):
            row[f"p_fdr_{t}"] = float(v)
    detail.sort(key=lambda r: (r["lambda_gen"], r["n_per_row"]))
    summary = [fits.summarize(t) for t in terms]
    return detail, summary


def components_tables(rows):
    """Breadth/strength decomposition of the residual efficiency signal."""
    usable, slices, resid, sink = _residual_auc_inputs(rows)
    fits = component_regression(resid, _column(usable, "f_pairs"),
                                _column(usable, "mean_delta"), sink, slices)
    terms = ("breadth", "strength", "breadth:strength", "structure")
    return _slice_fit_rows(fits, terms), terms


def magnitude_tables(rows):
    """Global asymmetry magnitude model for the same residual signal."""
    usable, slices, resid, sink = _residual_auc_inputs(rows)
    fits = magnitude_regression(resid, _column(usable, "a_f_off"), sink, slices)
    terms = ("magnitude", "structure")
    return _slice_fit_rows(fits, terms), terms


def anova_table(rows, metric="auc_true"):
    usable = _usable(rows, metric)
    if not usable:
        raise UnknownAnalysis(f"no rows with {metric} for the anova table")
    cells = np.array([f"{r['structure']}|{r['a']!r}|{r['lambda_gen']!r}|{r['n_per_row']}"
                      for r in usable])
    table = cell_demeaned_anova(
        _column(usable, metric),
        np.array([r["structure"] for r in usable]),
        _column(usable, "a"),
        _column(usable, "lambda_gen"),
        np.log10(_column(usable, "n_per_row")),
        cells,
    )
    out = []
    for i, term in enumerate(table.terms):
        out.append({"metric": metric, "term": term, "F": float(table.F[i]),
                    "p_raw": float(table.p_values[i]),
                    "p": float(floor_p(table.p_values[i])),
                    "df_num": int(table.df_num[i]), "df_den": table.df_den,
                    "model": table.label})
    return ("metric", "term", "F", "p_raw", "p", "df_num", "df_den", "model"), out


def series_table(rows, metric):
    """Tidy per-facet series: x = a, facets = lambda_gen, series = N x structure."""
    usable = _usable(rows, metric)
    out = []
    key = lambda r: (r["lambda_gen"], r["n_per_row"], r["structure"], r["a"])
    for k in sorted({key(r) for r in usable}):
        vals = np.array([r[metric] for r in usable if key(r) == k], dtype=np.float64)
        lam, n, structure, a = k
        out.append({"lambda_gen": lam, "n_per_row": n, "structure": structure,
                    "a": a, "n": len(vals), "mean": float(vals.mean()),
                    "se": float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else None})
    return ("lambda_gen", "n_per_row", "structure", "a", "n", "mean", "se"), out


def knee_table(rows):
    """Breadth-saturation knees per structure and operating condition."""
    usable = _usable(rows, "f_pairs")
    out = []
    combos = sorted({(r["structure"], r["lambda_gen"], r["n_per_row"]) for r in usable})
    for structure, lam, n in combos:
        sub = [r for r in usable if (r["structure"], r["lambda_gen"], r["n_per_row"])
               == (structure, lam, n)]
        a_vals = sorted({r["a"] for r in sub})
        ys = [float(np.mean([r["f_pairs"] for r in sub if r["a"] == a])) for a in a_vals]
        row = {"structure": structure, "lambda_gen": lam, "n_per_row": n,
               "n_points": len(a_vals), "a_knee": None}
        if len(a_vals) >= 5:
            try:
                row["a_knee"] = knee_point(a_vals, ys)
            except NoKnee:
                pass
        out.append(row)
    return ("structure", "lambda_gen", "n_per_row", "n_points", "a_knee"), out


def report(rows, out_dir: Path, analyses=REPORT_ANALYSES,
           group_metrics=GROUP_METRICS, series_metrics=SERIES_METRICS) -> list:
    """Write all requested report tables; returns the file names written."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, fields, table_rows):
        write_csv(out_dir / name, fields, table_rows)
        written.append(name)

    for analysis in analyses:
        if analysis not in REPORT_ANALYSES:
            raise UnknownAnalysis(f"unknown analysis {analysis!r}")
        if analysis == "recovery":
            emit("recovery_table.csv", *recovery_table(rows))
        elif analysis == "groups":
            emit("group_tests.csv", *group_tests_table(rows, group_metrics))
        elif analysis == "correlations":
            emit("correlations.csv", *correlations_table(rows))
        elif analysis == "mechanism":
            emit("mechanism_slopes.csv", *mechanism_table(rows))
        elif analysis == "components":
            (detail, summary), terms = components_tables(rows)
            dfields = ["lambda_gen", "n_per_row", "n"]
            for t in terms:
                dfields += [f"coef_{t}", f"p_{t}", f"p_fdr_{t}"]
            emit("component_regressions_slices.csv", tuple(dfields), detail)
            emit("component_regressions.csv",
                 ("term", "median", "min", "max", "n_slices", "n_significant"), summary)
        elif analysis == "magnitude":
            (detail, summary), terms = magnitude_tables(rows)
            dfields = ["lambda_gen", "n_per_row", "n"]
            for t in terms:
                dfields += [f"coef_{t}", f"p_{t}", f"p_fdr_{t}"]
            emit("magnitude_regressions_slices.csv", tuple(dfields), detail)
            emit("magnitude_regressions.csv",
                 ("term", "median", "min", "max", "n_slices", "n_significant"), summary)
        elif analysis == "anova":
            emit("anova.csv", *anova_table(rows))
        elif analysis == "series":
            for metric in series_metrics:
                emit(f"series_{metric}.csv", *series_table(rows, metric))
        elif analysis == "knees":
            emit("knee_points.csv", *knee_table(rows))
    return written


# ------------------------------------------------------------------ fit command

def fit_block(blocks, selector=None):
    """Pick the block to fit: the only one, or the one matching the selector
    'system_group/experiment/condition/model_instance'."""
    if selector:
        parts = selector.split("/")
        if len(parts) != 4:
            raise ConfigInvalid("block selector must be sysgroup/experiment/condition/instance")
        matches = [b for b in blocks if b.block and list(b.block.as_tuple()) == parts]
        if not matches:
            raise UnknownAnalysis(f"no block matches selector {selector!r}")
        return matches[0]
    if len(blocks) != 1:
        raise ConfigInvalid(f"input holds {len(blocks)} blocks; pass --block to pick one")
    return blocks[0]


# ------------------------------------------------------------------ entry point

def _add_common(sub):
    sub.add_argument("--config", type=Path, default=None, help="INI config file")
    sub.add_argument("--seed", type=int, default=None, help="seed root override")
    sub.add_argument("--out", type=Path, default=Path("."), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confrd",
        description="Confusion-matrix channels: asymmetry, rate-distortion "
                    "signatures, distortion inference, and the generator-"
                    "structure simulation.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("analyze", help="per-block empirical pipeline")
    p.add_argument("input", type=Path, help="long-form confusion CSV")
    _add_common(p)

    p = subs.add_parser("simulate", help="run the replicate grid")
    _add_common(p)
    p.add_argument("--from-manifest", type=Path, default=None,
                   help="rerun the exact configuration recorded in a manifest")
    p.add_argument("--jobs", type=int, default=None, help="worker processes")

    p = subs.add_parser("report", help="statistics tables from simulate results")
    p.add_argument("results", type=Path, help="results.csv from simulate")
    _add_common(p)

    p = subs.add_parser("fit", help="MAP distortion fit for a single block")
    p.add_argument("input", type=Path, help="long-form confusion CSV")
    p.add_argument("--block", type=str, default=None,
                   help="sysgroup/experiment/condition/instance")
    _add_common(p)
    return parser


def _vocabulary_from_config(cfg: dict):
    vocab = _get(cfg, "data", "vocabulary", None)
    if vocab is not None:
        return tuple(_as_list(vocab, str, "data.vocabulary"))
    k = _get(cfg, "data", "k", None)
    if k is not None:
        return tuple(f"c{i:02d}" for i in range(_as_num(k, int, "data.k")))
    return DEFAULT_VOCABULARY


def cmd_analyze(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    vocab = _vocabulary_from_config(cfg)
    blocks = ingest_confusions(args.input, vocab)
    records = analyze_blocks(
        blocks,
        epsilon=_as_num(_get(cfg, "analyze", "epsilon", EPS_EMPIRICAL), float, "analyze.epsilon"),
        prior=str(_get(cfg, "analyze", "prior", "empirical")),
        zero_row_policy=str(_get(cfg, "analyze", "zero_row_policy", "error")),
        run_fit=_as_bool(_get(cfg, "analyze", "run_fit", True), "analyze.run_fit"),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "blocks.csv", ANALYZE_FIELDS, records)
    manifest = _make_manifest("analyze", _config_snapshot(cfg), [args.input],
                              [args.seed] if args.seed is not None else [],
                              ["blocks.csv"])
    manifest.write(args.out / MANIFEST_NAME)
    return 0


def cmd_simulate(args) -> int:
    if args.from_manifest is not None:
        manifest = RunManifest.read(args.from_manifest)
        cfg = {}
        for flat_key, val in manifest.config.items():
            sec, key = flat_key.split(".", 1)
            cfg.setdefault(sec, {})[key] = val
        if args.seed is None and manifest.seed_roots:
            args.seed = int(manifest.seed_roots[0])
    else:
        cfg = load_config(args.config) if args.config else {}
    jobs = args.jobs
    if jobs is None:
        jobs = _as_num(_get(cfg, "simulate", "jobs", 1), int, "simulate.jobs")
    simulate(cfg, args.out, jobs=jobs, seed_override=args.seed)
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    rows = read_csv(args.results)
    if not rows:
        raise UnknownAnalysis("results table is empty")
    analyses = tuple(_as_list(_get(cfg, "report", "analyses", REPORT_ANALYSES),
                              str, "report.analyses"))
    metrics = tuple(_as_list(_get(cfg, "report", "group_metrics", GROUP_METRICS),
                             str, "report.group_metrics"))
    series = tuple(_as_list(_get(cfg, "report", "series_metrics", SERIES_METRICS),
                            str, "report.series_metrics"))
    written = report(rows, args.out, analyses, metrics, series)
    manifest = _make_manifest("report", _config_snapshot(cfg), [args.results],
                              [], written)
    manifest.write(args.out / MANIFEST_NAME)
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    vocab = _vocabulary_from_config(cfg)
    blocks = ingest_confusions(args.input, vocab)
    cc = fit_block(blocks, args.block)
    fitres = map_fit_distortion(cc)
    args.out.mkdir(parents=True, exist_ok=True)
    K = fitres.rho_hat.K
    rows = [{f"rho_{j}": fitres.rho_hat.rho[i, j] for j in range(K)} for i in range(K)]
    write_csv(args.out / "rho_hat.csv", tuple(f"rho_{j}" for j in range(K)), rows)
    bk = cc.block
    write_csv(args.out / "fit_summary.csv",
              ("system_group", "experiment", "condition", "model_instance",
               "log_posterior", "converged", "n_gradients", "n_evaluations"),
              [{"system_group": bk.system_group, "experiment": bk.experiment,
                "condition": bk.condition, "model_instance": bk.model_instance,
                "log_posterior": fitres.log_posterior, "converged": fitres.converged,
                "n_gradients": fitres.n_gradients, "n_evaluations": fitres.n_evaluations}])
    manifest = _make_manifest("fit", _config_snapshot(cfg), [args.input], [],
                              ["rho_hat.csv", "fit_summary.csv"])
    manifest.write(args.out / MANIFEST_NAME)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"analyze": cmd_analyze, "simulate": cmd_simulate,
                "report": cmd_report, "fit": cmd_fit}
    try:
        return handlers[args.command](args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (CollapsedInput, NonFinite, RankDeficient, ZeroVariance,
            DegenerateSample, ConfrdError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

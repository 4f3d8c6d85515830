"""Score-function registry: every detector is a combinator over ingested
per-sample terms plus fitted artifacts (latent density, compressor profile,
calibration scale).

All combinators are pure functions of their record and fixed artifacts, so
permuting dataset order leaves every metric unchanged.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dec as dec_mod
from . import metrics
from .density import GaussianDensity, MixtureDensity  # noqa: F401 (re-export)
from .errors import DependencyError
from .php import PhpConfig, php_score
from .records import (SPLIT_ID_TEST, load_tensor, validate_dataset)

SCORE_NAMES = ("likelihood", "php", "dec", "resultant", "ic", "waic", "llr", "lra")


def likelihood_score(rec):
    """Variational likelihood estimate: reconstruction term minus the KL
    to the standard-normal prior."""
    return rec.recon_loglik - rec.kl_prior


def ic_score(rec):
    """Likelihood plus the externally compressed size (input complexity)."""
    if rec.bits is None:
        raise DependencyError(f"record {rec.sample_id!r} has no bits field")
    return likelihood_score(rec) + rec.bits


def waic_score(rec):
    """Ensemble statistic: mean minus population variance of the members'
    log-likelihoods."""
    if rec.ens_logliks is None or len(rec.ens_logliks) < 2:
        raise DependencyError(
            f"record {rec.sample_id!r} needs >= 2 ensemble log-likelihoods"
        )
    ens = np.asarray(rec.ens_logliks, dtype=float)
    return float(np.mean(ens) - np.var(ens))


def llr_score(rec, k):
    """Log-likelihood ratio against the layer-k partial model,
    log p(x) - log p(x, k) with log p(x, k) = recon_k - kl_gt_k."""
    term = rec.layer_term(k)
    if term is None:
        raise DependencyError(
            f"record {rec.sample_id!r} has no layer_terms entry for k={k}"
        )
    return likelihood_score(rec) - (term.recon_k - term.kl_gt_k)


def lra_score(rec):
    """Likelihood ratio against a background model."""
    if rec.bg_loglik is None:
        raise DependencyError(f"record {rec.sample_id!r} has no bg_loglik field")
    return likelihood_score(rec) - rec.bg_loglik


def resultant_score(rec, model, c, scale, cfg):
    """Combined detector: the post-hoc-prior score plus the complexity
    calibration term C(x) * scale."""
    return php_score(rec, model, cfg) + c * scale.scale


@dataclass
class Artifacts:
    """Fitted inputs shared by the scoring pipeline."""

    density: object | None = None
    php: PhpConfig = field(default_factory=PhpConfig)
    profile: dec_mod.CompressorProfile | None = None
    scale: dec_mod.DecScale | None = None
    bits_id: float | None = None
    use_binary_search: bool = True


def parse_score_spec(name):
    """'llr:2' -> ('llr', 2); plain names -> (name, None)."""
    if name.startswith("llr:"):
        return "llr", int(name.split(":", 1)[1])
    if name not in SCORE_NAMES:
        raise ValueError(f"unknown score name {name!r}")
    if name == "llr":
        raise ValueError("llr needs a layer index, e.g. 'llr:1'")
    return name, None


def _check_artifacts(kinds, artifacts):
    if ("php" in kinds or "resultant" in kinds) and artifacts.density is None:
        raise DependencyError("php/resultant need a fitted latent density")
    if ("dec" in kinds or "resultant" in kinds):
        if artifacts.scale is None:
            raise DependencyError("dec/resultant need a calibration scale")
        if artifacts.profile is None and artifacts.bits_id is None:
            raise DependencyError(
                "dec/resultant need a compressor profile or a bits_id average"
            )


def complexity_for_record(rec, root, artifacts):
    """C(x) for one record, from its pixel tensor when a profile is
    calibrated, else from its external-compressor bits."""
    if artifacts.profile is not None and rec.tensor_path is not None:
        img = load_tensor(root / rec.tensor_path)
        return dec_mod.complexity(
            img, artifacts.profile,
            use_binary_search=artifacts.use_binary_search,
        )
    if artifacts.bits_id is not None and rec.bits is not None:
        return dec_mod.bits_complexity(rec.bits, artifacts.bits_id)
    raise DependencyError(
        f"record {rec.sample_id!r}: no usable complexity source "
        "(tensor_path+profile or bits+bits_id)"
    )


def score_columns(ds, specs, artifacts, threads=None):
    """One ScoreColumn per requested spec over id_test plus every OOD
    split, with the likelihood baseline always included.

    id_train is never scored; it enters only through the fitted artifacts.
    The per-record MC seed is shared between the php and resultant columns,
    so their difference is exactly the C(x)*scale term.
    """
    kinds = [parse_score_spec(s) for s in specs]
    _check_artifacts({k for k, _ in kinds}, artifacts)

    report = validate_dataset(ds, set(specs) | {"likelihood"})
    eval_records = [
        r for r in ds.records if r.split == SPLIT_ID_TEST or r.is_ood
    ]
    eval_ids = {r.sample_id for r in eval_records}
    for score, flagged in report.missing.items():
        flagged = [s for s in flagged if s in eval_ids]
        if flagged:
            raise DependencyError(
                f"score {score!r} not computable: " + report.format()
            )

    need_php = any(k in ("php", "resultant") for k, _ in kinds)
    need_c = any(k in ("dec", "resultant") for k, _ in kinds)

    def heavy_terms(rec):
        php_val = (
            php_score(rec, artifacts.density, artifacts.php) if need_php else None
        )
        c_val = (
            complexity_for_record(rec, ds.root, artifacts) if need_c else None
        )
        return rec.sample_id, php_val, c_val

    if threads and threads > 1 and (need_php or need_c):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            terms = list(pool.map(heavy_terms, eval_records))
    else:
        terms = [heavy_terms(r) for r in eval_records]
    php_vals = {sid: p for sid, p, _ in terms}
    c_vals = {sid: c for sid, _, c in terms}

    columns = {
        "likelihood": metrics.ScoreColumn(
            "likelihood",
            {r.sample_id: likelihood_score(r) for r in eval_records},
        )
    }
    for name, (kind, k) in zip(specs, kinds):
        if kind == "likelihood":
            continue
        values = {}
        for rec in eval_records:
            sid = rec.sample_id
            if kind == "php":
                values[sid] = php_vals[sid]
            elif kind == "dec":
                values[sid] = likelihood_score(rec) + c_vals[sid] * artifacts.scale.scale
            elif kind == "resultant":
                values[sid] = php_vals[sid] + c_vals[sid] * artifacts.scale.scale
            elif kind == "ic":
                values[sid] = ic_score(rec)
            elif kind == "waic":
                values[sid] = waic_score(rec)
            elif kind == "llr":
                values[sid] = llr_score(rec, k)
            elif kind == "lra":
                values[sid] = lra_score(rec)
        columns[name] = metrics.ScoreColumn(name, values)
    return columns


def evaluate_all(ds, specs, artifacts, threads=None):
    """Score the dataset and evaluate every requested spec against the
    likelihood baseline, per OOD split."""
    columns = score_columns(ds, specs, artifacts, threads=threads)
    baseline = columns["likelihood"]
    id_ids = [r.sample_id for r in ds.by_split(SPLIT_ID_TEST)]
    if not id_ids:
        raise DependencyError("no id_test records to evaluate on")
    ood_names = ds.ood_names()
    if not ood_names:
        raise DependencyError("no OOD records to evaluate on")

    rows = []
    for ood in ood_names:
        ood_ids = [
            r.sample_id for r in ds.records if r.is_ood and r.ood_name == ood
        ]
        base_gap = metrics.gap(baseline.subset(id_ids), baseline.subset(ood_ids))
        for name in specs:
            col = columns[name]
            id_vals = col.subset(id_ids)
            ood_vals = col.subset(ood_ids)
            g = metrics.gap(id_vals, ood_vals)
            rows.append(metrics.EvalRow(
                score=name,
                ood_split=ood,
                auroc=metrics.auroc(id_vals, ood_vals),
                auprc=metrics.auprc(id_vals, ood_vals),
                fpr80=metrics.fpr_at_tpr(id_vals, ood_vals, 0.8),
                gap=g,
                advantage=g - base_gap,
            ))
    return metrics.EvalReport(rows=tuple(rows))

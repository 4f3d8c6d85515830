"""Command-line pipeline: toy-data generation, the linear-VAE lab, toy
training, density fitting, compressor calibration, scoring, and evaluation.

Subcommands communicate only through files (manifests, params, profiles),
so any stage can be replaced by an external producer.  Seeds are mandatory
flags on stochastic subcommands; reruns with identical inputs and seeds
produce byte-identical outputs.

Exit codes: 0 success, 1 usage error, 2 data/validation error.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dec as dec_mod
from . import density, metrics, php, ppca, scores, toyvae
from .errors import DataError
from .records import (SPLIT_ID_TEST, SPLIT_ID_TRAIN, OOD_PREFIX,
                      parse_manifest, write_manifest)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_SPECS = {
    "paper-multimodal": ppca.bimodal_spec,
    "single-modal": ppca.unimodal_spec,
}


def _read_points(path):
    pts = np.loadtxt(path, dtype=float, ndmin=2)
    if pts.shape[1] != 2:
        raise DataError(f"{path}: expected two reals per line, got {pts.shape[1]}")
    return pts


def _add_common(p, seed_required=True):
    p.add_argument("--seed", type=int, required=seed_required,
                   help="RNG seed (required; no entropy from the environment)")


def build_parser():
    parser = _Parser(
        prog="oodkit",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-toy", formatter_class=fmt,
                       help="generate 2-D mixture data to a points file")
    p.add_argument("--spec", choices=sorted(_SPECS), required=True)
    p.add_argument("--n", type=int, required=True,
                   help="points per mixture component")
    _add_common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ppca", formatter_class=fmt,
                       help="closed-form linear-VAE grid evaluation")
    p.add_argument("--spec", choices=sorted(_SPECS), required=True)
    p.add_argument("--moments", choices=["population", "sample"],
                   default="population")
    p.add_argument("--n", type=int, default=5000,
                   help="points per component for sample moments")
    p.add_argument("--q", type=int, default=1, help="latent dimension")
    p.add_argument("--grid-n", type=int, default=41, help="grid points per axis")
    p.add_argument("--grid-range", type=float, default=6.0,
                   help="grid spans [-range, range] per axis")
    _add_common(p, seed_required=False)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-toy", formatter_class=fmt,
                       help="train the toy VAE and encode datasets to a manifest")
    p.add_argument("--data", required=True, help="id_train points file")
    p.add_argument("--id-test", default=None, help="id_test points file")
    p.add_argument("--ood", action="append", default=[], metavar="NAME=PATH",
                   help="OOD points file; repeatable")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--d-z", type=int, default=2)
    _add_common(p)
    p.add_argument("--out-params", required=True)
    p.add_argument("--out-manifest", required=True)

    p = sub.add_parser("fit-density", formatter_class=fmt,
                       help="fit the latent density to id_train posteriors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--family", choices=["full_gaussian", "gmm"],
                   default="full_gaussian")
    p.add_argument("--k", type=int, default=1, help="GMM components")
    _add_common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate-dec", formatter_class=fmt,
                       help="calibrate the compressor profile and scale")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, default=1e-4,
                   help="plateau tolerance on the mean error curve")
    p.add_argument("--n-id", type=int, default=None,
                   help="override the n_id operating point")
    p.add_argument("--max-images", type=int, default=512,
                   help="calibration subsample cap")
    p.add_argument("--density", default=None,
                   help="fitted density file (enables the scale)")
    p.add_argument("--n-mc", type=int, default=128)
    p.add_argument("--no-binsearch", action="store_true",
                   help="use the linear rank scan instead of binary search")
    _add_common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", formatter_class=fmt,
                       help="write a score manifest for the requested scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--score", required=True,
                   help="comma-separated names: likelihood,php,dec,resultant,"
                        "ic,waic,llr:<k>,lra")
    p.add_argument("--density", default=None)
    p.add_argument("--profile", default=None, help="calibrate-dec output file")
    p.add_argument("--n-mc", type=int, default=128)
    p.add_argument("--threads", type=int, default=os.cpu_count(),
                   help="scoring parallelism")
    p.add_argument("--no-binsearch", action="store_true")
    _add_common(p, seed_required=False)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a score manifest and print the report")
    p.add_argument("--scores", required=True, help="score manifest file")
    p.add_argument("--ood", default=None,
                   help="OOD split to evaluate (default: all)")
    p.add_argument("--baseline", default="likelihood",
                   help="column the advantage is measured against")
    p.add_argument("--out", default=None, help="also write the report as JSONL")

    p = sub.add_parser("report", formatter_class=fmt,
                       help="render a saved evaluation report as a table")
    p.add_argument("--in", dest="path", required=True)

    return parser


def _cmd_gen_toy(args):
    spec = _SPECS[args.spec]()
    pts = ppca.gen_mixture(spec, args.n, args.seed)
    np.savetxt(args.out, pts, fmt="%.17g")
    print(f"wrote {len(pts)} points to {args.out}")
    return 0


def _cmd_ppca(args):
    spec = _SPECS[args.spec]()
    if args.moments == "population":
        _, cov = ppca.population_moments(spec)
    else:
        if args.seed is None:
            raise UsageError("--seed is required for sample moments")
        data = ppca.gen_mixture(spec, args.n, args.seed)
        data = data - data.mean(axis=0)
        cov = data.T @ data / len(data)
    sol = ppca.ppca_fit(cov, args.q)
    std_prior = ppca.standard_normal_prior(args.q)
    agg_prior = ppca.aggregated_posterior(sol, spec)
    marginal = ppca.marginal_gaussian(sol)

    axis = np.linspace(-args.grid_range, args.grid_range, args.grid_n)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# x1 x2 elbo_std_prior elbo_agg_prior marginal_loglik\n")
        for x1 in axis:
            for x2 in axis:
                x = np.array([x1, x2])
                e_std = ppca.linear_elbo(sol, x, std_prior)
                e_agg = ppca.linear_elbo(sol, x, agg_prior)
                marg = float(marginal.log_density_batch(x[None, :])[0])
                fh.write(f"{x1:.17g} {x2:.17g} {e_std:.17g} {e_agg:.17g} "
                         f"{marg:.17g}\n")
    print(f"sigma2={sol.sigma2:.6g} E={sol.E.ravel().tolist()} "
          f"-> grid written to {args.out}")
    return 0


def _cmd_train_toy(args):
    data = _read_points(args.data)
    params = toyvae.init_params(args.seed, d_z=args.d_z)
    cfg = toyvae.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                             seed=args.seed, lr=args.lr)
    params, trace = toyvae.train(params, data, cfg)
    toyvae.save_params(params, args.out_params)

    all_points = [data]
    all_splits = [[SPLIT_ID_TRAIN] * len(data)]
    if args.id_test:
        pts = _read_points(args.id_test)
        all_points.append(pts)
        all_splits.append([SPLIT_ID_TEST] * len(pts))
    for entry in args.ood:
        if "=" not in entry:
            raise UsageError(f"--ood expects NAME=PATH, got {entry!r}")
        name, path = entry.split("=", 1)
        pts = _read_points(path)
        all_points.append(pts)
        all_splits.append([OOD_PREFIX + name] * len(pts))
    ds = toyvae.encode_dataset(
        params,
        np.concatenate(all_points, axis=0),
        [s for block in all_splits for s in block],
        args.seed,
    )
    write_manifest(ds, args.out_manifest)
    print(f"epoch ELBO {trace[0]:.4f} -> {trace[-1]:.4f}; "
          f"{len(ds)} records -> {args.out_manifest}")
    return 0


def _cmd_fit_density(args):
    ds = parse_manifest(args.manifest)
    model = php.fit_id_prior(ds, family=args.family, k=args.k, seed=args.seed)
    density.save_density(model, args.out)
    meta = model.fit_meta
    print(f"fitted {args.family} on {meta.n_points} draws "
          f"(loglik {meta.final_loglik:.4f}) -> {args.out}")
    return 0


def _cmd_calibrate_dec(args):
    ds = parse_manifest(args.manifest)
    train = ds.by_split(SPLIT_ID_TRAIN)
    if not train:
        raise DataError("manifest has no id_train records")

    profile = None
    with_tensors = [r for r in train if r.tensor_path is not None]
    if with_tensors:
        from .records import load_tensor
        images = [load_tensor(ds.root / r.tensor_path) for r in with_tensors]
        profile = dec_mod.calibrate_profile(
            images, tau=args.tau, max_images=args.max_images, seed=args.seed,
            n_id_override=args.n_id,
        )

    bits_values = [r.bits for r in train if r.bits is not None]
    bits_id = float(np.mean(bits_values)) if bits_values else None

    if profile is None and bits_id is None:
        raise DataError(
            "no id_train record carries a tensor_path or bits; nothing to calibrate"
        )

    scale = None
    if args.density:
        model = density.load_density(args.density)
        cfg = php.PhpConfig(n_mc=args.n_mc, seed=args.seed)
        art = scores.Artifacts(
            density=model, php=cfg, profile=profile, scale=None,
            bits_id=bits_id, use_binary_search=not args.no_binsearch,
        )
        php_vals = [php.php_score(r, model, cfg) for r in train]
        c_vals = [scores.complexity_for_record(r, ds.root, art) for r in train]
        scale = dec_mod.dec_scale(php_vals, c_vals)

    dec_mod.save_dec_artifacts(args.out, profile=profile, scale=scale,
                               bits_id=bits_id)
    parts = []
    if profile:
        parts.append(f"n_id_max={profile.n_id_max} n_id={profile.n_id} "
                     f"epsilon={profile.epsilon:.6g}")
    if bits_id is not None:
        parts.append(f"bits_id={bits_id:.6g}")
    if scale:
        parts.append(f"scale={scale.scale:.6g}")
    print("; ".join(parts) + f" -> {args.out}")
    return 0


def _cmd_score(args):
    spec_names = [s.strip() for s in args.score.split(",") if s.strip()]
    if not spec_names:
        raise UsageError("--score needs at least one name")
    for name in spec_names:
        scores.parse_score_spec(name)  # raises on unknown names
    stochastic = {"php", "resultant"} & set(spec_names)
    if stochastic and args.seed is None:
        raise UsageError(
            f"--seed is required for stochastic scores {sorted(stochastic)}"
        )

    ds = parse_manifest(args.manifest)
    model = density.load_density(args.density) if args.density else None
    profile = scale = bits_id = None
    if args.profile:
        profile, scale, bits_id = dec_mod.load_dec_artifacts(args.profile)
    artifacts = scores.Artifacts(
        density=model,
        php=php.PhpConfig(n_mc=args.n_mc, seed=args.seed or 0),
        profile=profile, scale=scale, bits_id=bits_id,
        use_binary_search=not args.no_binsearch,
    )
    columns = scores.score_columns(ds, spec_names, artifacts,
                                   threads=args.threads)
    ordered = ["likelihood"] + [n for n in spec_names if n != "likelihood"]
    sample_ids = sorted(columns["likelihood"].values)
    split_of = {r.sample_id: r.split for r in ds.records}
    with open(args.out, "w", encoding="utf-8") as fh:
        for sid in sample_ids:
            row = {"sample_id": sid, "split": split_of[sid]}
            for name in ordered:
                row[name] = columns[name].values[sid]
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {len(sample_ids)} rows x {len(ordered)} score column(s) "
          f"to {args.out}")
    return 0


def _read_score_manifest(path):
    columns = {}
    splits = {}
    order = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            obj = json.loads(raw)
            sid = obj.pop("sample_id")
            splits[sid] = obj.pop("split")
            for name, value in obj.items():
                if name not in columns:
                    columns[name] = {}
                    order.append(name)
                columns[name][sid] = float(value)
    return columns, splits, order


def _cmd_eval(args):
    columns, splits, order = _read_score_manifest(args.scores)
    if args.baseline not in columns:
        raise DataError(f"baseline column {args.baseline!r} not in score file")
    id_ids = sorted(s for s, sp in splits.items() if sp == SPLIT_ID_TEST)
    if not id_ids:
        raise DataError("score file has no id_test rows")
    ood_names = sorted({
        sp[len(OOD_PREFIX):] for sp in splits.values() if sp.startswith(OOD_PREFIX)
    })
    if args.ood is not None:
        want = args.ood[len(OOD_PREFIX):] if args.ood.startswith(OOD_PREFIX) \
            else args.ood
        if want not in ood_names:
            raise DataError(f"OOD split {want!r} not in score file "
                            f"(have {ood_names})")
        ood_names = [want]

    rows = []
    for ood in ood_names:
        ood_ids = sorted(
            s for s, sp in splits.items() if sp == OOD_PREFIX + ood
        )
        base = columns[args.baseline]
        base_gap = metrics.gap([base[s] for s in id_ids],
                               [base[s] for s in ood_ids])
        for name in order:
            col = columns[name]
            try:
                id_vals = [col[s] for s in id_ids]
                ood_vals = [col[s] for s in ood_ids]
            except KeyError as exc:
                raise DataError(
                    f"column {name!r} missing sample {exc.args[0]!r}"
                ) from exc
            g = metrics.gap(id_vals, ood_vals)
            rows.append(metrics.EvalRow(
                score=name, ood_split=ood,
                auroc=metrics.auroc(id_vals, ood_vals),
                auprc=metrics.auprc(id_vals, ood_vals),
                fpr80=metrics.fpr_at_tpr(id_vals, ood_vals, 0.8),
                gap=g, advantage=g - base_gap,
            ))
    report = metrics.EvalReport(rows=tuple(rows))
    print(report.to_table())
    if args.out:
        report.save(args.out)
    return 0


def _cmd_report(args):
    print(metrics.EvalReport.load(args.path).to_table())
    return 0


_COMMANDS = {
    "gen-toy": _cmd_gen_toy,
    "ppca": _cmd_ppca,
    "train-toy": _cmd_train_toy,
    "fit-density": _cmd_fit_density,
    "calibrate-dec": _cmd_calibrate_dec,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

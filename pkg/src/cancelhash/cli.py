"""Command-line driver: ``cancelhash <command> [options]``.

Every command accepts ``--config FILE``, ``--seed N`` and ``--out PATH``; each
config key is also a flag (``s_key`` -> ``--s-key``) and flags win over the file.
Exit status: 0 on success, 1 on a runtime error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import secrets
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import _rng
from .config import Config, coerce, load_config
from .dataset import DEFAULT_NOISE, Dataset, parse_dataset_spec, synth_dataset, write_dataset_dir
from .descriptor import load_similarity_matrix, read_minutiae_file, similarity_matrix
from .errors import CancelHashError, DimensionError, NotFoundError, ParseError, ValidationError
from .evaluation import (
    ScoreSet,
    baseline_scores,
    compute_eer,
    extract_features,
    fmt9,
    histogram,
    report_params,
    report_row,
    revocability_analysis,
    run_pipeline,
    score_edges,
    sweep,
    unlinkability_analysis,
    user_keys,
    write_histogram_csv,
    write_report_bundle,
    write_report_csv,
    write_scores_csv,
)
from .gallery import Gallery, dumps_gallery, gallery_path, loads_gallery
from .hashing import UserKey, check_compatible, dumps_key, dumps_template, enroll, loads_key, loads_template
from .kpca import (
    FeatureVector,
    TrainedProjection,
    build_kernel_matrix,
    dumps_projection,
    fit,
    loads_projection,
    project_query,
)
from .matching import decide, similarity
from .store import TemplateRecord, TemplateStore, utc_now, verify_against

log = logging.getLogger("cancelhash")

DEFAULT_GALLERY_USERS = 30


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (see '{self.prog} --help')")


def _csv_ints(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_config_flags(p: argparse.ArgumentParser, exclude=()) -> None:
    g = p.add_argument_group("configuration overrides")
    for f in fields(Config):
        if f.name in exclude or f.name == "seed":
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cancelhash", description="Cancelable fingerprint templates.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help, exclude=()):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="dataset / key derivation seed")
        p.add_argument("--out", help="output path")
        _add_config_flags(p, exclude)
        return p

    p = command("synth", "write a synthetic minutiae dataset to a directory")

    p = command("train-kpca", "train the KPCA projection (model + .gallery companion)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="synth:UxI or a directory of <user>_<imp>.txt files")
    src.add_argument("--similarity", help="precomputed similarity matrix CSV")

    p = command("keygen", "create a user key file")
    p.add_argument("--key-id", default=None)

    for name, help in (("enroll", "enroll a sample into a protected template"),
                       ("verify", "verify a sample against a protected template")):
        p = command(name, help)
        q = p.add_mutually_exclusive_group(required=True)
        q.add_argument("--minutiae", help="query minutiae file")
        q.add_argument("--sims", help="CSV: header of training labels, one row of similarities")
        p.add_argument("--key", required=True, help="CFHK key file")
        p.add_argument("--subject", help="subject id (default: minutiae file stem)")
        if name == "verify":
            p.add_argument("--template", help="CFHT template file (or use --store with --subject)")

    p = command("revoke", "revoke a subject's active template in the store")
    p.add_argument("--subject", required=True)

    for name, help in (("eval", "FVC-protocol accuracy of protected and baseline scores"),
                       ("revocability", "pseudo-impostor analysis under reissued keys"),
                       ("linkability", "mated / non-mated scores across two applications")):
        p = command(name, help)
        p.add_argument("--dataset", default=None, help="synth:UxI (default from config) or a directory")
        if name == "eval":
            p.add_argument("--key", help="shared key file (lost-key mode) or base key (per-user mode)")

    p = command("sweep", "EER over a grid of window sizes and security thresholds", exclude=("k", "s_key"))
    p.add_argument("--dataset", default=None)
    p.add_argument("--k", type=_csv_ints, required=True, help="comma-separated window sizes")
    p.add_argument("--skey", type=_csv_ints, required=True, help="comma-separated security thresholds")
    return parser


# --- helpers -------------------------------------------------------------------


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(coerce(overrides)) if overrides else cfg


def _seed(cfg: Config) -> int:
    return cfg.seed if cfg.seed is not None else 0


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out PATH")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg: Config) -> Dataset:
    spec = args.dataset or f"synth:{cfg.users}x{cfg.impressions}"
    return parse_dataset_spec(spec, cfg.noise(), _seed(cfg))


def _read(path, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CancelHashError(f"cannot read {what} {path}: {exc.strerror}") from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def _default_model(cfg: Config) -> tuple[TrainedProjection, Gallery]:
    """Projection trained on a fixed synthetic gallery, used when none is configured."""
    ds = synth_dataset(DEFAULT_GALLERY_USERS, 2, DEFAULT_NOISE, seed=0)
    return _train_on_gallery(Gallery(cfg.descriptor_params(), tuple(u.impressions[0] for u in ds.users)), cfg)


def _train_on_gallery(gallery: Gallery, cfg: Config) -> tuple[TrainedProjection, Gallery]:
    sim = similarity_matrix(gallery.descriptors(), list(gallery.labels))
    params = cfg.kernel_params()
    return fit(build_kernel_matrix(sim, params), params, gallery.labels), gallery


def _load_model(cfg: Config) -> tuple[TrainedProjection, Gallery | None]:
    if not cfg.projection:
        print("note: no projection configured; using the built-in synthetic gallery", file=sys.stderr)
        return _default_model(cfg)
    trained = loads_projection(_read(cfg.projection, "projection"))
    gpath = gallery_path(cfg.projection)
    gallery = loads_gallery(_read(gpath, "gallery")) if gpath.exists() else None
    if gallery is not None and gallery.labels != trained.training_labels:
        raise ValidationError(f"{gpath} does not match the training labels of {cfg.projection}")
    return trained, gallery


def _read_sims_row(path, trained: TrainedProjection) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) != 2:
        raise ParseError(f"{path}: expected a label header and exactly one row of similarities")
    labels = tuple(c.strip() for c in rows[0])
    if labels != trained.training_labels:
        raise DimensionError(f"{path}: labels do not match the projection's training labels")
    try:
        return np.array([float(v) for v in rows[1]])
    except ValueError as exc:
        raise ParseError(f"bad similarity value: {exc}", 2) from None


def _query_feature(args, cfg: Config) -> FeatureVector:
    trained, gallery = _load_model(cfg)
    if args.minutiae:
        if gallery is None:
            raise ValidationError("this projection has no .gallery companion; pass --sims instead of --minutiae")
        sims = gallery.similarities(read_minutiae_file(args.minutiae))
    else:
        sims = _read_sims_row(args.sims, trained)
    return project_query(sims, trained, subject_id=_subject(args))


def _subject(args) -> str:
    if args.subject:
        return args.subject
    return Path(args.minutiae or args.sims).stem


def _load_key(path) -> UserKey:
    return loads_key(_read(path, "key"))


def _emit(args, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        _write(Path(args.out), text)


# --- commands ------------------------------------------------------------------


def cmd_synth(args, cfg: Config) -> None:
    out = _require_out(args)
    ds = synth_dataset(cfg.users, cfg.impressions, cfg.noise(), _seed(cfg))
    files = write_dataset_dir(ds, out)
    print(f"wrote {len(files)} minutiae files for {ds.num_users} users to {out}")


def cmd_train_kpca(args, cfg: Config) -> None:
    out = _require_out(args)
    params = cfg.kernel_params()
    if args.similarity:
        sim = load_similarity_matrix(args.similarity)
        trained = fit(build_kernel_matrix(sim, params), params, sim.labels)
        gallery = None
    else:
        ds = parse_dataset_spec(args.dataset, cfg.noise(), _seed(cfg))
        gallery = Gallery(cfg.descriptor_params(), tuple(u.impressions[0] for u in ds.users))
        trained, _ = _train_on_gallery(gallery, cfg)
    _write(out, dumps_projection(trained))
    if gallery is not None:
        _write(gallery_path(out), dumps_gallery(gallery))
    note = f" (shrunk from {trained.requested_d})" if trained.shrunk else ""
    print(f"trained on {trained.n_train} samples, d={trained.d}{note}; wrote {out}")


def cmd_keygen(args, cfg: Config) -> None:
    out = _require_out(args)
    seed = cfg.seed if cfg.seed is not None else secrets.randbits(64)
    seed &= _rng.MASK64
    key_id = args.key_id or "key-" + hashlib.sha256(f"key-id:{seed}".encode()).hexdigest()[:12]
    key = cfg.key_template(seed, key_id)
    _write(out, dumps_key(key))
    print(f"wrote key {key_id} ({key.shape_string()}) to {out}")


def cmd_enroll(args, cfg: Config) -> None:
    if not args.out and not cfg.store:
        raise UsageError("enroll needs --out PATH and/or --store PATH")
    key = _load_key(args.key)
    code = enroll(_query_feature(args, cfg), key)
    if args.out:
        _write(Path(args.out), dumps_template(code))
    if cfg.store:
        record = TemplateRecord(code.subject_id, code, utc_now(), key.key_id, cfg.application_id)
        TemplateStore(cfg.store).save_template(record)
        print(f"stored record {record.record_id} for subject {code.subject_id}")
    print(f"enrolled {code.subject_id}: {','.join(map(str, code.code))}")


def cmd_verify(args, cfg: Config) -> None:
    key = _load_key(args.key)
    if args.template:
        reference = loads_template(_read(args.template, "template"))
        check_compatible(reference, key)
        query = enroll(_query_feature(args, cfg), key)
        score = similarity(reference, query)
    elif cfg.store:
        if not args.subject:
            raise UsageError("verify against a store needs --subject")
        history = TemplateStore(cfg.store).history(args.subject, cfg.application_id)
        if not history:
            raise NotFoundError(f"no template for subject {args.subject!r}")
        active = [r for r in history if r.active]
        # a revoked record is still looked up so the rejection says why
        record = active[0] if active else history[-1]
        check_compatible(record.code, key)
        score = verify_against(record, enroll(_query_feature(args, cfg), key))
    else:
        raise UsageError("verify needs --template FILE or --store PATH with --subject")
    verdict = "accept" if decide(score, cfg.threshold) else "reject"
    _emit(args, [f"score={fmt9(score.score)} matches={score.matches}/{score.n} "
                 f"threshold={fmt9(cfg.threshold)} decision={verdict}"])


def cmd_revoke(args, cfg: Config) -> None:
    if not cfg.store:
        raise UsageError("revoke needs --store PATH")
    rec = TemplateStore(cfg.store).revoke(args.subject, cfg.application_id)
    _emit(args, [f"revoked subject={rec.subject_id} record={rec.record_id} application={rec.application_id}"])


def _eval_keys(args, cfg: Config, num_users: int):
    if getattr(args, "key", None):
        base = _load_key(args.key)
    else:
        base = cfg.key_template(_rng.mix(_seed(cfg), "eval-key"), "eval")
    return base, (base if cfg.mode == "lost-key" else user_keys(base, num_users))


def _write_histograms(out: Path, scores: ScoreSet, n: int) -> list[Path]:
    edges = score_edges(n)
    written = []
    stem = out.with_suffix("")
    for name in ("genuine", "impostor", "pseudo_impostor", "mated", "non_mated"):
        values = getattr(scores, name)
        if values:
            path = stem.with_name(f"{stem.name}_hist_{name}.csv")
            write_histogram_csv(path, *histogram(values, edges))
            written.append(path)
    return written


def _scores_path(out: Path) -> Path:
    stem = out.with_suffix("")
    return stem.with_name(stem.name + "_scores.csv")


def cmd_eval(args, cfg: Config) -> None:
    out = _require_out(args)
    ds = _dataset(args, cfg)
    name = ds.name
    bank = extract_features(ds, cfg.pipeline())
    base, keys = _eval_keys(args, cfg, ds.num_users)
    scores = run_pipeline(ds, keys, cfg.pipeline(), bank)
    params = report_params(base, cfg.pipeline(), bank)
    report = compute_eer(scores, params, base.n)
    rows = [report_row(name, f"protected-{cfg.mode}", params, report)]
    baselines = baseline_scores(bank)
    rows.append(report_row(name, "unprotected", {}, compute_eer(baselines["unprotected"])))
    kparams = {"sigma2": params["sigma2"], "d": params["d"]}
    rows.append(report_row(name, "transformed", kparams, compute_eer(baselines["transformed"])))
    write_report_csv(out, rows)
    write_report_bundle(out, name, report)
    write_scores_csv(_scores_path(out), scores)
    print(f"{name} protected-{cfg.mode}: eer={fmt9(report.eer)} gmr={fmt9(report.gmr)} "
          f"genuine={len(scores.genuine)} impostor={len(scores.impostor)}")


def cmd_sweep(args, cfg: Config) -> None:
    out = _require_out(args)
    ds = _dataset(args, cfg)
    name = ds.name
    bank = extract_features(ds, cfg.pipeline())
    base = cfg.key_template(_rng.mix(_seed(cfg), "eval-key"), "eval")
    for s in args.skey:
        if s > base.l - 1:
            raise ValidationError(f"s_key={s} exceeds l - 1 = {base.l - 1}")
    rows = sweep(ds, args.k, args.skey, base, cfg.pipeline(), per_user=cfg.mode == "per-user", bank=bank)
    out_rows = []
    for row in rows:
        params = report_params(base, cfg.pipeline(), bank) | {"k": row.k, "s_key": row.s_key}
        status = "ok" if row.report is not None else row.warning
        out_rows.append(report_row(name, f"protected-{cfg.mode}", params, row.report, status))
    write_report_csv(out, out_rows)
    done = sum(r.report is not None for r in rows)
    print(f"wrote {len(rows)} sweep rows ({done} evaluated) to {out}")


def cmd_revocability(args, cfg: Config) -> None:
    out = _require_out(args)
    ds = _dataset(args, cfg)
    base = cfg.key_template(_rng.mix(_seed(cfg), "eval-key"), "eval")
    keys = user_keys(base, ds.num_users)
    res = revocability_analysis(ds, keys, cfg.reissues, cfg.pipeline())
    lines = ["metric,value"] + [f"{k},{fmt9(v)}" for k, v in res.summary.items()]
    lines += [f"warning,{w}" for w in res.warnings]
    _write(out, "\n".join(lines) + "\n")
    write_scores_csv(_scores_path(out), res.scores)
    _write_histograms(out, res.scores, base.n)
    for k, v in res.summary.items():
        print(f"{k}={fmt9(v)}")


def cmd_linkability(args, cfg: Config) -> None:
    out = _require_out(args)
    ds = _dataset(args, cfg)
    base = cfg.key_template(_rng.mix(_seed(cfg), "eval-key"), "eval")
    keys_a = user_keys(base, ds.num_users, seed=_rng.mix(_seed(cfg), "app-a"))
    keys_b = user_keys(base, ds.num_users, seed=_rng.mix(_seed(cfg), "app-b"))
    res = unlinkability_analysis(ds, keys_a, keys_b, cfg.pipeline())
    summary = {
        "overlap": res.overlap,
        "mean_gap": res.mean_gap,
        "mean_mated": float(np.mean(res.scores.mated)),
        "mean_non_mated": float(np.mean(res.scores.non_mated)),
        "num_mated": len(res.scores.mated),
        "num_non_mated": len(res.scores.non_mated),
    }
    lines = ["metric,value"] + [f"{k},{fmt9(v)}" for k, v in summary.items()]
    lines += [f"warning,{w}" for w in res.warnings]
    _write(out, "\n".join(lines) + "\n")
    write_scores_csv(_scores_path(out), res.scores)
    _write_histograms(out, res.scores, base.n)
    for k, v in summary.items():
        print(f"{k}={fmt9(v)}")


COMMANDS = {
    "synth": cmd_synth,
    "train-kpca": cmd_train_kpca,
    "keygen": cmd_keygen,
    "enroll": cmd_enroll,
    "verify": cmd_verify,
    "revoke": cmd_revoke,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "revocability": cmd_revocability,
    "linkability": cmd_linkability,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="warning: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"cancelhash: usage error: {exc}", file=sys.stderr)
        return 2
    except CancelHashError as exc:
        print(f"cancelhash: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cancelhash: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Module: sgdiff.cli

This module implements the command-line interface for sgdiff, providing subcommands
to set up a workspace, inspect lattices, train, sample, evaluate and run template-based
structure prediction:

1) `sgdiff init`
   - Bootstraps `.sgdiff/` (objects, manifests, cache, default config.json) in the
     working directory.

2) `sgdiff encode LATTICE`
   - Prints the k-vector, lattice parameters, the crystal families whose constraints the
     lattice satisfies, and the k -> lattice round-trip error.

3) `sgdiff train` / `sgdiff sample` / `sgdiff csp`
   - Train the score network on a crystal directory, draw samples for a fixed space group
     and Wyckoff assignment (network checkpoint or `--oracle TARGET`), refine a `--template`
     when run.mode is refine, or chain retrieve -> substitute -> refine -> match over a
     set of targets.
   - Runs are recorded in the `.sgdiff/` store when a workspace exists.

4) `sgdiff match` / `sgdiff validate` / `sgdiff export`
   - Structure matching, structural validity and property statistics, CIF (P1) export.

5) `sgdiff debug-table GROUP` (development only)
   - Dumps a parsed space-group table as JSON. Requires SGDIFF_DEV_MODE=1 to run.

Exit codes: 0 success, 1 domain error, 2 usage error.

Key Functions:
- `main()`
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from sgdiff.core.crystal import Crystal
from sgdiff.core.denoiser import load_checkpoint, save_checkpoint, state_to_document
from sgdiff.core.diffusion import OracleDenoiser, encode_crystal, ensure_score_weight
from sgdiff.core.documents import (
    crystal_to_document,
    read_crystal,
    read_dataset,
    read_lattice,
    write_cif,
    write_crystal,
    write_trajectory,
)
from sgdiff.core.elements import TypeVocabulary
from sgdiff.core.evaluation import (
    MatchRecord,
    MatchReport,
    match_rate,
    match_structures,
    mean_rmsd,
    minimum_distance,
    property_stats,
    structural_validity,
    summarize_matches,
    validity_fraction,
    write_report,
)
from sgdiff.core.initializer import RunConfig, init_workspace, load_run_config
from sgdiff.core.lattice import (
    FAMILIES,
    compatible_families,
    encode_lattice,
    k_satisfies_mask,
    lattice_from_k,
    mask_for_family,
    params_from_lattice,
)
from sgdiff.core.retriever import load_stored_checkpoint
from sgdiff.core.sampler import ChainTask, run_chain, sample_assignment
from sgdiff.core.scheduler import chain_seeds, run_chains
from sgdiff.core.spacegroup import SiteLayout, get_spacegroup, relax_to_p1
from sgdiff.core.storage import load_config, store_run, workspace_dirs
from sgdiff.core.templates import TemplateIndex, parse_formula, predict_structure
from sgdiff.core.trainer import train
from sgdiff.core.utils import DomainError, configure_logging

logger = logging.getLogger(__name__)


def _toy(name: str) -> Path:
    return Path(str(resources.files("sgdiff") / "data" / "toy" / name))


def _split(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [part.strip() for part in text.split(",") if part.strip()]


def _print_block(title: str, payload) -> None:
    print(title)
    print("-" * 40)
    print(json.dumps(payload, indent=4))
    print("-" * 40)


def _schedule(cfg: RunConfig, workspace: Optional[Path]):
    cache_dir = None
    if workspace is not None:
        cache_dir = workspace_dirs(load_config(workspace), workspace)["cache"]
    return ensure_score_weight(cfg.schedule, cfg.lambda_samples, cfg.lambda_seed, cache_dir)


def _load_network(args, workspace: Optional[Path]):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    if workspace is None:
        raise DomainError("--from-store needs a .sgdiff workspace; run `sgdiff init` first")
    return load_stored_checkpoint(workspace, args.from_store)


def cmd_encode(args) -> None:
    L = read_lattice(args.lattice)
    k = encode_lattice(L)
    decoded = lattice_from_k(k)
    error = float(np.linalg.norm(decoded.T @ decoded - L.T @ L))
    p = params_from_lattice(L)
    _print_block(
        "Lattice encoding:",
        {
            "k": k.tolist(),
            "params": {"a": p.a, "b": p.b, "c": p.c, "alpha": p.alpha, "beta": p.beta, "gamma": p.gamma},
            "compatible_families": compatible_families(L),
            "constraints": {family: k_satisfies_mask(k, mask_for_family(family)) for family in FAMILIES},
            "round_trip_error": error,
        },
    )


def _refine_template(args) -> Crystal:
    if not args.template:
        raise DomainError("run.mode refine needs --template, the crystal to noise and refine")
    template = read_crystal(args.template)
    if template.annotation is None:
        raise DomainError(f"{args.template}: the template needs Wyckoff sites")
    return template


def _sample_setup(args, cfg: RunConfig, workspace: Optional[Path], schedule):
    """Denoiser, vocabulary, per-chain ChainTask fields, and the oracle target if any."""
    ab_initio = cfg.mode == "ab-initio"
    rng = np.random.default_rng(cfg.seed)
    template = _refine_template(args) if cfg.mode == "refine" else None
    if template is not None:
        t_start = cfg.t_start if args.t_start is None else args.t_start
        if t_start > schedule.T:
            raise DomainError(f"--t-start must be <= T ({schedule.T}), got {t_start}")
        plan = {"template": template, "t_start": t_start}

    if args.oracle:
        target = read_crystal(args.oracle)
        if target.annotation is None:
            raise DomainError(f"{args.oracle}: the oracle target needs Wyckoff sites")
        species = target.annotation.basic_species
        if template is not None:
            species = species + template.annotation.basic_species
        vocabulary = TypeVocabulary.from_species(species)
        denoiser = OracleDenoiser(encode_crystal(target, vocabulary), schedule)
        if template is None:
            plan = {
                "layout": SiteLayout.from_crystal(target),
                "fixed_species": None if ab_initio else target.annotation.basic_species,
            }
        return denoiser, vocabulary, [plan] * args.num, target

    denoiser, vocabulary = _load_network(args, workspace)
    if template is not None:
        return denoiser, vocabulary, [plan] * args.num, None
    species = _split(args.species)
    if args.group is not None:
        letters = _split(args.wyckoff)
        if not letters:
            raise DomainError("--group needs --wyckoff letters, e.g. --wyckoff a,b")
        assignments = [(args.group, tuple(letters))] * args.num
    elif args.dataset:
        dataset = [c for _, c in read_dataset(args.dataset)]
        assignments = [sample_assignment(dataset, rng) for _ in range(args.num)]
    else:
        raise DomainError("give --group/--wyckoff or a --dataset to draw Wyckoff assignments from")
    if not ab_initio and species is None:
        raise DomainError("structure prediction (run.mode csp) needs --species, one element per Wyckoff site")
    plans = []
    for group, letters in assignments:
        plans.append(
            {
                "layout": SiteLayout.from_letters(group, letters),
                "fixed_species": None if ab_initio else tuple(species),
            }
        )
    return denoiser, vocabulary, plans, None


def cmd_sample(args, cfg: RunConfig, workspace: Optional[Path]) -> None:
    schedule = _schedule(cfg, workspace)
    denoiser, vocabulary, plans, target = _sample_setup(args, cfg, workspace, schedule)
    record_every = cfg.record_every if args.record_every is None else args.record_every
    tasks = [
        ChainTask(
            denoiser=denoiser,
            schedule=schedule,
            seed=seed,
            vocabulary=vocabulary,
            record_every=record_every,
            **plan,
        )
        for seed, plan in zip(chain_seeds(cfg.seed, len(plans)), plans)
    ]
    results = run_chains(run_chain, tasks, jobs=args.jobs or cfg.jobs, progress=cfg.progress and not args.quiet)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    documents = []
    for i, result in enumerate(results):
        write_crystal(result.crystal, out / f"sample_{i:03d}.json", name=f"sample_{i:03d}")
        documents.append(crystal_to_document(result.crystal, name=f"sample_{i:03d}"))
        if record_every > 0:
            write_trajectory(result.trajectory, out / f"trajectory_{i:03d}.json")

    crystals = [r.crystal for r in results]
    summary = {
        "samples": len(crystals),
        "seed": cfg.seed,
        "mode": cfg.mode,
        "validity_fraction": validity_fraction(crystals),
    }
    if cfg.mode == "refine":
        summary["template"] = str(args.template)
    if target is not None:
        reports = [match_structures(c, target, cfg.match) for c in crystals]
        summary["match_rate"] = match_rate(reports)
        summary["mean_rmsd"] = mean_rmsd(reports)
    with (out / "summary.json").open("w", encoding="utf-8") as f:
        json.dump(summary, f, indent=4)
        f.write("\n")
    if workspace is not None:
        summary["run_id"] = store_run(
            {"samples": documents, "summary": dict(summary), "config": cfg.raw}, workspace, "sample"
        )
    _print_block(f"Wrote {len(crystals)} samples to {out}:", summary)


def cmd_train(args, cfg: RunConfig, workspace: Optional[Path]) -> None:
    dataset = [c for _, c in read_dataset(args.dataset or _toy("train"))]
    schedule = _schedule(cfg, workspace)
    settings = cfg.train
    if args.epochs is not None:
        settings = replace(settings, epochs=args.epochs)
    vocabulary = TypeVocabulary.from_crystals(dataset)
    result = train(
        dataset,
        schedule,
        settings,
        config=cfg.denoiser_config(vocabulary.size),
        vocabulary=vocabulary,
        progress=cfg.progress and not args.quiet,
    )
    path = save_checkpoint(args.out, result.network, result.vocabulary)
    summary = {
        "checkpoint": str(path),
        "structures": len(dataset),
        "steps": len(result.trace),
        "first_loss": result.trace[0]["total"],
        "last_loss": result.trace[-1]["total"],
    }
    if workspace is not None:
        summary["run_id"] = store_run(
            {
                "checkpoint": state_to_document(result.network, result.vocabulary),
                "loss_trace": result.trace,
                "config": cfg.raw,
            },
            workspace,
            "train",
        )
    _print_block("Training finished:", summary)


def _pairs(pred: Path, ref: Path) -> List[tuple]:
    if pred.is_dir() and ref.is_dir():
        refs = {p.name: p for p in ref.glob("*.json")}
        return [(p.stem, p, refs[p.name]) for p in sorted(pred.glob("*.json")) if p.name in refs]
    return [(pred.stem, pred, ref)]


def cmd_match(args, cfg: RunConfig) -> None:
    rows = [
        MatchRecord(name, match_structures(read_crystal(p), read_crystal(r), cfg.match))
        for name, p, r in _pairs(Path(args.pred), Path(args.ref))
    ]
    if not rows:
        raise DomainError(f"no files with matching names in {args.pred} and {args.ref}")
    if args.report:
        write_report(rows, args.report)
    if len(rows) == 1:
        _print_block("Match:", {"matched": rows[0].report.matched, "rmsd": rows[0].report.rmsd})
    else:
        print(summarize_matches(rows))


def cmd_validate(args) -> None:
    paths: List[Path] = []
    for item in args.paths:
        item = Path(item)
        paths.extend(sorted(item.glob("*.json")) if item.is_dir() else [item])
    crystals = [read_crystal(p) for p in paths]
    if not crystals:
        raise DomainError("no crystal files to validate")
    print("Structural validity:")
    for path, crystal in zip(paths, crystals):
        verdict = "valid" if structural_validity(crystal) else "invalid"
        print("-" * 40)
        print(f"{path}\tmin_distance={minimum_distance(crystal):.4f}\t{verdict}")
    print("-" * 40)
    payload = {"files": len(crystals), "validity_fraction": validity_fraction(crystals)}
    if args.reference:
        reference = [c for _, c in read_dataset(args.reference)]
        d_rho, d_elem = property_stats(crystals, reference)
        payload["w1_density"] = d_rho
        payload["w1_element_count"] = d_elem
    print(json.dumps(payload, indent=4))


def cmd_csp(args, cfg: RunConfig, workspace: Optional[Path]) -> None:
    schedule = _schedule(cfg, workspace)
    index = TemplateIndex.from_directory(args.templates or _toy("templates"))
    targets = read_dataset(args.targets or _toy("targets"))
    t_start = cfg.t_start if args.t_start is None else args.t_start
    if t_start > schedule.T:
        raise DomainError(f"--t-start must be <= T ({schedule.T}), got {t_start}")
    network = vocabulary = None
    if not args.oracle:
        network, vocabulary = _load_network(args, workspace)

    rows: List[MatchRecord] = []
    chosen = {}
    for (name, target), seed in zip(targets, chain_seeds(cfg.seed, len(targets))):
        composition = parse_formula(args.formula) if args.formula else target.composition()

        def refine_fn(template: Crystal, seed=seed) -> Crystal:
            denoiser = network if network is not None else OracleDenoiser(encode_crystal(template), schedule)
            task = ChainTask(denoiser, schedule, seed, template=template, t_start=t_start, vocabulary=vocabulary)
            return run_chain(task).crystal

        try:
            prediction = predict_structure(composition, index, refine_fn, exclude=(name,) if args.leave_one_out else ())
            if prediction is None and network is not None:
                relaxed = relax_to_p1(target)
                task = ChainTask(
                    network, schedule, seed, layout=SiteLayout.from_crystal(relaxed),
                    fixed_species=relaxed.annotation.basic_species, vocabulary=vocabulary,
                )
                crystal, chosen[name] = run_chain(task).crystal, "(unconstrained)"
            elif prediction is None:
                crystal, chosen[name] = None, "(none)"
            else:
                crystal, chosen[name] = prediction.crystal, prediction.template
        except DomainError as exc:
            logger.warning("Target %s failed: %s", name, exc)
            crystal, chosen[name] = None, "(error)"
        report = match_structures(crystal, target, cfg.match) if crystal is not None else MatchReport(False, None)
        rows.append(MatchRecord(name, report))

    report_path = write_report(rows, Path(args.report))
    print("Template-based prediction:")
    for row in rows:
        print("-" * 40)
        rmsd = "" if row.report.rmsd is None else f"{row.report.rmsd:.6f}"
        print(f"{row.name}\ttemplate={chosen[row.name]}\tmatched={int(row.report.matched)}\trmsd={rmsd}")
    print("-" * 40)
    print(summarize_matches(rows))
    print(f"Report: {report_path}")
    if workspace is not None:
        store_run(
            {
                "report": [{"name": r.name, "matched": r.report.matched, "rmsd": r.report.rmsd} for r in rows],
                "templates": chosen,
                "config": cfg.raw,
            },
            workspace,
            "csp",
        )


def cmd_debug_table(args) -> None:
    entry = get_spacegroup(args.group)
    payload = {
        "number": entry.number,
        "symbol": entry.symbol,
        "family": entry.family,
        "order": entry.order,
        "operations": [
            {"R": R.astype(int).tolist(), "t": t.tolist()} for R, t in zip(entry.rotations, entry.translations)
        ],
        "wyckoff": [
            {"label": w.label, "dof": int(w.dof), "free_axes": [int(a) for a in w.free_axes]} for w in entry.wyckoff_positions
        ],
    }
    _print_block(f"Space group {entry.number}:", payload)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="sgdiff: Space-Group-Constrained Crystal Generation by Diffusion."
    )
    parser.add_argument("--config", help="Config file (default: nearest .sgdiff/config.json)", default=None)
    parser.add_argument("--seed", type=int, help="Override run.seed", default=None)
    parser.add_argument("--jobs", type=int, help="Parallel sampling chains", default=None)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Regular commands
    subparsers.add_parser("init", help="Initialize a .sgdiff workspace in the current directory")

    encode = subparsers.add_parser("encode", help="Report the k-vector and families of a lattice")
    encode.add_argument("lattice", help="Crystal document, lattice JSON or 3x3 text file")

    sample = subparsers.add_parser("sample", help="Generate crystals for a space group and Wyckoff assignment")
    source = sample.add_mutually_exclusive_group()
    source.add_argument("--oracle", metavar="TARGET", help="Use the analytic denoiser toward a target crystal")
    source.add_argument("--checkpoint", help="Checkpoint file written by `sgdiff train`")
    source.add_argument("--from-store", nargs="?", const="latest_train", default=None, metavar="RUN",
                        help="Checkpoint from the workspace store (default: latest training run)")
    sample.add_argument("--group", type=int, default=None, help="Space group number")
    sample.add_argument("--wyckoff", default=None, help="Comma-separated Wyckoff letters, one per basic site")
    sample.add_argument("--species", default=None, help="Comma-separated elements, one per basic site")
    sample.add_argument("--dataset", default=None, help="Draw Wyckoff assignments from this crystal directory")
    sample.add_argument("-n", "--num", type=int, default=1, help="Number of samples")
    sample.add_argument("-o", "--out", default="samples", help="Output directory")
    sample.add_argument("--record-every", type=int, default=None, help="Write every n-th state as a trajectory")
    sample.add_argument("--template", default=None, help="Crystal to noise and refine (run.mode refine)")
    sample.add_argument("--t-start", type=int, default=None, help="Override sampling.t_start (run.mode refine)")

    train_p = subparsers.add_parser("train", help="Train the score network on a crystal directory")
    train_p.add_argument("--dataset", default=None, help="Directory of crystal documents (default: toy set)")
    train_p.add_argument("--epochs", type=int, default=None, help="Override train.epochs")
    train_p.add_argument("-o", "--out", default="checkpoint.json.gz", help="Checkpoint path")

    match = subparsers.add_parser("match", help="Compare two crystals (or two directories by file name)")
    match.add_argument("pred")
    match.add_argument("ref")
    match.add_argument("--report", default=None, help="Write a tab-separated report")

    validate = subparsers.add_parser("validate", help="Structural validity and property statistics")
    validate.add_argument("paths", nargs="+", help="Crystal files or directories")
    validate.add_argument("--reference", default=None, help="Reference directory for W1 statistics")

    csp = subparsers.add_parser("csp", help="Template retrieval, substitution and refinement over targets")
    csp_source = csp.add_mutually_exclusive_group()
    csp_source.add_argument("--oracle", action="store_true", help="Refine with the analytic denoiser toward each template")
    csp_source.add_argument("--checkpoint", help="Checkpoint file written by `sgdiff train`")
    csp_source.add_argument("--from-store", nargs="?", const="latest_train", default=None, metavar="RUN")
    csp.add_argument("--targets", default=None, help="Directory of target crystals (default: toy targets)")
    csp.add_argument("--templates", default=None, help="Directory of template crystals (default: toy templates)")
    csp.add_argument("--formula", default=None, help="Query formula instead of each target's composition")
    csp.add_argument("--t-start", type=int, default=None, help="Override sampling.t_start")
    csp.add_argument("--leave-one-out", action="store_true", help="Skip templates named like the target")
    csp.add_argument("--report", default="csp_report.tsv", help="Report path")

    export = subparsers.add_parser("export", help="Write a crystal document as a P1 CIF")
    export.add_argument("document")
    export.add_argument("-o", "--out", default=None, help="CIF path (default: document name with .cif)")

    # Debug/Development commands
    debug_table = subparsers.add_parser("debug-table", help=argparse.SUPPRESS)
    debug_table.add_argument("group", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    if args.command in ("sample", "csp") and not (args.oracle or args.checkpoint or args.from_store):
        parser.error(f"{args.command} needs --checkpoint, --from-store or --oracle")
    if args.jobs is not None and args.jobs < 1:
        parser.error("--jobs must be >= 1")

    try:
        if args.command == "init":
            workspace = init_workspace(Path.cwd())
            print(f"Created {workspace}/ with 'objects', 'manifests', 'cache' and default config.json.")
            return
        if args.command == "debug-table":
            # Development-only command
            if not os.environ.get("SGDIFF_DEV_MODE"):
                print("Error: This command is for development purposes only.", file=sys.stderr)
                print("Set SGDIFF_DEV_MODE=1 to enable debug commands.", file=sys.stderr)
                sys.exit(1)
            cmd_debug_table(args)
            return
        if args.command == "encode":
            cmd_encode(args)
            return
        if args.command == "validate":
            cmd_validate(args)
            return
        if args.command == "export":
            out = Path(args.out) if args.out else Path(args.document).with_suffix(".cif")
            write_cif(read_crystal(args.document), out)
            print(f"Wrote {out}")
            return

        cfg, workspace = load_run_config(args.config)
        if args.seed is not None:
            cfg = RunConfig.from_dict({**cfg.raw, "run": {**cfg.raw["run"], "seed": args.seed}})
        if args.command == "sample":
            cmd_sample(args, cfg, workspace)
        elif args.command == "train":
            cmd_train(args, cfg, workspace)
        elif args.command == "match":
            cmd_match(args, cfg)
        elif args.command == "csp":
            cmd_csp(args, cfg, workspace)
        else:
            parser.print_help()
    except DomainError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        sys.exit(1)
    except FileNotFoundError as exc:
        print(f"Error: file not found: {exc.filename}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()

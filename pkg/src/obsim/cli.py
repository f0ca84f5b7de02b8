"""Command-line entry point for reproducible discovery and prediction runs.

One JSON config document drives every subcommand; flags override config keys,
and the effective merged config is always written back into the output
directory, so re-running `obsim <command> --config <out>/config.json` rebuilds
the artifacts bit-identically.  All randomness flows from the single `seed`
key.  Failures print a machine-readable JSON object to stderr and exit
nonzero; exit status 0 means every requested artifact was written and
re-validated.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as od
from . import downstream as dn
from . import graphsuite as gs
from . import trainer as tr
from . import vgae

COMMANDS = ("synth", "discover", "eval-graph", "baseline", "predict", "ablate")

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _obj(properties: dict, required: list[str] | None = None) -> dict:
    schema = {"type": "object", "properties": properties, "additionalProperties": False}
    if required:
        schema["required"] = required
    return schema


CONFIG_SCHEMA = _obj(
    {
        "seed": _INT,
        "out": _STR,
        "data": _obj(
            {
                "kind": {"enum": ["synthetic", "csv"]},
                "synthetic": _obj(
                    {
                        "n_nodes": _INT,
                        "edge_prob": _NUM,
                        "nonlinear": _BOOL,
                        "noise_scale": _NUM,
                        "n_shifted": _INT,
                        "shift_sigma": _NUM,
                        "n_sim_only": _INT,
                        "n_obs": _INT,
                        "n_sim": _INT,
                        "missing_rate": _NUM,
                        "seed": _INT,
                    }
                ),
                "obs_csv": _STR,
                "sim_csv": _STR,
                "target": _STR,
                "overlap_pairs": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": _STR,
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
                "max_missing_fraction": _NUM,
                "imputer_hidden": _INT,
                "imputer_epochs": _INT,
                "truth": _STR,
            }
        ),
        "train": _obj(
            {
                "epochs": _INT,
                "batch_size": _INT,
                "seed": _INT,
                "lr": _NUM,
                "temp_start": _NUM,
                "temp_end": _NUM,
                "mask_enabled": _BOOL,
                "dm_enabled": _BOOL,
                "sp_enabled": _BOOL,
                "loss": _obj(
                    {
                        "lambda_dm": _NUM,
                        "lambda_sp": _NUM,
                        "lambda_a": _NUM,
                        "alpha": _NUM,
                        "power_m": {"type": ["integer", "null"]},
                        "sigma_rec": _NUM,
                        "dm_empty_overlap_error": _BOOL,
                    }
                ),
                "model": _obj(
                    {
                        "latent_k": _INT,
                        "enc_hidden": _INT,
                        "msg_dim": _INT,
                        "dec_hidden": _INT,
                        "rounds": _INT,
                        "activation": _STR,
                        "sigma_floor": _NUM,
                    }
                ),
            }
        ),
        "eval": _obj(
            {
                "threshold": _NUM,
                "force_dag": _BOOL,
                "corr_threshold": _NUM,
                "preds": {"type": "array", "items": _STR},
            }
        ),
        "baseline": _obj(
            {
                "method": {"enum": ["correlation", "notears", "bootstrap"]},
                "bootstrap_b": _INT,
                "bootstrap_of": {"enum": ["correlation", "notears"]},
                "lambda1": _NUM,
                "max_iter": _INT,
            }
        ),
        "predict": _obj(
            {
                "kinds": {"type": "array", "items": {"enum": list(dn.KINDS)}},
                "layers": _INT,
                "hidden": _INT,
                "aggregator": {"enum": list(dn.AGGREGATORS)},
                "undirected": _BOOL,
                "lr": _NUM,
                "epochs": _INT,
                "patience": _INT,
                "grid": _BOOL,
                "few_shot_fraction": _NUM,
                "skeleton_from": _STR,
                "n_per_site": _INT,
            }
        ),
    }
)

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"kind": "synthetic", "synthetic": {}},
    "train": {"loss": {}, "model": {}},
    "eval": {"threshold": 0.5, "force_dag": False, "corr_threshold": 0.5, "preds": []},
    "baseline": {
        "method": "correlation",
        "bootstrap_b": 20,
        "bootstrap_of": "correlation",
        "lambda1": 0.1,
        "max_iter": 100,
    },
    "predict": {
        "kinds": ["ecmpnn", "mlp", "random_guess"],
        "layers": 2,
        "hidden": 16,
        "aggregator": "mean",
        "undirected": False,
        "lr": 1e-2,
        "epochs": 300,
        "patience": 30,
        "grid": False,
        "few_shot_fraction": 0.0,
        "n_per_site": 400,
    },
}


class CliError(ValueError):
    """Configuration or input problem the caller must fix."""


# ---------------------------------------------------------------------------
# config plumbing


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    """Merge defaults <- config file <- CLI flag overrides, then validate."""
    user: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}") from None
    merged = _deep_merge(DEFAULT_CONFIG, user)
    merged = _deep_merge(merged, overrides)

    import jsonschema

    try:
        jsonschema.validate(merged, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"config key {where}: {exc.message}") from None

    # Single-seed rule: nested seeds follow the global seed unless the file
    # (or a flag) pinned them explicitly.
    seed = merged["seed"]
    explicit_train = "seed" in user.get("train", {}) or "seed" in overrides.get("train", {})
    if not explicit_train:
        merged["train"]["seed"] = seed
    explicit_synth = "seed" in user.get("data", {}).get("synthetic", {})
    if not explicit_synth:
        merged["data"]["synthetic"]["seed"] = seed
    return merged


def _out_dir(config: dict, command: str) -> Path:
    if "out" in config:
        out = Path(config["out"])
    else:
        root = os.environ.get("OBSIM_OUT_ROOT", "runs")
        out = Path(root) / command
        config["out"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path: Path, payload) -> None:
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_config(out: Path, config: dict) -> None:
    _dump_json(out / "config.json", config)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out: Path, command: str, config: dict, artifacts: list[str]) -> None:
    missing = [name for name in artifacts if not (out / name).exists()]
    if missing:
        raise RuntimeError(f"artifacts missing after run: {missing}")
    manifest = {
        "command": command,
        "package_version": __version__,
        "config_hash": vgae.canonical_hash(config),
        "rerun": f"obsim {command} --config {out / 'config.json'}",
        "artifacts": {name: _sha256(out / name) for name in sorted(artifacts)},
    }
    _dump_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# dataset construction


def _build_dataset(config: dict) -> tuple[od.DualDataset, od.GroundTruthGraph | None]:
    section = config["data"]
    if section["kind"] == "synthetic":
        spec = od.SyntheticSpec(**section["synthetic"])
        return od.generate_synthetic_pair(spec)
    for key in ("obs_csv", "sim_csv", "target"):
        if key not in section:
            raise CliError(f"data.kind=csv requires data.{key}")
    for key in ("obs_csv", "sim_csv"):
        if not Path(section[key]).exists():
            raise CliError(f"data.{key} not found: {section[key]}")
    raw_obs = od.RawTable.from_csv(section["obs_csv"], od.OBSERVED)
    raw_sim = od.RawTable.from_csv(section["sim_csv"], od.SIMULATED)
    pairs = section.get("overlap_pairs")
    ingest_cfg = od.IngestConfig(
        target=section["target"],
        overlap_pairs=[tuple(p) for p in pairs] if pairs else None,
        max_missing_fraction=section.get("max_missing_fraction", 0.5),
        imputer_hidden=section.get("imputer_hidden", 32),
        imputer_epochs=section.get("imputer_epochs", 200),
        seed=config["seed"],
    )
    ds = od.ingest(raw_obs, raw_sim, ingest_cfg)
    truth = None
    if "truth" in section:
        truth = od.GroundTruthGraph.load(section["truth"])
    return ds, truth


def _require_truth(config: dict, truth: od.GroundTruthGraph | None) -> od.GroundTruthGraph:
    if truth is None:
        raise CliError("this command needs ground truth: synthetic data or data.truth")
    return truth


def _raw_csv_rows(path: Path, names: list[str], values: np.ndarray, present: np.ndarray) -> None:
    start = dt.date(2020, 1, 1)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date"] + names)
        for i, row in enumerate(values):
            cells = [(start + dt.timedelta(days=i)).isoformat()]
            for j, value in enumerate(row):
                cells.append(f"{value:.17g}" if present[i, j] else "")
            writer.writerow(cells)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(config: dict, out: Path) -> list[str]:
    ds, truth = _build_dataset(config)
    if config["data"]["kind"] != "synthetic":
        raise CliError("synth requires data.kind == 'synthetic'")
    obs_values = ds.unscale(ds.x_obs, od.OBSERVED)
    sim_values = ds.unscale(ds.x_sim, od.SIMULATED)
    _raw_csv_rows(out / "obs.csv", ds.obs_names, obs_values, ds.mask_obs > 0.5)
    _raw_csv_rows(out / "sim.csv", ds.sim_names, sim_values, np.ones(ds.x_sim.shape, bool))
    truth.save(out / "truth.json")
    _dump_json(
        out / "dataset.json",
        {
            "spec": config["data"]["synthetic"],
            "target": ds.target_name,
            "overlap": [[int(i), int(j)] for i, j in ds.overlap],
            "aligned_rows": ds.aligned_rows,
            "bias": [entry.__dict__ for entry in od.bias_report(ds)],
        },
    )
    return ["obs.csv", "sim.csv", "truth.json", "dataset.json"]


def _loss_log_csv(path: Path, loss_log: list[dict]) -> None:
    keys = sorted({k for entry in loss_log for k in entry} - {"epoch", "temperature"})
    header = ["epoch", "temperature"] + keys
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for entry in loss_log:
            writer.writerow(
                [entry["epoch"]] + [f"{entry[k]:.17g}" for k in header[1:]]
            )


def _cmd_discover(config: dict, out: Path) -> list[str]:
    ds, truth = _build_dataset(config)
    train_cfg = tr.TrainConfig.from_dict(config["train"])
    run = tr.train(ds, train_cfg)
    info = {"config_hash": run.manifest["config_hash"], "seed": train_cfg.seed}
    matrix = gs.EdgeProbMatrix(run.node_names, run.probabilities, "kgrcl", info)
    matrix.to_csv(out / "graph.csv")
    _loss_log_csv(out / "loss_log.csv", run.loss_log)
    _dump_json(out / "checkpoint.json", run.checkpoint)
    run_info = dict(run.manifest)
    if run.dm_diagnostics is not None:
        run_info["dm_diagnostics"] = run.dm_diagnostics
    _dump_json(out / "run.json", run_info)
    artifacts = ["graph.csv", "loss_log.csv", "checkpoint.json", "run.json"]
    if truth is not None:
        report = gs.classification_metrics(matrix, truth, config["eval"]["threshold"])
        _dump_json(out / "report.json", report.to_dict())
        artifacts.append("report.json")
    return artifacts


def _l1_chart(path: Path, labels: list[str], l1_values: list[float]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "obsim"
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 3.2))
    ax.bar(range(len(labels)), l1_values, color="#4878d0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("L1 edge error")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _cmd_eval_graph(config: dict, out: Path) -> list[str]:
    preds = config["eval"]["preds"]
    if not preds:
        raise CliError("eval-graph needs at least one --pred edge-probability CSV")
    truth_path = config["data"].get("truth")
    if truth_path is None:
        raise CliError("eval-graph needs data.truth (a ground-truth graph JSON)")
    truth = od.GroundTruthGraph.load(truth_path)
    labels, l1_values, reports = [], [], {}
    for pred in preds:
        if not Path(pred).exists():
            raise CliError(f"prediction file not found: {pred}")
        matrix = gs.EdgeProbMatrix.from_csv(pred)
        report = gs.classification_metrics(matrix, truth, config["eval"]["threshold"])
        label = Path(pred).stem
        labels.append(label)
        l1_values.append(report.l1)
        reports[label] = {"path": pred, **report.to_dict()}
    _dump_json(out / "report.json", reports)
    _l1_chart(out / "l1_comparison.svg", labels, l1_values)
    return ["report.json", "l1_comparison.svg"]


def _cmd_baseline(config: dict, out: Path) -> list[str]:
    ds, truth = _build_dataset(config)
    section = config["baseline"]
    method = section["method"]
    if method == "correlation":
        matrix = gs.correlation_graph(ds, threshold_r=config["eval"]["corr_threshold"])
    elif method == "notears":
        matrix = gs.notears_linear(
            ds, lambda1=section["lambda1"], max_iter=section["max_iter"]
        )
    else:
        # The bootstrap counts binary edge decisions, so each resample's
        # probability matrix is thresholded by its method's own edge rule.
        if section["bootstrap_of"] == "correlation":
            r_min = config["eval"]["corr_threshold"]

            def discoverer(d):
                return gs.correlation_graph(d, threshold_r=r_min).probabilities > r_min

        else:

            def discoverer(d):
                inner = gs.notears_linear(
                    d, lambda1=section["lambda1"], max_iter=section["max_iter"]
                )
                return inner.probabilities > config["eval"]["threshold"]

        matrix = gs.bootstrap_edge_probs(
            discoverer, ds, b=section["bootstrap_b"], seed=config["seed"]
        )
    name = f"graph_{method}.csv"
    matrix.to_csv(out / name)
    artifacts = [name]
    if truth is not None:
        report = gs.classification_metrics(matrix, truth, config["eval"]["threshold"])
        _dump_json(out / "report.json", report.to_dict())
        artifacts.append("report.json")
    return artifacts


def _cmd_predict(config: dict, out: Path) -> list[str]:
    section = config["predict"]
    seed = config["seed"]
    data, _ = dn.make_two_site_dataset(n_per_site=section["n_per_site"], seed=seed)
    split = dn.SplitSpec(
        train_sites=(0,),
        test_sites=(1,),
        few_shot_fraction=section["few_shot_fraction"],
        seed=seed,
    )
    train_idx, _ = dn.split_rows(split, data)

    needs_graph = any(kind in ("ecmpnn", "sage") for kind in section["kinds"])
    skeleton = None
    if needs_graph:
        if "skeleton_from" in section:
            matrix = gs.EdgeProbMatrix.from_csv(section["skeleton_from"])
            if matrix.node_names != data.node_names:
                raise CliError("skeleton_from node names do not match the prediction task")
            probs = matrix.probabilities
        else:
            dual = dn.dual_from_rows(
                data.features[train_idx], data.node_names, data.target_index
            )
            run = tr.train(dual, tr.TrainConfig.from_dict(config["train"]))
            probs = run.probabilities
        skeleton = tr.extract_graph(
            probs, threshold=config["eval"]["threshold"], force_dag=True
        ).adjacency

    results = {}
    for kind in section["kinds"]:
        cfg = dn.PredictorConfig(
            kind=kind,
            skeleton=skeleton if kind in ("ecmpnn", "sage") else None,
            layers=section["layers"],
            hidden=section["hidden"],
            aggregator=section["aggregator"],
            undirected=section["undirected"],
            seed=seed,
            lr=section["lr"],
            epochs=section["epochs"],
            patience=section["patience"],
        )
        if section["grid"] and kind != "random_guess":
            fitted, table = dn.fit_predictor_grid(cfg, data, train_idx)
            report = dn.evaluate_ood(fitted, split, data)
            report["grid"] = table
        else:
            fitted = dn.fit_predictor(cfg, data, train_idx)
            report = dn.evaluate_ood(fitted, split, data)
        results[kind] = report

    split_label = (
        "zero_shot" if section["few_shot_fraction"] == 0.0
        else f"few_shot_{section['few_shot_fraction']:g}"
    )
    _dump_json(
        out / "predictions.json",
        {
            "split": split_label,
            "seed": seed,
            "feature_list": data.node_names,
            "target": data.node_names[data.target_index],
            "skeleton_edges": (
                [
                    [data.node_names[i], data.node_names[j]]
                    for i, j in zip(*np.nonzero(skeleton))
                ]
                if skeleton is not None
                else None
            ),
            "results": results,
        },
    )
    return ["predictions.json"]


def _cmd_ablate(config: dict, out: Path) -> list[str]:
    ds, truth = _build_dataset(config)
    truth = _require_truth(config, truth)
    threshold = config["eval"]["threshold"]
    rows = []
    for mask_on in (True, False):
        for dm_on in (True, False):
            for sp_on in (True, False):
                variant = dict(
                    config["train"], mask_enabled=mask_on, dm_enabled=dm_on, sp_enabled=sp_on
                )
                run = tr.train(ds, tr.TrainConfig.from_dict(variant))
                matrix = gs.EdgeProbMatrix(run.node_names, run.probabilities, "kgrcl")
                report = gs.classification_metrics(matrix, truth, threshold)
                rows.append(
                    {
                        "mask_enabled": mask_on,
                        "dm_enabled": dm_on,
                        "sp_enabled": sp_on,
                        "recall": report.recall,
                        "precision": report.precision,
                        "auc": report.auc,
                        "l1": report.l1,
                    }
                )
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(rows[0].keys())
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [
                    row[k] if isinstance(row[k], bool) or row[k] is None else f"{row[k]:.17g}"
                    for k in header
                ]
            )
    _dump_json(out / "ablation.json", rows)
    return ["ablation.csv", "ablation.json"]


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obsim",
        description="Causal structure discovery from paired observed/simulated tables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override global seed")
        p.add_argument("--out", default=None, help="output directory")
        if command == "eval-graph":
            p.add_argument(
                "--pred", action="append", default=None,
                help="edge-probability CSV to score (repeatable)",
            )
            p.add_argument("--truth", default=None, help="ground-truth graph JSON")
        if command == "baseline":
            p.add_argument(
                "--method", choices=["correlation", "notears", "bootstrap"], default=None
            )
        if command == "predict":
            p.add_argument("--few-shot", type=float, default=None, dest="few_shot")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if getattr(args, "pred", None):
        overrides.setdefault("eval", {})["preds"] = list(args.pred)
    if getattr(args, "truth", None):
        overrides.setdefault("data", {})["truth"] = args.truth
    if getattr(args, "method", None):
        overrides.setdefault("baseline", {})["method"] = args.method
    if getattr(args, "few_shot", None) is not None:
        overrides.setdefault("predict", {})["few_shot_fraction"] = args.few_shot
    return overrides


_HANDLERS = {
    "synth": _cmd_synth,
    "discover": _cmd_discover,
    "eval-graph": _cmd_eval_graph,
    "baseline": _cmd_baseline,
    "predict": _cmd_predict,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config, _overrides_from_args(args))
        out = _out_dir(config, args.command)
        _write_config(out, config)
        artifacts = _HANDLERS[args.command](config, out)
        _write_manifest(out, args.command, config, artifacts + ["config.json"])
    except (CliError, od.IngestError, ValueError, FileNotFoundError) as exc:
        _print_error(args.command, exc)
        return 2
    except Exception as exc:  # mid-run failure: still machine-readable
        _print_error(args.command, exc)
        return 1
    return 0


def _print_error(command: str, exc: Exception) -> None:
    payload = {
        "error": type(exc).__name__,
        "message": str(exc),
        "command": command,
    }
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

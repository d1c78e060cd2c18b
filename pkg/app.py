import json
import logging
import os
import sys
import time
from datetime import datetime, timezone

import click
import numpy as np
from flask import Flask, jsonify, send_file
from flask.cli import FlaskGroup

import ensemble
import estimators
import kinetic_sde
import limit_processes
import report_generator
import suites
from estimators import RegimeReport
from models import init_db, SessionLocal, Run, OutputFile, RegimeReportRecord
from potential import ConfigError, DomainError, RegimeTag, classify_regime, load_model_config, read_config_file

CODE_VERSION = "0.3.0"
LIMIT_PROCESSES = ("stable", "bessel", "V", "Y")

logging.basicConfig(level=os.getenv("KFP_LOG_LEVEL", "INFO"),
                    format="%(asctime)s %(levelname)s %(name)s: %(message)s")

app = Flask(__name__)


# --- configuration ---------------------------------------------------------

def parse_experiment(source, seed=None):
    """(spec, snapshot) from a config path or dict; all validation happens here."""
    cfg = read_config_file(source) if isinstance(source, (str, os.PathLike)) else dict(source)
    spec = load_model_config(cfg.get("model", cfg))
    classify_regime(spec)
    try:
        eps_list = sorted(float(e) for e in cfg.get("eps_list", [1e-2]))
        t_points = sorted(float(t) for t in cfg.get("t_points", [1.0]))
        n_paths = int(cfg.get("n_paths", 1000))
        dt = float(cfg.get("dt", 0.01))
        master = int(seed if seed is not None else cfg.get("seed", 0))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"malformed experiment keys: {e}") from e
    if n_paths < 1:
        raise ConfigError("n_paths must be at least 1")
    if not eps_list or any(not 0.0 < e < 1.0 for e in eps_list):
        raise ConfigError("eps_list entries must lie in (0, 1)")
    if not t_points or any(t <= 0 for t in t_points):
        raise ConfigError("t_points must be positive")
    if not dt > 0:
        raise ConfigError("dt must be positive")
    budgets = dict(cfg.get("budgets") or {})
    budgets.setdefault("max_path_steps", kinetic_sde.DEFAULT_MAX_PATH_STEPS)
    process = cfg.get("process", "stable")
    if process not in LIMIT_PROCESSES:
        raise ConfigError(f"process must be one of {', '.join(LIMIT_PROCESSES)}")
    snapshot = {
        "model": spec.to_config(),
        "eps_list": eps_list,
        "t_points": t_points,
        "n_paths": n_paths,
        "dt": dt,
        "seed": master,
        "budgets": budgets,
        "raw": bool(cfg.get("raw", False)),
        "process": process,
        "n_steps": int(cfg.get("n_steps", limit_processes.DEFAULT_Y_STEPS)),
        "u_min": cfg.get("u_min"),
        "eta_exc": cfg.get("eta_exc"),
        "clock_span": float(cfg.get("clock_span", limit_processes.DEFAULT_CLOCK_SPAN)),
        "quantity": cfg.get("quantity", "position"),
    }
    return spec, snapshot


def _manifest(command, snapshot, chunk_size, started, files, tolerances=None, extra=None):
    finished = time.time()
    manifest = {
        "command": command,
        "config": snapshot,
        "config_hash": estimators.config_hash(snapshot),
        "master_seed": snapshot.get("seed", 0),
        "seed_rule": ensemble.SEED_RULE,
        "chunk_size": chunk_size,
        "code_version": CODE_VERSION,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished_at": datetime.fromtimestamp(finished, timezone.utc).isoformat(),
        "wall_time": finished - started,
        "outputs": [report_generator.file_entry(f) for f in files],
        "tolerances": tolerances,
    }
    manifest.update(extra or {})
    return manifest


def persist_run(manifest, out_dir, reports=(), suite=None, status="done"):
    """Store the manifest and its reports; returns the run id or None when the database is unavailable."""
    session = SessionLocal()
    try:
        run = Run(
            command=manifest["command"],
            config_json=json.dumps(manifest["config"], sort_keys=True),
            config_hash=manifest["config_hash"],
            master_seed=manifest["master_seed"],
            seed_rule=manifest["seed_rule"],
            chunk_size=manifest["chunk_size"],
            code_version=manifest["code_version"],
            out_dir=out_dir,
            tolerances_json=json.dumps(manifest.get("tolerances"), sort_keys=True),
            started_at=datetime.fromisoformat(manifest["started_at"]),
            finished_at=datetime.fromisoformat(manifest["finished_at"]),
            wall_time=manifest["wall_time"],
            status=status,
        )
        for entry in manifest["outputs"]:
            run.files.append(OutputFile(path=entry["path"], sha256=entry["sha256"], size_bytes=entry["bytes"]))
        for r in reports:
            row = r.to_dict()
            run.reports.append(RegimeReportRecord(
                suite=suite or manifest["command"], check_name=r.check, regime=r.regime,
                target_json=json.dumps(row["target"], sort_keys=True),
                estimate_json=json.dumps(row["estimate"], sort_keys=True),
                tolerance_json=json.dumps(row["tolerance"], sort_keys=True), passed=bool(r.passed),
                runtime=r.runtime, config_hash=r.config_hash, note=r.note,
            ))
        session.add(run)
        session.commit()
        return run.id
    except Exception as e:
        session.rollback()
        app.logger.warning("could not persist run: %s", e)
        return None
    finally:
        session.close()


# --- commands --------------------------------------------------------------

def cmd_simulate(config, seed=None, out_dir=None, n_workers=None):
    started = time.time()
    spec, snapshot = parse_experiment(config, seed)
    chunk_size = ensemble.default_chunk_size()
    spec.prepare()
    samples = kinetic_sde.rescaled_position(spec, snapshot["eps_list"], snapshot["t_points"], snapshot["n_paths"],
                                            snapshot["seed"], snapshot["dt"], snapshot["budgets"]["max_path_steps"],
                                            raw=snapshot["raw"], n_workers=n_workers, chunk_size=chunk_size)
    out_dir = report_generator.run_directory(out_dir, f"simulate_{estimators.config_hash(snapshot)[:12]}")
    csv_path = report_generator.write_ensemble_csv(os.path.join(out_dir, "ensemble.csv"), samples,
                                                   snapshot["eps_list"], snapshot["t_points"])
    manifest = _manifest("simulate", snapshot, chunk_size, started, [csv_path],
                         extra={"regime": classify_regime(spec).tag.value})
    report_generator.write_manifest(out_dir, manifest)
    manifest["run_id"] = persist_run(manifest, out_dir)
    return manifest


def _limit_samples(spec, snapshot, n_workers):
    """Limit samples shaped (1, n_t, n_paths, components) with their time points."""
    process = snapshot["process"]
    t_points = snapshot["t_points"]
    n, seed = snapshot["n_paths"], snapshot["seed"]
    t_grid = np.array([0.0] + t_points)
    tag = classify_regime(spec).tag
    if process == "Y":
        rng = ensemble.chunk_generator(seed, ensemble.LIMIT_STREAM, 0)
        Y = limit_processes.sample_Y_batch(spec, n, rng, snapshot["n_steps"], snapshot["clock_span"])
        return Y[None, None], [0.0]
    if process == "stable":
        stable = limit_processes.stable_spec_for(spec, snapshot["u_min"], snapshot["n_steps"], snapshot["clock_span"])
        paths = limit_processes.sample_stable_paths(stable, t_grid, n, seed, n_workers=n_workers)
        return paths[:, 1:].transpose(1, 0, 2)[None], t_points
    if tag is not RegimeTag.BESSEL:
        raise DomainError(f"process {process!r} needs the Bessel regime, got {tag.value}")
    if process == "bessel":
        radii = limit_processes.sample_bessel_paths(spec.d - spec.beta, t_grid, n, seed, n_workers=n_workers)
        return radii[:, 1:].T[None, :, :, None], t_points
    bv = limit_processes.bessel_v_spec_for(spec, max(t_points), snapshot["eta_exc"])
    fine = np.union1d(np.linspace(0.0, max(t_points), 1001), t_points)
    V, integral = limit_processes.sample_V_paths(bv, spec, fine, n, seed)
    picked = (integral if snapshot["quantity"] == "position" else V)[:, np.searchsorted(fine, t_points)]
    return picked.transpose(1, 0, 2)[None], t_points


def cmd_limit(config, seed=None, out_dir=None, n_workers=None):
    started = time.time()
    spec, snapshot = parse_experiment(config, seed)
    spec.prepare()
    samples, t_points = _limit_samples(spec, snapshot, n_workers)
    out_dir = report_generator.run_directory(out_dir, f"limit_{estimators.config_hash(snapshot)[:12]}")
    csv_path = report_generator.write_ensemble_csv(os.path.join(out_dir, "limit.csv"), samples, [0.0], t_points)
    manifest = _manifest("limit", snapshot, ensemble.default_chunk_size(), started, [csv_path],
                         extra={"regime": classify_regime(spec).tag.value})
    report_generator.write_manifest(out_dir, manifest)
    manifest["run_id"] = persist_run(manifest, out_dir)
    return manifest


def _load_manifest(in_dir):
    path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"no manifest.json in {in_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_estimate(in_dir, method):
    if method not in ("ecf", "hill", "scaling"):
        raise ConfigError("method must be ecf, hill or scaling")
    started = time.time()
    manifest = _load_manifest(in_dir)
    if manifest.get("command") not in ("simulate", "limit"):
        raise ConfigError("estimate reads the output of simulate or limit")
    csv_name = "ensemble.csv" if manifest["command"] == "simulate" else "limit.csv"
    data = report_generator.read_ensemble_csv(os.path.join(in_dir, csv_name))
    spec = load_model_config(manifest["config"]["model"])
    regime = classify_regime(spec)
    tol = suites.tolerance("stable_index", "full")
    target = regime.alpha if regime.alpha is not None else (
        2.0 if regime.tag in (RegimeTag.DIFFUSIVE, RegimeTag.CRITICAL_DIFFUSIVE) else None)
    reports = []
    if method == "scaling":
        t = min(next(iter(data.values())))
        raw = manifest["config"].get("raw") or manifest["command"] != "simulate"
        ensembles = {eps: by_t[t] if raw else by_t[t] / regime.scaling(eps) for eps, by_t in data.items()}
        fit = estimators.scaling_exponent(ensembles, regime)
        reports.append(RegimeReport.compare("scaling_exponent", regime.tag.value, fit.target, fit.slope,
                                            suites.TOLERANCES["scaling_slope"], stderr=fit.stderr,
                                            note=f"{fit.method}; loglog coefficient {fit.loglog_coef:.3g}"))
    else:
        for eps in sorted(data):
            for t in sorted(data[eps]):
                X = data[eps][t]
                est = (estimators.stability_index_ecf(X) if method == "ecf"
                       else estimators.hill_tail_index(np.linalg.norm(X, axis=1)))
                name = f"{method}_eps{eps:g}_t{t:g}"
                if target is None:
                    reports.append(RegimeReport(name, regime.tag.value, {}, {"value": est.alpha_hat},
                                                {}, True, note="no index target in this regime"))
                else:
                    reports.append(RegimeReport.compare(name, regime.tag.value, target, est.alpha_hat, tol,
                                                        stderr=est.stderr))
    path = report_generator.write_reports_json(os.path.join(in_dir, f"estimates_{method}.json"), reports)
    est_manifest = _manifest("estimate", manifest["config"], manifest["chunk_size"], started, [path],
                             tolerances={"index": tol}, extra={"source_run": manifest.get("config_hash")})
    persist_run(est_manifest, in_dir, reports)
    return reports


def cmd_verify(suite, seed=0, out_dir=None, n_workers=None, config=None, max_runtime_s=None):
    """Run a suite; returns (reports, manifest). All reports pass iff the exit code is 0."""
    if suite not in suites.SUITE_NAMES:
        raise ConfigError(f"suite must be one of {', '.join(suites.SUITE_NAMES)}")
    if config is not None:
        _, snapshot = parse_experiment(config, seed)
        max_runtime_s = max_runtime_s or snapshot["budgets"].get("max_runtime_s")
    started = time.time()
    reports, meta = suites.run_suite(suite, seed, n_workers, max_runtime_s)
    out_dir = report_generator.run_directory(out_dir, f"verify_{suite}_{int(started)}")
    files = [report_generator.write_reports_json(os.path.join(out_dir, "reports.json"), reports),
             report_generator.write_summary_csv(os.path.join(out_dir, "summary.csv"), reports)]
    snapshot = {"suite": suite, "seed": seed, "scale": meta["scale"], "params": meta["params"]}
    manifest = _manifest("verify", snapshot, ensemble.default_chunk_size(), started, files,
                         tolerances=meta["tolerances"], extra={"suite": suite, "max_runtime_s": max_runtime_s})
    report_generator.write_manifest(out_dir, manifest)
    status = "done" if all(r.passed for r in reports) else "failed"
    manifest["run_id"] = persist_run(manifest, out_dir, reports, suite=suite, status=status)
    return reports, manifest


def _load_reports(in_dir):
    names = ["reports.json"] + sorted(f for f in os.listdir(in_dir) if f.startswith("estimates_"))
    reports = []
    for name in names:
        path = os.path.join(in_dir, name)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                reports.extend(RegimeReport(**item) for item in json.load(fh))
    if not reports:
        raise ConfigError(f"no reports found in {in_dir}")
    return reports


def cmd_report(in_dir, fmt):
    reports = _load_reports(in_dir)
    manifest = _load_manifest(in_dir)
    if fmt == "csv":
        return report_generator.write_summary_csv(os.path.join(in_dir, "summary.csv"), reports)
    if fmt == "json":
        return report_generator.write_reports_json(os.path.join(in_dir, "reports.json"), reports)
    if fmt == "docx":
        return report_generator.save_report_docx(manifest, reports, in_dir)
    raise ConfigError("format must be csv, json or docx")


def _exit_on_error(func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except ValueError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except RuntimeError as e:
        click.echo(f"numerical error: {e}", err=True)
        sys.exit(3)


@app.cli.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None)
@click.option("--workers", type=int, default=None)
def simulate_command(config_path, seed, out_dir, workers):
    manifest = _exit_on_error(cmd_simulate, config_path, seed, out_dir, workers)
    click.echo(json.dumps(manifest["outputs"], indent=2))


@app.cli.command("limit")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None)
@click.option("--workers", type=int, default=None)
def limit_command(config_path, seed, out_dir, workers):
    manifest = _exit_on_error(cmd_limit, config_path, seed, out_dir, workers)
    click.echo(json.dumps(manifest["outputs"], indent=2))


@app.cli.command("estimate")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--method", type=click.Choice(["ecf", "hill", "scaling"]), default="ecf")
def estimate_command(in_dir, method):
    reports = _exit_on_error(cmd_estimate, in_dir, method)
    for r in reports:
        click.echo(f"{r.check}: {r.estimate.get('value')} ({'pass' if r.passed else 'FAIL'})")


@app.cli.command("verify")
@click.option("--suite", type=click.Choice(list(suites.SUITE_NAMES)), default="properties")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", default=None)
@click.option("--workers", type=int, default=None)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def verify_command(suite, seed, out_dir, workers, config_path):
    reports, manifest = _exit_on_error(cmd_verify, suite, seed, out_dir, workers, config_path)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        click.echo(f"{'pass' if r.passed else 'FAIL'}  {r.check}  {r.regime}")
    click.echo(f"{len(reports) - len(failed)}/{len(reports)} passed in {manifest['wall_time']:.1f}s")
    if failed:
        sys.exit(1)


@app.cli.command("report")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json", "docx"]), default="json")
def report_command(in_dir, fmt):
    click.echo(_exit_on_error(cmd_report, in_dir, fmt))


# --- routes ----------------------------------------------------------------

def _run_summary(run):
    return {
        "id": run.id,
        "command": run.command,
        "config_hash": run.config_hash,
        "status": run.status,
        "started_at": run.started_at.isoformat() if run.started_at else None,
        "wall_time": run.wall_time,
    }


def _report_objects(run):
    return [RegimeReport(r.check_name, r.regime, json.loads(r.target_json), json.loads(r.estimate_json),
                         json.loads(r.tolerance_json), r.passed, r.runtime or 0.0, r.config_hash or "",
                         note=r.note or "")
            for r in run.reports]


@app.route("/runs")
def list_runs():
    session = SessionLocal()
    try:
        runs = session.query(Run).order_by(Run.id.desc()).all()
        return jsonify([_run_summary(r) for r in runs])
    finally:
        session.close()


@app.route("/runs/<int:run_id>")
def show_run(run_id):
    session = SessionLocal()
    try:
        run = session.get(Run, run_id)
        if not run:
            return "Run not found", 404
        manifest = _run_summary(run)
        manifest.update(
            config=json.loads(run.config_json),
            master_seed=run.master_seed,
            seed_rule=run.seed_rule,
            chunk_size=run.chunk_size,
            code_version=run.code_version,
            tolerances=json.loads(run.tolerances_json) if run.tolerances_json else None,
            outputs=[{"path": f.path, "sha256": f.sha256, "bytes": f.size_bytes} for f in run.files],
        )
        return jsonify(manifest)
    finally:
        session.close()


@app.route("/runs/<int:run_id>/reports")
def run_reports(run_id):
    session = SessionLocal()
    try:
        run = session.get(Run, run_id)
        if not run:
            return "Run not found", 404
        return jsonify([r.to_dict() for r in _report_objects(run)])
    finally:
        session.close()


@app.route("/runs/<int:run_id>/report.docx")
def download_report(run_id):
    session = SessionLocal()
    try:
        run = session.get(Run, run_id)
        if not run:
            return "Run not found", 404
        run_info = {"command": run.command, "suite": run.reports[0].suite if run.reports else None,
                    "config_hash": run.config_hash, "master_seed": run.master_seed,
                    "started_at": run.started_at.isoformat() if run.started_at else None}
        filename, buffer = report_generator.report_buffer(run_info, _report_objects(run))
        return send_file(
            buffer,
            as_attachment=True,
            download_name=filename,
            mimetype=report_generator.DOCX_MIMETYPE
        )
    except Exception as e:
        return f"Error generating report: {e}", 500
    finally:
        session.close()


# Initialize database when module is loaded
init_db()

if __name__ == "__main__":
    FlaskGroup(create_app=lambda: app)()

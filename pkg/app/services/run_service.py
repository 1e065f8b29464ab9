import json
import logging

from app.extensions import db
from app.models import PropertyCheck, Run, SweepPoint

logger = logging.getLogger(__name__)


def record_run(command, cfg, report, exit_code, status="completed"):
    """Store a finished command and its report. Returns the run id."""
    certificate = report.get("certificate")
    run = Run(
        command=command,
        config_digest=cfg.digest(),
        phi_label=cfg.phi.label(),
        seed=cfg.seed,
        lam=report.get("lambda"),
        lambda_star_est=report.get("lambda_star_est"),
        status=status,
        exit_code=exit_code,
        certificate=certificate.get("passed") if isinstance(certificate, dict) else certificate,
        energy_u1=report.get("I_u1"),
        level_c=report.get("J_u2"),
        residual_u1=report.get("residual_u1"),
        residual_u2=report.get("residual_u2"),
        output_dir=str(cfg.output_dir),
        report_json=json.dumps(report, sort_keys=True, default=str),
        wall_time=report.get("wall_time"),
    )
    db.session.add(run)
    db.session.commit()
    logger.debug(f"Recorded {command} run #{run.id} (exit code {exit_code})")
    return run.id


def record_sweep_points(run_id, rows):
    for row in rows:
        db.session.add(
            SweepPoint(
                run_id=run_id,
                lam=row["lambda"],
                min_energy=row.get("min_I"),
                level_c=row.get("c"),
                certificate=row.get("certificate"),
                status=row.get("status", "completed"),
            )
        )
    db.session.commit()
    return len(rows)


def record_property_checks(run_id, results):
    for r in results:
        db.session.add(
            PropertyCheck(
                run_id=run_id,
                name=r.name,
                family=r.family,
                min_slack=r.min_slack,
                passed=r.passed,
            )
        )
    db.session.commit()
    return len(results)


def list_runs(limit=20, command=None):
    """Most recent runs first."""
    query = Run.query
    if command:
        query = query.filter_by(command=command)
    query = query.order_by(Run.created_at.desc(), Run.id.desc())
    if limit:
        query = query.limit(limit)
    return [run.to_dict() for run in query.all()]


def get_run(run_id):
    """Full stored run with its sweep rows and property checks, or None."""
    run = db.session.get(Run, run_id)
    if run is None:
        return None
    data = run.to_dict()
    data["report"] = run.report
    data["sweep"] = [p.to_dict() for p in run.sweep_points.order_by(SweepPoint.lam).all()]
    data["properties"] = [c.to_dict() for c in run.property_checks.order_by(PropertyCheck.id).all()]
    return data

import json
from datetime import datetime, timezone

from app.extensions import db


class Run(db.Model):
    __tablename__ = "runs"

    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(20), nullable=False, index=True)
    config_digest = db.Column(db.String(32), index=True)
    phi_label = db.Column(db.String(64))
    seed = db.Column(db.Integer)
    lam = db.Column(db.Float)
    lambda_star_est = db.Column(db.Float)
    status = db.Column(db.String(20), default="completed")
    exit_code = db.Column(db.Integer)
    certificate = db.Column(db.Boolean)
    energy_u1 = db.Column(db.Float)
    level_c = db.Column(db.Float)
    residual_u1 = db.Column(db.Float)
    residual_u2 = db.Column(db.Float)
    output_dir = db.Column(db.String(512))
    report_json = db.Column(db.Text)
    wall_time = db.Column(db.Float)
    created_at = db.Column(db.DateTime, default=lambda: datetime.now(timezone.utc), index=True)

    sweep_points = db.relationship(
        "SweepPoint", backref="run", lazy="dynamic", cascade="all, delete-orphan"
    )
    property_checks = db.relationship(
        "PropertyCheck", backref="run", lazy="dynamic", cascade="all, delete-orphan"
    )

    @property
    def report(self):
        return json.loads(self.report_json) if self.report_json else None

    def to_dict(self):
        return {
            "id": self.id,
            "command": self.command,
            "config_digest": self.config_digest,
            "phi": self.phi_label,
            "seed": self.seed,
            "lambda": self.lam,
            "lambda_star_est": self.lambda_star_est,
            "status": self.status,
            "exit_code": self.exit_code,
            "certificate": self.certificate,
            "I_u1": self.energy_u1,
            "c": self.level_c,
            "residual_u1": self.residual_u1,
            "residual_u2": self.residual_u2,
            "output_dir": self.output_dir,
            "wall_time": self.wall_time,
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }


class SweepPoint(db.Model):
    __tablename__ = "sweep_points"

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(
        db.Integer,
        db.ForeignKey("runs.id", ondelete="CASCADE"),
        nullable=False,
        index=True,
    )
    lam = db.Column(db.Float, nullable=False)
    min_energy = db.Column(db.Float)
    level_c = db.Column(db.Float)
    certificate = db.Column(db.Boolean)
    status = db.Column(db.String(20), default="completed")

    def to_dict(self):
        return {
            "lambda": self.lam,
            "min_I": self.min_energy,
            "c": self.level_c,
            "certificate": self.certificate,
            "status": self.status,
        }


class PropertyCheck(db.Model):
    __tablename__ = "property_checks"

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(
        db.Integer,
        db.ForeignKey("runs.id", ondelete="CASCADE"),
        nullable=False,
        index=True,
    )
    name = db.Column(db.String(64), nullable=False)
    family = db.Column(db.String(64))
    min_slack = db.Column(db.Float)
    passed = db.Column(db.Boolean, index=True)

    def to_dict(self):
        return {
            "name": self.name,
            "family": self.family,
            "min_slack": self.min_slack,
            "passed": self.passed,
        }

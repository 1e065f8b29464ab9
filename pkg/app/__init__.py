from flask import Flask
from sqlalchemy import event

from app.config import Config
from app.extensions import db


def create_app(config=None, deterministic=None):
    app = Flask(__name__)
    app.config.from_object(Config)

    if config:
        app.config.update(config)

    Config.DATA_DIR.mkdir(parents=True, exist_ok=True)
    Config.LOGS_DIR.mkdir(parents=True, exist_ok=True)

    db.init_app(app)

    with app.app_context():
        # Set SQLite pragmas for performance
        @event.listens_for(db.engine, "connect")
        def _set_sqlite_pragma(dbapi_connection, connection_record):
            cursor = dbapi_connection.cursor()
            cursor.execute("PRAGMA journal_mode=WAL")
            cursor.execute("PRAGMA synchronous=NORMAL")
            cursor.close()

        db.create_all()

    # Attach services to app for shared access
    from app.services.experiment import ExperimentRunner

    app.runner = ExperimentRunner(app, deterministic=deterministic)

    return app

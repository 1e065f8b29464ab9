"""Database handle for the run history, bound in create_app."""

from flask_sqlalchemy import SQLAlchemy

db = SQLAlchemy()

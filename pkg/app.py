from logging.config import dictConfig

from flask import Flask, jsonify
from flask_sqlalchemy import SQLAlchemy
from flask_migrate import Migrate

from config import DefaultConfig

app = Flask(__name__)
app.config.from_object(DefaultConfig)
app.config.from_envvar("GRASP_SETTINGS", silent=True)
app.config.from_prefixed_env("GRASP")

dictConfig({
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {"generic": {"format": "%(levelname)-5.5s [%(name)s] %(message)s"}},
    "handlers": {"console": {"class": "logging.StreamHandler", "formatter": "generic"}},
    "root": {"level": app.config["LOG_LEVEL"], "handlers": ["console"]},
})

db = SQLAlchemy(app)
migrate = Migrate(app, db)

# model
import model

# routes
import routes
from routes.reports import reports_bp
app.register_blueprint(reports_bp)

# cli
import commands

if __name__ == '__main__':
    app.run()

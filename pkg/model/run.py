import json
from datetime import datetime

from app import db


class Run(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    kind = db.Column(db.String(32), nullable=False, index=True)
    seed = db.Column(db.Integer, nullable=False, default=0)
    created_at = db.Column(db.DateTime, nullable=False, default=datetime.utcnow, index=True)
    config = db.Column(db.Text, nullable=False, default="{}")
    metrics = db.Column(db.Text, nullable=False, default="{}")
    records = db.relationship("RunRecord", backref="run", lazy=True, cascade="all, delete-orphan")

    def to_dict(self, with_records=False):
        payload = {
            "id": self.id,
            "kind": self.kind,
            "seed": self.seed,
            "created_at": self.created_at.isoformat(),
            "config": json.loads(self.config),
            "metrics": json.loads(self.metrics),
        }
        if with_records:
            payload["records"] = [r.to_dict() for r in self.records]
        return payload


class RunRecord(db.Model):
    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey("run.id"), nullable=False, index=True)
    question_id = db.Column(db.String(64), nullable=False)
    depth = db.Column(db.Integer)
    predicted = db.Column(db.String(255))
    gold = db.Column(db.String(255), nullable=False)
    hit = db.Column(db.Boolean, nullable=False, default=False)
    terminal = db.Column(db.String(32))
    select_calls = db.Column(db.Integer, nullable=False, default=0)
    answer_calls = db.Column(db.Integer, nullable=False, default=0)
    seconds = db.Column(db.Float, nullable=False, default=0.0)

    def to_dict(self):
        return {
            "question_id": self.question_id,
            "depth": self.depth,
            "predicted": self.predicted,
            "gold": json.loads(self.gold),
            "hit": self.hit,
            "terminal": self.terminal,
            "select_calls": self.select_calls,
            "answer_calls": self.answer_calls,
            "seconds": self.seconds,
        }


def record_run(kind, seed, config, metrics, records=()):
    """Store an evaluation; `records` are engine.bench.EvalRecord objects."""
    run = Run(kind=kind, seed=seed, config=json.dumps(config, default=str), metrics=json.dumps(metrics))
    for r in records:
        run.records.append(RunRecord(
            question_id=r.question_id,
            depth=r.depth,
            predicted=(r.predicted or "")[:255] or None,
            gold=json.dumps(list(r.gold)),
            hit=r.hit,
            terminal=r.trace.get("terminal"),
            select_calls=r.trace.get("select_calls", 0),
            answer_calls=r.trace.get("answer_calls", 0),
            seconds=r.trace.get("seconds", 0.0),
        ))
    db.session.add(run)
    db.session.commit()
    return run

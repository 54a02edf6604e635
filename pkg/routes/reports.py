from flask import Blueprint, request

from model.run import Run

reports_bp = Blueprint('reports', __name__)


@reports_bp.route('/runs/list', methods=['GET'])
def list_runs():
    query = Run.query
    if kind := request.args.get('kind'):
        query = query.filter(Run.kind == kind)
    runs = query.order_by(Run.created_at.desc(), Run.id.desc()).all()
    return [run.to_dict() for run in runs], 200


@reports_bp.route('/runs/<int:run_id>', methods=['GET'])
def run_by_id(run_id):
    run = Run.query.get(run_id)
    if not run:
        return {"error": "Run not found"}, 404
    return run.to_dict(with_records=True), 200


@reports_bp.route('/runs/<int:run_id>/hits', methods=['GET'])
def run_hits_by_depth(run_id):
    run = Run.query.get(run_id)
    if not run:
        return {"error": "Run not found"}, 404
    depths = {}
    for record in run.records:
        key = str(record.depth) if record.depth is not None else "unknown"
        total, hits = depths.get(key, (0, 0))
        depths[key] = (total + 1, hits + int(record.hit))
    return [{
        'depth': depth,
        'questions': total,
        'hits_at_1': hits / total
    } for depth, (total, hits) in sorted(depths.items())], 200

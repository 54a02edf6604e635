from routes.error import *
from routes.graph import *
from routes.reasoning import *
from routes.reports import reports_bp

from commands.graph import *
from commands.selector import *
from commands.reasoning import *
from commands.bench import *

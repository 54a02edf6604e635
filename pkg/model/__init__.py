from model.run import *

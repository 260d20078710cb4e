from . import data, evaluate, gradcheck, train

__all__ = ["data", "evaluate", "gradcheck", "train"]

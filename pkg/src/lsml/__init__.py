"""Level-set segmentation with learned velocity fields."""
from .evaluation import dice, dice_from_jaccard, jaccard
from .forest import RandomForestRegressor
from .initialization import InitParams, SeedInitializer, initialize
from .levelset import LevelSetState, step
from .training import ModelSequence, TrainConfig, segment, train

__version__ = "0.1.0"

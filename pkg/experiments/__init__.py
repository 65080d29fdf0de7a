from .sweep import SweepAxis, SweepResult, SweepSpec, run_sweep, train_many
from .recipes import RECIPES, RecipeContext, RecipeResult, report_run, run_recipe
from .cli import build_parser, diagnose, main

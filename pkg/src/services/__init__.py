# Services: synthetic scenes, evaluation, training
from src.services.evaluator import cmc, rank_all, run_ablation
from src.services.synth import SynthConfig, generate
from src.services.trainer import TrainConfig, train

__all__ = ['SynthConfig', 'generate', 'cmc', 'rank_all', 'run_ablation', 'TrainConfig', 'train']

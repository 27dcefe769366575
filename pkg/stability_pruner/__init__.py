__version__ = "0.1.0"

from .tensor import Tensor
from .layers import Architecture, LayerSpec
from .model import ModelGraph
from .pruner import ImportanceReport, IterativePruner, PruneSchedule, rank_filters, select_filters, surgery
from .trainer import TrainConfig, Trainer
from .analyzer import CostAnalyzer, CostReport, memory_report
from .dataio import Dataset, load_checkpoint, load_mnist, save_checkpoint, synth_dataset
from .cli import main

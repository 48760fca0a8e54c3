"""Zero-shot relational learning on multimodal knowledge graphs."""

from .config import Config, load_config, small_config
from .kg import MultimodalKG, RelationSplit, Triple, generate_split, load_dataset_dir, load_mmkg, save_mmkg
from .tokenization import Vocabulary

__all__ = [
    "Config",
    "MultimodalKG",
    "RelationSplit",
    "Triple",
    "Vocabulary",
    "generate_split",
    "load_config",
    "load_dataset_dir",
    "load_mmkg",
    "save_mmkg",
    "small_config",
]

__version__ = "0.1.0"

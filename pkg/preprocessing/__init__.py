from .corpus import Corpus, tokenize_bytes, detokenize, make_batches, eval_windows
from .config_file import read_sections, apply_overrides, load_config_dict

"""Chain-of-history reasoning for temporal knowledge graph forecasting."""

from .history import HistoryChain, HistoryRef, extend_chains, first_order_histories
from .llm import BackendConfig, Gateway, GenerationParams
from .parsing import RankedAnswers, parse_id_selection, parse_ranked_answers
from .pipeline import CoHConfig, RunRecord, ablate, run_coh, score_records, sweep
from .scoring import FusionConfig, fuse, position_to_score
from .tkg import Query, Quadruple, TemporalKG, Vocabulary, augment_reversed, load_dataset, queries_from_test
from .verbalize import TimeStyle, Verbalizer, format_time

__version__ = "0.1.0"

"""Bootstrap biomedical entity extraction without an annotated corpus.

High-recall dictionary annotation against a typed concept knowledge base,
human curation into an IOB corpus, CRF sequence tagging, and an
entity-linking prediction pipeline with strict/relaxed evaluation.
"""

__version__ = "0.1.0"

from .kb import DEFAULT_SEMANTIC_GROUPS, Concept, EntityClass, KnowledgeBase, class_of, load_kb, relevant_tuis
from .matcher import MatcherConfig, Match, build_index, lookup, ngrams, scan_sentence, similarity
from .textprep import Glossary, RawDocument, Sentence, dedupe, expand_abbreviations, segment, tokenize
from .corpus import SplitSpec, TaggedSentence, from_iob, split_corpus, stats, to_iob
from .tagger import CRFModel, TrainConfig, decode, nll_and_gradient, random_search, train, viterbi
from .linker import LinkedEntity, PipelineAssets, link, merge_predictions, predict
from .metrics import evaluate_run, relaxed_prf, strict_prf

__all__ = [
    "DEFAULT_SEMANTIC_GROUPS",
    "Concept",
    "EntityClass",
    "KnowledgeBase",
    "class_of",
    "load_kb",
    "relevant_tuis",
    "MatcherConfig",
    "Match",
    "build_index",
    "lookup",
    "ngrams",
    "scan_sentence",
    "similarity",
    "Glossary",
    "RawDocument",
    "Sentence",
    "dedupe",
    "expand_abbreviations",
    "segment",
    "tokenize",
    "SplitSpec",
    "TaggedSentence",
    "from_iob",
    "split_corpus",
    "stats",
    "to_iob",
    "CRFModel",
    "TrainConfig",
    "decode",
    "nll_and_gradient",
    "random_search",
    "train",
    "viterbi",
    "LinkedEntity",
    "PipelineAssets",
    "link",
    "merge_predictions",
    "predict",
    "evaluate_run",
    "relaxed_prf",
    "strict_prf",
    "__version__",
]

"""Controllable visual-linguistic module network for image captioning, in numpy."""

from .config import MODULES, ModelConfig
from .data import (Corpus, SynthConfig, TaggedCaption, Vocabulary, build_vocab, generate_corpus,
                   generate_scene, load_corpus, load_features, pos_to_module, save_corpus,
                   save_features, subsample_captions)
from .decoder import CVLNM
from .encoders import FeatureSet
from .reason import TripletRecord, load_triplets

__version__ = "0.1.0"

from cemat.data.corpus import CorpusManifest, Sentence, SentencePair
from cemat.data.lexicon import Lexicon
from cemat.data.masking import MaskedExample, MaskingPolicy
from cemat.data.vocab import Vocabulary

__all__ = [
    "CorpusManifest",
    "Lexicon",
    "MaskedExample",
    "MaskingPolicy",
    "Sentence",
    "SentencePair",
    "Vocabulary",
]

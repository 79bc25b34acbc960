"""Hand-annotated 3-document, 8-sentence corpus with hand-enumerated edges."""
from gsn.graph import AnnotatedCorpus, Sentence


def S(tokens, *ents):
    return Sentence(tuple(tokens), frozenset(ents))


CORPUS = AnnotatedCorpus(
    documents=(
        (S([1, 2, 3], "Marie Curie", "Warsaw"),          # 0
         S([4, 5], "Sorbonne"),                           # 1
         S([6, 7, 8], "Nobel Prize")),                    # 2
        (S([9, 10], "warsaw", "Vistula"),                 # 3
         S([11, 12, 13], "Poland"),                       # 4
         S([14, 15], "nobel   PRIZE")),                   # 5
        (S([16, 17, 18], "Sorbonne", "Paris"),            # 6
         S([19, 20], "Pierre Curie")),                    # 7
    ),
    question_tokens=(21, 22, 23),
    question_entities=frozenset({"Marie Curie", "Poland", " paris "}),
)

# relation 0: every pair inside a document
SAME_DOC = {(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5), (6, 7)}
# relation 1: cross-document pairs sharing a normalized entity
SHARED = {(0, 3), (1, 6), (2, 5)}
# relation 2: cross-document pairs that both mention a question entity (0, 4, 6)
QUESTION = {(0, 4), (0, 6), (4, 6)}

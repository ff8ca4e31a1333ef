"""
How well does a caption corpus cover a label set?
=================================================

Chunks are maximal runs of content words (function words and punctuation
break them). Chunks seen at least min_count times form the concept
dictionary; a label counts as covered when one of its chunks occurs more
than min_count times.
"""

from pathlib import Path

from lmalign import coverage as cov

print(cov.extract_chunks("A photo of a dog"))
print(cov.extract_chunks("the red sports car on the road"))

fixture = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "coverage12"
captions = list(cov.iter_corpus_tsv(fixture / "captions.tsv"))
concepts = cov.build_concept_dict(captions, min_count=5)
print("dictionary:", concepts.counts)

labels = ["dog", "cat", "red car", "grass"]
report = cov.coverage_and_count(labels, concepts)
for row in report.per_label:
    print(f"  {row.label:8s} present={row.present} count={row.local_count}")
print(report.summary(), end="")

# sharding the corpus gives the same dictionary
assert cov.build_concept_dict_sharded(captions, 4).to_tsv() == concepts.to_tsv()

"""Synthetic multi-domain corpora, file round trips, few-shot subsampling and read guards."""
import tempfile
from collections import Counter

from metakd import data as D

spec = D.SynthSpec(num_domains=3, train_size=200, dev_size=50, test_size=50, shared_strength=0.8)
corpora = D.synth_multidomain(spec)
for c in corpora:
    ex = c.get("train")[0]
    print(c.name, c.sizes(), "|", ex.text, "->", ex.label)

with tempfile.TemporaryDirectory() as tmp:
    D.write_corpus_dir(corpora, tmp, spec)
    back = D.read_corpus_dir(tmp)
    print("corpus dir round trip:", [c.splits for c in back] == [c.splits for c in corpora])

small = D.subsample(corpora[0], 0.05, seed=1)
print("5% subsample, class counts:", Counter(ex.label for ex in small.get("train")))

vocab = D.Vocab.build([ex.text for c in corpora for ex in c.get("train", labels=False)], 10_000)
print("vocab size", len(vocab), "| encoded:", vocab.encode(corpora[0].get("train")[0].text))

# training code runs inside a guard; reading the test split there is an error
with D.guard(forbid_splits=["test"], forbid_labels=[(corpora[1].name, "train")]):
    try:
        corpora[0].get("test")
    except D.HygieneError as e:
        print("blocked:", e)
    unlabeled = corpora[1].get("train", labels=False)
    print("held-out inputs readable, labels hidden:", unlabeled[0].label is None)
print("last access of", corpora[1].name, corpora[1].access_log[-1], "(split, kind, guarded)")

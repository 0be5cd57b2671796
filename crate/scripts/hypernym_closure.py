#!/usr/bin/env python3
"""Write a hypernym closure file for `snare stats --closure`.

Each output line is `word<TAB>ancestor`: `ancestor` is a lemma of some
transitive hypernym of some noun sense of `word`. A word therefore counts as
a hyponym of a target when any of its senses reaches it. Adjectives are
linked through their attribute nouns and derivationally related nouns, so
`round` reaches `shape` via `roundness`.

Requires nltk with the WordNet corpus:

    pip install nltk
    python -m nltk.downloader wordnet

Usage:

    python scripts/hypernym_closure.py --targets color,shape > closure.tsv
    python scripts/hypernym_closure.py --all > closure-full.tsv
"""

import argparse
import sys

from nltk.corpus import wordnet as wn


def ancestors(synset):
    names = set()
    for path_synset in synset.closure(lambda s: s.hypernyms() + s.instance_hypernyms()):
        for lemma in path_synset.lemmas():
            names.add(lemma.name().lower())
    return names


def noun_senses(word):
    senses = set(wn.synsets(word, pos=wn.NOUN))
    for adj in wn.synsets(word, pos=wn.ADJ):
        senses.update(adj.attributes())
        for lemma in adj.lemmas():
            if lemma.name().lower() != word:
                continue
            for related in lemma.derivationally_related_forms():
                if related.synset().pos() == wn.NOUN:
                    senses.add(related.synset())
    return senses


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--targets", help="comma-separated ancestors to keep")
    group.add_argument("--all", action="store_true", help="keep every ancestor")
    args = parser.parse_args()
    targets = None if args.all else {t.strip().lower() for t in args.targets.split(",") if t.strip()}

    words = sorted({l.lower() for pos in (wn.NOUN, wn.ADJ) for l in wn.all_lemma_names(pos=pos)})
    out = sys.stdout
    out.write("# generated by scripts/hypernym_closure.py from WordNet %s\n" % wn.get_version())
    for word in words:
        if "_" in word:
            continue
        found = set()
        for synset in noun_senses(word):
            found |= ancestors(synset)
        found.discard(word)
        if targets is not None:
            found &= targets
        for ancestor in sorted(found):
            out.write("%s\t%s\n" % (word, ancestor))


if __name__ == "__main__":
    main()

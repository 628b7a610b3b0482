#!/usr/bin/env python3
"""Rebuild the bundled tokenizer fixtures and the mini medical corpus.

Outputs (committed under src/medeir/assets/):
  vocab_base.txt     base-style vocabulary that fragments medical terms
  vocab_domain.txt   curated medical vocabulary
  vocab_merged.txt   merge_vocabularies(base, domain)
  mini_medical_abstracts.jsonl  ~200 synthetic abstracts, JSONL {"id","text"}

The script verifies that both vocabularies reproduce the frozen comparison
rows exactly before writing anything.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from medeir.tokenizer import (
    SPECIAL_TOKENS,
    TokenizerModel,
    Vocabulary,
    merge_vocabularies,
    pretokenize,
)

ASSETS = Path(__file__).resolve().parents[1] / "src" / "medeir" / "assets"

# (term, base-style tokens, merged-style tokens); punctuation tokens are
# excluded from the comparison on both sides.
COMPARISON_ROWS = [
    ("ibuprofen", ["ib", "##up", "##ro", "##fen"], ["ibuprofen"]),
    (
        "gastroesophageal reflux",
        ["gas", "##tro", "##es", "##op", "##ha", "##ge", "##al", "ref", "##lux"],
        ["gastroesophageal", "reflux"],
    ),
    ("electrocardiogram", ["electro", "##card", "##io", "##gram"], ["electrocardiogram"]),
    ("endoscopy", ["end", "##os", "##co", "##py"], ["endoscopy"]),
    ("acetaminophen", ["ace", "##tam", "##ino", "##ph", "##en"], ["acet", "##aminophen"]),
    ("prednisone", ["pre", "##d", "##nis", "##one"], ["prednisone"]),
    (
        "chronic obstructive pulmonary disease",
        ["chronic", "ob", "##st", "##ru", "##ctive", "pulmonary", "disease"],
        ["chronic", "obstructive", "pulmonary", "disease"],
    ),
    ("cirrhosis", ["ci", "##rr", "##hosis"], ["cirrhosis"]),
    ("angioplasty", ["ang", "##io", "##pl", "##ast", "##y"], ["angioplasty"]),
    ("colonoscopy", ["colon", "##os", "##co", "##py"], ["colonoscopy"]),
    ("amoxicillin", ["am", "##ox", "##ici", "##llin"], ["amoxicillin"]),
    (
        "myocardial infarction necessitates immediate thrombolytic therapy",
        ["my", "##oca", "##rdial", "in", "##far", "##ction", "nec", "##ess",
         "##itate", "##s", "immediate", "th", "##rom", "##bol", "##ytic", "therapy"],
        ["myocardial", "infarction", "nec", "##ess", "##itates", "immediate",
         "thrombolytic", "therapy"],
    ),
    (
        "aceclofenac tablet has lorazepam",
        ["ace", "##cl", "##of", "##ena", "##c", "tablet", "has", "lo", "##raz",
         "##ep", "##am"],
        ["acecl", "##ofenac", "tablet", "has", "lorazepam"],
    ),
    (
        "laparoscopic cholecystectomy minimizes postoperative pain",
        ["lap", "##aro", "##scopic", "cho", "##le", "##cy", "##ste", "##ct",
         "##omy", "minimize", "##s", "post", "##oper", "##ative", "pain"],
        ["laparoscopic", "cholecystectomy", "minimize", "##s", "postoperative",
         "pain"],
    ),
    (
        "antipyretic medications has Isoniazid to alleviate pyrexia",
        ["anti", "##py", "##ret", "##ic", "medications", "has", "iso", "##nia",
         "##zi", "##d", "to", "alleviate", "p", "##yre", "##xia"],
        ["antipyretic", "medications", "has", "isoniazid", "to", "alleviate",
         "pyrexia"],
    ),
    (
        "hyperglycemia predisposes neuropathy, retinopathy, and nephropathy",
        ["hyper", "##gly", "##ce", "##mia", "pre", "##dis", "##pose", "##s",
         "ne", "##uro", "##pathy", "re", "##tino", "##pathy", "and", "ne",
         "##ph", "##rop", "##athy"],
        ["hyperglycemia", "predis", "##pose", "##s", "neuropathy",
         "retinopathy", "and", "nephropathy"],
    ),
]

PUNCTUATION = list(".,;:()%/-'\"?!#&+=")

GENERAL_WORDS = """
a about acute adults after all also among analysis and are as assessed
associated at baseline based be between blood but by care case cases chronic
clinical cohort combined common compared control controls daily data days
demonstrated did disease dose double drug drugs during each effect effects
efficacy eight evaluated evidence factors female findings five followed
following for four from group groups had has have health higher hospital
however improvement improved in included including increased initial
intervention is it its lower major male management may mean measured men
method methods month months more most no not observed of on one or oral other
outcome outcomes over pain patient patients per period placebo present
primary prospective randomized range rate rates ratio received reduced
reduction remained reported respectively results risk safety score scores
serum seven severe show showed significant significantly six standard studies
study subjects surgery symptoms than that the therapy there these this three
to total treated treatment trial trials two units until upper use used versus
was we week weeks were when which who with within without women years
immediate medications tablet alleviate minimize colon end ref electro
"""

# word-initial pieces and continuations required by the comparison rows
ROW_INITIALS = """
ib gas ace pre ob ci ang am my in nec th lo lap cho post anti iso hyper ne re
p pulmonary alleviate
"""

ROW_CONTINUATIONS = """
up ro fen tro es op ha ge al lux card io gram os co py tam ino ph en d nis one
st ru ctive rr hosis pl ast y ox ici llin oca rdial far ction ess itate s rom am
bol ytic cl of ena c raz ep aro scopic le cy ste ct omy oper ative ret ic nia
zi yre xia gly ce mia dis pose uro pathy tino rop athy
"""

# whole or partial medical tokens carried by the domain vocabulary
DOMAIN_ROW_TOKENS = """
ibuprofen gastroesophageal reflux electrocardiogram endoscopy acet
##aminophen prednisone obstructive cirrhosis angioplasty colonoscopy
amoxicillin myocardial infarction ##itates thrombolytic acecl ##ofenac
lorazepam laparoscopic cholecystectomy postoperative antipyretic isoniazid
pyrexia hyperglycemia predis neuropathy retinopathy nephropathy
"""

EXTRA_DOMAIN_TERMS = """
hypertension tachycardia bradycardia pneumonia anticoagulant metformin
atorvastatin lisinopril omeprazole azithromycin corticosteroid bronchoscopy
hysterectomy appendectomy arrhythmia ischemia stenosis thrombosis embolism
nephritis hepatitis gastritis dyslipidemia angiography echocardiogram
osteoporosis bronchodilator nephropathy hemodialysis pancreatitis
"""


def _words(block: str) -> list[str]:
    return block.split()


def build_base_vocab() -> Vocabulary:
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    digits = [str(d) for d in range(10)]
    tokens: dict[str, None] = dict.fromkeys(SPECIAL_TOKENS)
    for t in letters + digits + PUNCTUATION:
        tokens[t] = None
    for t in letters + digits:
        tokens["##" + t] = None
    for t in sorted(set(_words(GENERAL_WORDS))):
        tokens[t] = None
    for t in _words(ROW_INITIALS):
        tokens[t] = None
    for t in _words(ROW_CONTINUATIONS):
        tokens["##" + t] = None
    return Vocabulary(list(tokens))


def build_domain_vocab() -> Vocabulary:
    tokens: dict[str, None] = dict.fromkeys(SPECIAL_TOKENS)
    for t in _words(DOMAIN_ROW_TOKENS):
        tokens[t] = None
    for t in sorted(set(_words(EXTRA_DOMAIN_TERMS))):
        tokens[t] = None
    return Vocabulary(list(tokens))


def verify_rows(base: TokenizerModel, merged: TokenizerModel) -> None:
    def visible(model: TokenizerModel, text: str) -> list[str]:
        toks = model.tokens(text)
        return [t for t in toks if any(ch.isalnum() for ch in t)]

    failures = []
    for term, expect_base, expect_merged in COMPARISON_ROWS:
        got_base = visible(base, term)
        got_merged = visible(merged, term)
        if got_base != expect_base:
            failures.append(f"base    {term!r}: {got_base} != {expect_base}")
        if got_merged != expect_merged:
            failures.append(f"merged  {term!r}: {got_merged} != {expect_merged}")
    if failures:
        raise SystemExit("fixture verification failed:\n" + "\n".join(failures))


SENTENCE_TEMPLATES = [
    "this {kind} study evaluated {term1} in {n} patients with {term2} .",
    "treatment with {term1} significantly reduced symptoms compared with placebo .",
    "patients received {term1} daily for {n} weeks during the trial .",
    "{term1} was associated with improved outcomes in patients with {term2} .",
    "we assessed the efficacy of {term1} following {term2} in a randomized cohort .",
    "the incidence of {term1} was higher in the control group than in the treated group .",
    "baseline scores improved significantly after {term1} therapy .",
    "adverse effects included {term1} and {term2} in a minority of subjects .",
    "follow up at {n} months showed no recurrence of {term1} .",
    "serum markers were measured before and after {term1} .",
    "{term1} remained the primary outcome over the {n} week period .",
    "management of {term1} included {term2} and standard care .",
]

STUDY_KINDS = ["retrospective", "prospective", "randomized", "double blind", "cohort"]


def build_mini_corpus(seed: int = 20240815, n_docs: int = 200) -> list[dict]:
    rng = np.random.default_rng(seed)
    terms = sorted(set(_words(DOMAIN_ROW_TOKENS) + _words(EXTRA_DOMAIN_TERMS)))
    terms = [t for t in terms if not t.startswith("##")]
    # weight the headline drug so the trainer example has plenty of signal
    weighted = terms + ["ibuprofen"] * 6 + ["endoscopy"] * 4 + ["amoxicillin"] * 4
    docs = []
    for i in range(n_docs):
        n_sentences = int(rng.integers(4, 9))
        sentences = []
        for _ in range(n_sentences):
            tpl = SENTENCE_TEMPLATES[int(rng.integers(len(SENTENCE_TEMPLATES)))]
            sentences.append(
                tpl.format(
                    kind=STUDY_KINDS[int(rng.integers(len(STUDY_KINDS)))],
                    term1=weighted[int(rng.integers(len(weighted)))],
                    term2=weighted[int(rng.integers(len(weighted)))],
                    n=int(rng.integers(2, 52)),
                )
            )
        docs.append({"id": f"abs-{i:04d}", "text": " ".join(sentences)})
    return docs


def main() -> None:
    base_vocab = build_base_vocab()
    domain_vocab = build_domain_vocab()
    merged_vocab = merge_vocabularies(base_vocab, domain_vocab)

    base = TokenizerModel(base_vocab)
    merged = TokenizerModel(merged_vocab)
    verify_rows(base, merged)

    ASSETS.mkdir(parents=True, exist_ok=True)
    base_vocab.save(ASSETS / "vocab_base.txt")
    domain_vocab.save(ASSETS / "vocab_domain.txt")
    merged_vocab.save(ASSETS / "vocab_merged.txt")

    docs = build_mini_corpus()
    with open(ASSETS / "mini_medical_abstracts.jsonl", "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")

    from medeir.tokenizer import tokenizer_compare

    report = tokenizer_compare(base, merged, [d["text"] for d in docs], "mini-medical")
    print(f"vocab sizes: base={len(base_vocab)} domain={len(domain_vocab)} "
          f"merged={len(merged_vocab)}")
    print(f"mini corpus: {len(docs)} docs, reduction {report.reduction_pct:.1f}% "
          f"(fertility {report.fertility_base:.3f} -> {report.fertility_merged:.3f})")


if __name__ == "__main__":
    main()

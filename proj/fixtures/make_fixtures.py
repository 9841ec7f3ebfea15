#!/usr/bin/env python3
"""Regenerates the bundled fixtures (kg_mini, vocab, cohort_mini, scenario, ...).

Output is deterministic; rerunning overwrites the checked-in files with
identical content.
"""
import json
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent

NODES = [
    # (id, type, name, source)
    ("disease:pneumonia", "disease", "Pneumonia", "MONDO"),
    ("disease:essential_hypertension", "disease", "Essential hypertension", "MONDO"),
    ("disease:copd", "disease", "Chronic obstructive pulmonary disease", "MONDO"),
    ("disease:ckd", "disease", "Chronic kidney disease", "MONDO"),
    ("disease:t2d", "disease", "Type 2 diabetes mellitus", "MONDO"),
    ("disease:obesity", "disease", "Obesity", "MONDO"),
    ("disease:chf", "disease", "Congestive heart failure", "MONDO"),
    ("disease:afib", "disease", "Atrial fibrillation", "MONDO"),
    ("disease:sepsis", "disease", "Sepsis", "MONDO"),
    ("disease:influenza", "disease", "Influenza", "MONDO"),
    ("disease:asthma", "disease", "Asthma", "MONDO"),
    ("disease:hyperlipidemia", "disease", "Hyperlipidemia", "MONDO"),
    ("disease:shock", "disease", "Shock", "MONDO"),
    ("phenotype:fever", "effect/phenotype", "Fever", "HPO"),
    ("phenotype:cough", "effect/phenotype", "Cough", "HPO"),
    ("phenotype:dyspnea", "effect/phenotype", "Dyspnea", "HPO"),
    ("phenotype:edema", "effect/phenotype", "Edema", "HPO"),
    ("phenotype:proteinuria", "effect/phenotype", "Proteinuria", "HPO"),
    ("phenotype:tachycardia", "effect/phenotype", "Tachycardia", "HPO"),
    ("phenotype:hypoxemia", "effect/phenotype", "Hypoxemia", "HPO"),
    ("gene:IL6", "gene/protein", "IL6", "NCBI"),
    ("gene:TNF", "gene/protein", "TNF", "NCBI"),
    ("gene:ACE", "gene/protein", "ACE", "NCBI"),
    ("gene:AGT", "gene/protein", "AGT", "NCBI"),
    ("gene:NOS3", "gene/protein", "NOS3", "NCBI"),
    ("gene:SFTPC", "gene/protein", "SFTPC", "NCBI"),
    ("gene:APOE", "gene/protein", "APOE", "NCBI"),
    ("gene:INS", "gene/protein", "INS", "NCBI"),
    ("gene:REN", "gene/protein", "REN", "NCBI"),
    ("gene:CRP", "gene/protein", "CRP", "NCBI"),
    ("drug:amoxicillin", "drug", "Amoxicillin", "DrugBank"),
    ("drug:lisinopril", "drug", "Lisinopril", "DrugBank"),
    ("drug:metformin", "drug", "Metformin", "DrugBank"),
    ("drug:albuterol", "drug", "Albuterol", "DrugBank"),
    ("drug:furosemide", "drug", "Furosemide", "DrugBank"),
    ("drug:atorvastatin", "drug", "Atorvastatin", "DrugBank"),
    ("exposure:tobacco", "exposure", "Tobacco smoke", "CTD"),
    ("anatomy:lung", "anatomy", "Lung", "UBERON"),
    ("anatomy:kidney", "anatomy", "Kidney", "UBERON"),
    ("anatomy:lower_limb", "anatomy", "Lower limb", "UBERON"),
]

REL = {
    "phenotype": ("disease_phenotype_positive", "phenotype present"),
    "gene": ("disease_protein", "associated with"),
    "indication": ("indication", "indication"),
    "risk": ("disease_disease", "parent-child"),
    "exposure": ("exposure_disease", "linked to"),
    "anatomy": ("anatomy_protein_present", "expression present"),
    "ppi": ("protein_protein", "ppi"),
    "drug_protein": ("drug_protein", "target"),
    "side_effect": ("drug_effect", "side effect"),
}

# Hand-curated core: (src, dst, relation key).
CORE = [
    ("disease:pneumonia", "phenotype:fever", "phenotype"),
    ("disease:pneumonia", "phenotype:cough", "phenotype"),
    ("disease:pneumonia", "phenotype:dyspnea", "phenotype"),
    ("disease:pneumonia", "phenotype:hypoxemia", "phenotype"),
    ("disease:pneumonia", "gene:IL6", "gene"),
    ("disease:pneumonia", "gene:SFTPC", "gene"),
    ("disease:pneumonia", "gene:CRP", "gene"),
    ("drug:amoxicillin", "disease:pneumonia", "indication"),
    ("disease:influenza", "disease:pneumonia", "risk"),
    ("disease:influenza", "phenotype:fever", "phenotype"),
    ("disease:influenza", "phenotype:cough", "phenotype"),
    ("disease:influenza", "gene:IL6", "gene"),
    ("disease:copd", "phenotype:dyspnea", "phenotype"),
    ("disease:copd", "phenotype:cough", "phenotype"),
    ("disease:copd", "phenotype:hypoxemia", "phenotype"),
    ("disease:copd", "gene:SFTPC", "gene"),
    ("exposure:tobacco", "disease:copd", "exposure"),
    ("exposure:tobacco", "disease:pneumonia", "exposure"),
    ("drug:albuterol", "disease:copd", "indication"),
    ("drug:albuterol", "disease:asthma", "indication"),
    ("disease:asthma", "phenotype:dyspnea", "phenotype"),
    ("disease:asthma", "phenotype:cough", "phenotype"),
    ("disease:asthma", "gene:IL6", "gene"),
    ("disease:sepsis", "phenotype:fever", "phenotype"),
    ("disease:sepsis", "phenotype:tachycardia", "phenotype"),
    ("disease:sepsis", "gene:TNF", "gene"),
    ("disease:sepsis", "gene:IL6", "gene"),
    ("disease:sepsis", "disease:shock", "risk"),
    ("disease:shock", "phenotype:tachycardia", "phenotype"),
    ("gene:TNF", "gene:IL6", "ppi"),
    ("gene:IL6", "gene:CRP", "ppi"),
    ("gene:SFTPC", "anatomy:lung", "anatomy"),
    ("anatomy:lung", "gene:SFTPC", "anatomy"),
    ("disease:essential_hypertension", "gene:ACE", "gene"),
    ("disease:essential_hypertension", "gene:AGT", "gene"),
    ("disease:essential_hypertension", "gene:NOS3", "gene"),
    ("disease:essential_hypertension", "gene:REN", "gene"),
    ("disease:essential_hypertension", "phenotype:proteinuria", "phenotype"),
    ("drug:lisinopril", "disease:essential_hypertension", "indication"),
    ("drug:lisinopril", "gene:ACE", "drug_protein"),
    ("drug:lisinopril", "disease:chf", "indication"),
    ("drug:furosemide", "disease:essential_hypertension", "indication"),
    ("drug:furosemide", "disease:chf", "indication"),
    ("disease:ckd", "phenotype:proteinuria", "phenotype"),
    ("disease:ckd", "gene:REN", "gene"),
    ("disease:ckd", "gene:AGT", "gene"),
    ("disease:ckd", "anatomy:kidney", "anatomy"),
    ("gene:REN", "anatomy:kidney", "anatomy"),
    ("gene:REN", "gene:AGT", "ppi"),
    ("gene:AGT", "gene:ACE", "ppi"),
    ("disease:obesity", "disease:t2d", "risk"),
    ("disease:obesity", "gene:APOE", "gene"),
    ("disease:obesity", "gene:INS", "gene"),
    ("disease:t2d", "gene:INS", "gene"),
    ("disease:t2d", "disease:ckd", "risk"),
    ("drug:metformin", "disease:t2d", "indication"),
    ("drug:metformin", "gene:INS", "drug_protein"),
    ("disease:hyperlipidemia", "gene:APOE", "gene"),
    ("drug:atorvastatin", "disease:hyperlipidemia", "indication"),
    ("drug:atorvastatin", "gene:APOE", "drug_protein"),
    ("disease:chf", "phenotype:dyspnea", "phenotype"),
    ("disease:chf", "gene:NOS3", "gene"),
    ("disease:chf", "gene:ACE", "gene"),
    ("disease:afib", "disease:chf", "risk"),
    ("disease:afib", "phenotype:tachycardia", "phenotype"),
    ("disease:afib", "gene:NOS3", "gene"),
    ("gene:NOS3", "gene:ACE", "ppi"),
    ("phenotype:edema", "anatomy:lower_limb", "anatomy"),
    # Parallel edges: same pair, distinct relation.
    ("disease:essential_hypertension", "gene:ACE", "risk"),
    ("disease:pneumonia", "gene:IL6", "ppi"),
]

# Edema and Lower limb form a component with no route to any target disease.
ISOLATED = {"phenotype:edema", "anatomy:lower_limb"}

EDGE_TARGET = 96


def build_edges():
    rng = random.Random(20250117)
    edges = []
    keys = set()
    for src, dst, rel in CORE:
        relation, display = REL[rel]
        key = (src, dst, relation)
        assert key not in keys, key
        keys.add(key)
        edges.append((src, dst, relation, display))
    connected = sorted(n[0] for n in NODES if n[0] not in ISOLATED)
    extra_relations = ["ppi", "side_effect", "risk", "anatomy"]
    while len(edges) < EDGE_TARGET:
        src, dst = rng.sample(connected, 2)
        relation, display = REL[rng.choice(extra_relations)]
        key = (src, dst, relation)
        if key in keys:
            continue
        keys.add(key)
        edges.append((src, dst, relation, display))
    return edges


VOCAB = [
    ("401.9", "Essential hypertension"),
    ("486", "Pneumonia, organism unspecified"),
    ("481", "Pneumococcal pneumonia"),
    ("496", "Chronic  obstructive pulmonary disease"),
    ("585.9", "Chronic kidney disease, unspecified"),
    ("250.00", "type 2 diabetes mellitus"),
    ("278.00", "Obesity, unspecified"),
    ("428.0", "Congestive heart failure, unspecified"),
    ("427.31", "Atrial fibrillation"),
    ("038.9", "Unspecified septicemia"),
    ("305.1", "Tobacco use disorder"),
    ("272.4", "Hyperlipidemia, other and unspecified"),
    ("780.60", "Fever, unspecified"),
    ("786.2", "Cough"),
    ("786.05", "Shortness of breath"),
    ("493.90", "Asthma, unspecified"),
    ("487.1", "Influenza with other respiratory manifestations"),
    ("V58.61", "Long-term (current) use of anticoagulants"),
    ("782.3", "Edema"),
    ("995.91", "Sepsis"),
]

# Stage-2 steering for the mock embedder: description -> weighted blend of
# node names. A single weight-1 entry yields an identical vector.
EMBEDDING_ALIASES = {
    "Pneumonia, organism unspecified": {"Pneumonia": 1.0},
    "Chronic kidney disease, unspecified": {"Chronic kidney disease": 1.0},
    "Obesity, unspecified": {"Obesity": 1.0},
    "Congestive heart failure, unspecified": {"Congestive heart failure": 1.0},
    "Unspecified septicemia": {"Shock": 1.0, "Sepsis": 0.5},
    "Tobacco use disorder": {"Tobacco smoke": 1.0},
    "Hyperlipidemia, other and unspecified": {"Hyperlipidemia": 1.0},
    "Fever, unspecified": {"Fever": 1.0},
    "Shortness of breath": {"Dyspnea": 1.0},
    "Asthma, unspecified": {"Asthma": 1.0},
    "Influenza with other respiratory manifestations": {"Influenza": 1.0},
}

LABEL_MAP = [
    ("486", "pneumonia"),
    ("481", "pneumonia"),
    ("401.9", "essential_hypertension"),
    ("585.9", "chronic_kidney_disease"),
]

OUT_OF_VOCAB = ["999.9", "E849.7", "V45.81"]


def build_cohort():
    rng = random.Random(31337)
    codes = [c for c, _ in VOCAB]
    patients = []
    for p in range(30):
        n_visits = rng.choice([1, 2, 2, 3, 3, 4])
        visits = []
        for seq in range(n_visits):
            chosen = sorted(rng.sample(codes, rng.randint(2, 6)))
            if rng.random() < 0.2:
                chosen.append(rng.choice(OUT_OF_VOCAB))
            visits.append({"seq": seq, "codes": chosen})
        patients.append({"patient_id": f"P{p:03d}", "visits": visits})
    return patients


SCENARIO_RULES = [
    # Stage-3 entity validation.
    {"tag": "entity_select", "contains": "ICD-9 description: Unspecified septicemia",
     "reply": "{\"verdict\":\"revise\",\"node_id\":\"disease:sepsis\"}"},
    {"tag": "entity_select", "contains": "ICD-9 description: Hyperlipidemia, other and unspecified",
     "reply": "{\"verdict\":\"reject\",\"reason\":\"too unspecific\"}"},
    {"tag": "entity_select", "contains": "ICD-9 description: Influenza with other respiratory manifestations",
     "reply": "{\"verdict\":\"revise\",\"node_id\":\"disease:avian_influenza\"}"},
    {"tag": "entity_select", "reply": "{\"verdict\":\"confirm\"}"},
    # Relevance node selection.
    {"tag": "node_select", "contains": "Target disease: Pneumonia (disease:pneumonia)",
     "reply": "[\"phenotype:fever\", \"phenotype:cough\", \"disease:pneumonia\", \"phenotype:dyspnea\", "
              "\"disease:copd\", \"disease:influenza\", \"exposure:tobacco\", \"disease:asthma\", "
              "\"disease:sepsis\", \"disease:chf\", \"disease:ckd\"]"},
    {"tag": "node_select", "contains": "Target disease: Essential hypertension (disease:essential_hypertension)",
     "reply": "Most relevant: [\"Chronic kidney disease\", \"Obesity\", \"Type 2 diabetes mellitus\", "
              "\"disease:chf\", \"Tobacco smoke\", \"Atrial fibrillation\", \"Edema\"]"},
    # Path pruning.
    {"tag": "path_select", "contains": "Target disease: Pneumonia",
     "reply": "Selected paths: [2, 1, 40, 2, 5, 6, 3]"},
    {"tag": "path_select", "contains": "Target disease: Essential hypertension",
     "reply": "none of these look clinically relevant"},
    # CoT generation: garbage, scripted mismatch, then label-following replies.
    {"tag": "cot_gen", "contains": "Tobacco use disorder",
     "reply": "The record is ambiguous and I would rather defer to the attending team."},
    {"tag": "cot_gen", "contains": ["Atrial fibrillation", "Ground-truth next-visit outcome: Yes"],
     "reply": "Step 1: Atrial fibrillation is present but is only weakly linked to the target.\n"
              "Step 2: The KG paths do not support a near-term onset.\nConclusion: No"},
    {"tag": "cot_gen", "contains": "Ground-truth next-visit outcome: Yes",
     "reply": "Step 1: The index visit contains findings that the KG links to the target disease.\n"
              "Step 2: These mechanisms make recurrence at the next visit likely.\nConclusion: Yes"},
    {"tag": "cot_gen", "contains": "Ground-truth next-visit outcome: No",
     "reply": "Step 1: Few of the relevant KG nodes are expressed at the index visit.\n"
              "Step 2: The remaining evidence is indirect.\nConclusion: No."},
]


def labels_for(visit):
    out = {"pneumonia": 0, "essential_hypertension": 0, "chronic_kidney_disease": 0}
    lm = {}
    for code, disease in LABEL_MAP:
        lm.setdefault(code, []).append(disease)
    for code in visit["codes"]:
        for d in lm.get(code, []):
            out[d] = 1
    return out


def build_predictions(patients):
    rng = random.Random(99)
    lines = []
    for patient in patients:
        visits = patient["visits"]
        for t in range(len(visits) - 1):
            case_id = f"{patient['patient_id']}:{visits[t]['seq']}"
            labels = labels_for(visits[t + 1])
            for disease in ("chronic_kidney_disease", "essential_hypertension", "pneumonia"):
                y = labels[disease]
                p = min(1.0, max(0.0, 0.35 + 0.3 * y + rng.uniform(-0.3, 0.3)))
                lines.append({"case_id": case_id, "disease_id": disease, "probability": round(p, 4)})
    return lines


def study_outputs():
    rng = random.Random(5)
    sys1, sys2 = [], []
    for i in range(6):
        unit = f"u{i:02d}"
        summary = f"Index visit {i}: hypertension, chronic kidney disease; target: Essential hypertension"
        truth = rng.randint(0, 1)
        sys1.append({"unit_id": unit, "input_summary": summary, "ground_truth": truth,
                     "prediction": "yes" if truth else "no",
                     "trace": "CKD shares renin-angiotensin pathway genes (REN, AGT) with the target.\n"
                              f"Conclusion: {'Yes' if truth else 'No'}"})
        sys2.append({"unit_id": unit, "input_summary": summary, "ground_truth": truth,
                     "prediction": "yes",
                     "trace": "Many codes are present so the disease is likely.\nConclusion: Yes"})
    return sys1, sys2


def write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(row) + "\n")


def write_jsonl(path, items):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for item in items:
            f.write(json.dumps(item, ensure_ascii=False) + "\n")


def main():
    assert len(NODES) == 40, len(NODES)
    (HERE / "kg_mini").mkdir(exist_ok=True)
    write_tsv(HERE / "kg_mini" / "nodes.tsv", ["node_id", "node_type", "node_name", "source"], NODES)
    edges = build_edges()
    write_tsv(HERE / "kg_mini" / "edges.tsv", ["src_id", "dst_id", "relation", "display_relation"], edges)
    write_tsv(HERE / "vocab.tsv", ["code", "description"], VOCAB)
    write_tsv(HERE / "label_map.tsv", ["code", "disease_id"], LABEL_MAP)
    patients = build_cohort()
    write_jsonl(HERE / "cohort_mini.jsonl", patients)
    write_jsonl(HERE / "predictions.jsonl", build_predictions(patients))
    sys1, sys2 = study_outputs()
    write_jsonl(HERE / "study_system1.jsonl", sys1)
    write_jsonl(HERE / "study_system2.jsonl", sys2)

    scenario = {"embedding_dim": 32, "seed": 7, "embedding_aliases": EMBEDDING_ALIASES,
                "rules": SCENARIO_RULES, "default_reply": None}
    (HERE / "scenario.json").write_text(json.dumps(scenario, indent=2) + "\n", encoding="utf-8")

    manifest = {
        "kg_mini": {"nodes": len(NODES), "edges": len(edges)},
        "vocab": len(VOCAB),
        "cohort_mini": {"patients": len(patients), "visits": sum(len(p["visits"]) for p in patients),
                        "cases": sum(max(0, len(p["visits"]) - 1) for p in patients)},
    }
    (HERE / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()

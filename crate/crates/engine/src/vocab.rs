//! Concepts used by the synthetic database. Ids follow the public OMOP
//! standard vocabulary where one exists.

use cohort_core::domain::Domain;
use cohort_core::normalize::ConceptRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConceptRow {
    pub concept_id: i64,
    pub name: &'static str,
    pub domain_id: &'static str,
    pub vocabulary_id: &'static str,
    pub synonyms: &'static [&'static str],
}

const fn c(
    concept_id: i64,
    name: &'static str,
    domain_id: &'static str,
    vocabulary_id: &'static str,
    synonyms: &'static [&'static str],
) -> ConceptRow {
    ConceptRow {
        concept_id,
        name,
        domain_id,
        vocabulary_id,
        synonyms,
    }
}

pub const MALE: i64 = 8507;
pub const FEMALE: i64 = 8532;

pub const T2DM: i64 = 201826;
pub const T1DM: i64 = 201254;
pub const HYPERTENSION: i64 = 316866;
pub const CKD: i64 = 46271022;
pub const MI: i64 = 4329847;
pub const COPD: i64 = 255573;
pub const ASTHMA: i64 = 317009;
pub const HYPERLIPIDEMIA: i64 = 432867;
pub const HEART_FAILURE: i64 = 4229440;
pub const CANCER: i64 = 443392;
pub const DEPRESSION: i64 = 440383;
pub const AFIB: i64 = 313217;

pub const METFORMIN: i64 = 1503297;
pub const INSULIN: i64 = 1596977;
pub const GLIPIZIDE: i64 = 1560171;
pub const SITAGLIPTIN: i64 = 1580747;
pub const LIRAGLUTIDE: i64 = 40170911;
pub const LISINOPRIL: i64 = 1308216;
pub const HCTZ: i64 = 974166;
pub const ATORVASTATIN: i64 = 1545958;
pub const ACETAMINOPHEN: i64 = 1125315;
pub const IBUPROFEN: i64 = 1177480;
pub const ASPIRIN: i64 = 1112807;
pub const WARFARIN: i64 = 1310149;

pub const HEMODIALYSIS: i64 = 4146536;
pub const PCI: i64 = 4216130;
pub const COLONOSCOPY: i64 = 4249893;
pub const ECG: i64 = 4301415;

pub const HBA1C: i64 = 3004410;
pub const CREATININE: i64 = 3016723;
pub const BODY_WEIGHT: i64 = 3025315;
pub const BMI: i64 = 3038553;

pub const TOBACCO: i64 = 4298794;

pub const INPATIENT: i64 = 9201;
pub const OUTPATIENT: i64 = 9202;
pub const EMERGENCY: i64 = 9203;

pub const CONCEPTS: &[ConceptRow] = &[
    c(MALE, "MALE", "Gender", "Gender", &[]),
    c(FEMALE, "FEMALE", "Gender", "Gender", &[]),
    c(
        T2DM,
        "Type 2 diabetes mellitus",
        "Condition",
        "SNOMED",
        &[
            "type 2 diabetes",
            "T2DM",
            "non-insulin-dependent diabetes mellitus",
        ],
    ),
    c(
        T1DM,
        "Type 1 diabetes mellitus",
        "Condition",
        "SNOMED",
        &[
            "type 1 diabetes",
            "T1DM",
            "insulin-dependent diabetes mellitus",
        ],
    ),
    c(
        HYPERTENSION,
        "Hypertensive disorder",
        "Condition",
        "SNOMED",
        &["hypertension", "high blood pressure"],
    ),
    c(
        CKD,
        "Chronic kidney disease",
        "Condition",
        "SNOMED",
        &["CKD", "chronic renal disease"],
    ),
    c(
        MI,
        "Myocardial infarction",
        "Condition",
        "SNOMED",
        &["heart attack", "MI"],
    ),
    c(
        COPD,
        "Chronic obstructive lung disease",
        "Condition",
        "SNOMED",
        &["COPD", "chronic obstructive pulmonary disease"],
    ),
    c(ASTHMA, "Asthma", "Condition", "SNOMED", &[]),
    c(
        HYPERLIPIDEMIA,
        "Hyperlipidemia",
        "Condition",
        "SNOMED",
        &["high cholesterol"],
    ),
    c(
        HEART_FAILURE,
        "Chronic congestive heart failure",
        "Condition",
        "SNOMED",
        &["heart failure", "CHF"],
    ),
    c(
        CANCER,
        "Malignant neoplastic disease",
        "Condition",
        "SNOMED",
        &["cancer", "malignancy"],
    ),
    c(
        DEPRESSION,
        "Depressive disorder",
        "Condition",
        "SNOMED",
        &["depression"],
    ),
    c(
        AFIB,
        "Atrial fibrillation",
        "Condition",
        "SNOMED",
        &["AF", "afib"],
    ),
    c(METFORMIN, "metformin", "Drug", "RxNorm", &[]),
    c(
        INSULIN,
        "insulin, regular, human",
        "Drug",
        "RxNorm",
        &["insulin"],
    ),
    c(GLIPIZIDE, "glipizide", "Drug", "RxNorm", &[]),
    c(SITAGLIPTIN, "sitagliptin", "Drug", "RxNorm", &[]),
    c(LIRAGLUTIDE, "liraglutide", "Drug", "RxNorm", &[]),
    c(LISINOPRIL, "lisinopril", "Drug", "RxNorm", &[]),
    c(HCTZ, "hydrochlorothiazide", "Drug", "RxNorm", &["HCTZ"]),
    c(ATORVASTATIN, "atorvastatin", "Drug", "RxNorm", &[]),
    c(
        ACETAMINOPHEN,
        "acetaminophen",
        "Drug",
        "RxNorm",
        &["paracetamol"],
    ),
    c(IBUPROFEN, "ibuprofen", "Drug", "RxNorm", &[]),
    c(
        ASPIRIN,
        "aspirin",
        "Drug",
        "RxNorm",
        &["acetylsalicylic acid"],
    ),
    c(WARFARIN, "warfarin", "Drug", "RxNorm", &[]),
    c(
        HEMODIALYSIS,
        "Hemodialysis",
        "Procedure",
        "SNOMED",
        &["dialysis"],
    ),
    c(
        PCI,
        "Percutaneous coronary intervention",
        "Procedure",
        "SNOMED",
        &["PCI", "coronary angioplasty"],
    ),
    c(COLONOSCOPY, "Colonoscopy", "Procedure", "SNOMED", &[]),
    c(
        ECG,
        "Electrocardiographic procedure",
        "Procedure",
        "SNOMED",
        &["ECG", "electrocardiogram"],
    ),
    c(
        HBA1C,
        "Hemoglobin A1c/Hemoglobin.total in Blood",
        "Measurement",
        "LOINC",
        &["HbA1c", "glycated hemoglobin", "hemoglobin A1c"],
    ),
    c(
        CREATININE,
        "Creatinine [Mass/volume] in Serum or Plasma",
        "Measurement",
        "LOINC",
        &["serum creatinine", "creatinine"],
    ),
    c(
        BODY_WEIGHT,
        "Body weight",
        "Measurement",
        "LOINC",
        &["weight"],
    ),
    c(
        BMI,
        "Body mass index (BMI) [Ratio]",
        "Measurement",
        "LOINC",
        &["BMI", "body mass index"],
    ),
    c(
        TOBACCO,
        "Tobacco user",
        "Observation",
        "SNOMED",
        &["smoker", "current smoker"],
    ),
    c(
        INPATIENT,
        "Inpatient Visit",
        "Visit",
        "Visit",
        &["inpatient", "hospitalization"],
    ),
    c(
        OUTPATIENT,
        "Outpatient Visit",
        "Visit",
        "Visit",
        &["outpatient", "office visit"],
    ),
    c(
        EMERGENCY,
        "Emergency Room Visit",
        "Visit",
        "Visit",
        &["emergency room", "ER visit"],
    ),
];

/// Concepts whose domain can appear in placeholders.
pub fn concept_records() -> Vec<ConceptRecord> {
    CONCEPTS
        .iter()
        .filter_map(|r| {
            let domain = Domain::from_omop_domain_id(r.domain_id)?;
            Some(
                ConceptRecord::new(r.concept_id, r.name, domain, r.vocabulary_id)
                    .with_synonyms(r.synonyms.iter().copied()),
            )
        })
        .collect()
}

/// Tab-separated CONCEPT export of [`CONCEPTS`].
pub fn concept_tsv() -> String {
    let mut s = String::from("concept_id\tconcept_name\tdomain_id\tvocabulary_id\n");
    for r in CONCEPTS {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.concept_id, r.name, r.domain_id, r.vocabulary_id
        ));
    }
    s
}

/// Tab-separated CONCEPT_SYNONYM export of [`CONCEPTS`].
pub fn synonym_tsv() -> String {
    let mut s = String::from("concept_id\tconcept_synonym_name\n");
    for r in CONCEPTS {
        for syn in r.synonyms {
            s.push_str(&format!("{}\t{}\n", r.concept_id, syn));
        }
    }
    s
}

/// Dictionary tagger over every concept name and synonym.
pub fn dictionary_detector() -> cohort_core::entity::DictionaryDetector {
    let records = concept_records();
    cohort_core::entity::DictionaryDetector::new(records.iter().flat_map(|r| {
        std::iter::once(r.name.clone())
            .chain(r.synonyms.iter().cloned())
            .map(move |t| (t, r.domain))
    }))
}

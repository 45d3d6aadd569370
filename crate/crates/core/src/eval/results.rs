//! Results persistence: nested per-item predictions plus a flat summary.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::PromptMode;
use crate::error::{Error, Result};
use crate::eval::{
    pairwise_categories, triplet_categories, AlphaCoverage, PairwiseCategories, Prediction,
    QuestionType, TripletCategories, Verdict,
};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub prompt: String,
    pub response: String,
    pub verdict: Verdict,
}

/// Nested per-item, per-mode, per-type predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub seed: u64,
    /// Unix seconds; the one field excluded from determinism comparisons.
    pub generated_at: u64,
    pub items: BTreeMap<String, BTreeMap<String, BTreeMap<String, PredictionRecord>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub correct: usize,
    /// Items with defined verdicts (the accuracy denominator).
    pub counted: usize,
    pub undefined: usize,
    pub accuracy: f64,
}

/// Flat summary with per-mode/per-type accuracies and the category tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub seed: u64,
    pub generated_at: u64,
    pub judge: String,
    /// Keyed `mode/qtype`.
    pub accuracy: BTreeMap<String, AccuracyCell>,
    /// Keyed `qtype/family/modeA-vs-modeB`.
    pub pairwise: BTreeMap<String, PairwiseCategories>,
    /// Keyed `qtype/family`.
    pub triplet: BTreeMap<String, TripletCategories>,
    /// Per mode: distribution of correct counts out of the three question
    /// types, over items with all three defined.
    pub correct_count_distribution: BTreeMap<String, BTreeMap<usize, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaCoverage>,
}

/// The three bias families, each with its (plus, minus) modes.
pub const FAMILIES: [(&str, PromptMode, PromptMode); 3] = [
    ("cb", PromptMode::CbIncorrect, PromptMode::CbCorrect),
    ("stance", PromptMode::Support, PromptMode::Challenge),
    ("negation", PromptMode::Affirm, PromptMode::Negate),
];

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Builds the flat summary from scored predictions.
pub fn build_summary(
    predictions: &[Prediction],
    alpha: Option<AlphaCoverage>,
    config_fingerprint: &str,
    seed: u64,
    judge: &str,
) -> Result<SummaryFile> {
    let mut item_ids: Vec<String> = predictions.iter().map(|p| p.item_id.clone()).collect();
    item_ids.sort();
    item_ids.dedup();
    let lookup = |id: &str, mode: PromptMode, qt: QuestionType| -> Option<&Prediction> {
        predictions
            .iter()
            .find(|p| p.item_id == id && p.mode == mode && p.question_type == qt)
    };
    let defined = |p: Option<&Prediction>| -> Option<bool> {
        match p {
            Some(p) => match p.verdict {
                Verdict::Correct => Some(true),
                Verdict::Incorrect => Some(false),
                Verdict::Undefined => None,
            },
            None => None,
        }
    };

    let mut accuracy = BTreeMap::new();
    for mode in PromptMode::ALL {
        for qt in QuestionType::ALL {
            let subset: Vec<&Prediction> = predictions
                .iter()
                .filter(|p| p.mode == mode && p.question_type == qt)
                .collect();
            if subset.is_empty() {
                continue;
            }
            let undefined = subset
                .iter()
                .filter(|p| p.verdict == Verdict::Undefined)
                .count();
            let counted = subset.len() - undefined;
            let correct = subset
                .iter()
                .filter(|p| p.verdict == Verdict::Correct)
                .count();
            accuracy.insert(
                format!("{}/{}", mode.key(), qt.key()),
                AccuracyCell {
                    correct,
                    counted,
                    undefined,
                    accuracy: if counted == 0 {
                        0.0
                    } else {
                        correct as f64 / counted as f64
                    },
                },
            );
        }
    }

    let mut pairwise = BTreeMap::new();
    let mut triplet = BTreeMap::new();
    for qt in QuestionType::ALL {
        for (family, plus, minus) in FAMILIES {
            let collect = |mode: PromptMode| -> Vec<Option<bool>> {
                item_ids
                    .iter()
                    .map(|id| defined(lookup(id, mode, qt)))
                    .collect()
            };
            let neutral = collect(PromptMode::Neutral);
            let plus_v = collect(plus);
            let minus_v = collect(minus);
            let pairs = [
                (PromptMode::Neutral, plus, &neutral, &plus_v),
                (PromptMode::Neutral, minus, &neutral, &minus_v),
                (plus, minus, &plus_v, &minus_v),
            ];
            for (ma, mb, va, vb) in pairs {
                let table = pairwise_categories(va, vb)?;
                if table.counted > 0 {
                    pairwise.insert(
                        format!("{}/{}/{}-vs-{}", qt.key(), family, ma.key(), mb.key()),
                        table,
                    );
                }
            }
            let table = triplet_categories(&neutral, &plus_v, &minus_v)?;
            if table.counted > 0 {
                triplet.insert(format!("{}/{}", qt.key(), family), table);
            }
        }
    }

    let mut correct_count_distribution = BTreeMap::new();
    for mode in PromptMode::ALL {
        let mut dist: BTreeMap<usize, usize> = (0..=3).map(|k| (k, 0)).collect();
        let mut any = false;
        for id in &item_ids {
            let cells: Vec<Option<bool>> = QuestionType::ALL
                .iter()
                .map(|&qt| defined(lookup(id, mode, qt)))
                .collect();
            if cells.iter().any(Option::is_none) {
                continue;
            }
            any = true;
            let hits = cells.iter().flatten().filter(|&&b| b).count();
            *dist.get_mut(&hits).unwrap() += 1;
        }
        if any {
            correct_count_distribution.insert(mode.key().to_string(), dist);
        }
    }

    Ok(SummaryFile {
        schema_version: RESULTS_SCHEMA_VERSION,
        config_fingerprint: config_fingerprint.to_string(),
        seed,
        generated_at: unix_now(),
        judge: judge.to_string(),
        accuracy,
        pairwise,
        triplet,
        correct_count_distribution,
        alpha,
    })
}

/// Writes the nested results file and the flat summary, returning both paths.
pub fn write_results(
    predictions: &[Prediction],
    summary: &SummaryFile,
    dir: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let mut items: BTreeMap<String, BTreeMap<String, BTreeMap<String, PredictionRecord>>> =
        BTreeMap::new();
    for p in predictions {
        items
            .entry(p.item_id.clone())
            .or_default()
            .entry(p.mode.key().to_string())
            .or_default()
            .insert(
                p.question_type.key().to_string(),
                PredictionRecord {
                    prompt: p.prompt.clone(),
                    response: p.response.clone(),
                    verdict: p.verdict,
                },
            );
    }
    let results = ResultsFile {
        schema_version: RESULTS_SCHEMA_VERSION,
        config_fingerprint: summary.config_fingerprint.clone(),
        seed: summary.seed,
        generated_at: summary.generated_at,
        items,
    };
    let results_path = dir.join("results.json");
    let summary_path = dir.join("summary.json");
    std::fs::write(&results_path, serde_json::to_string_pretty(&results)?)?;
    std::fs::write(&summary_path, serde_json::to_string_pretty(summary)?)?;
    Ok((results_path, summary_path))
}

/// CSV export of the summary's category tables.
pub fn tables_csv(summary: &SummaryFile) -> String {
    let mut out = String::from("table,key,category,percent\n");
    for (key, t) in &summary.pairwise {
        out.push_str(&format!("pairwise,{key},both_correct,{}\n", t.both_correct));
        out.push_str(&format!("pairwise,{key},exactly_one,{}\n", t.exactly_one));
        out.push_str(&format!("pairwise,{key},both_incorrect,{}\n", t.both_incorrect));
    }
    for (key, t) in &summary.triplet {
        out.push_str(&format!("triplet,{key},all_correct,{}\n", t.all_correct));
        out.push_str(&format!("triplet,{key},exactly_two,{}\n", t.exactly_two));
        out.push_str(&format!("triplet,{key},exactly_one,{}\n", t.exactly_one));
        out.push_str(&format!("triplet,{key},all_incorrect,{}\n", t.all_incorrect));
    }
    out
}

/// Parses a results file back (round-trip checks and downstream tooling).
pub fn load_results(path: &Path) -> Result<ResultsFile> {
    let text = std::fs::read_to_string(path)?;
    let file: ResultsFile = serde_json::from_str(&text)?;
    if file.schema_version != RESULTS_SCHEMA_VERSION {
        return Err(Error::Validation(format!(
            "unsupported results schema version {}",
            file.schema_version
        )));
    }
    Ok(file)
}

pub fn load_summary(path: &Path) -> Result<SummaryFile> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

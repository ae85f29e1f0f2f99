//! Human tables and versioned JSON for `eval` and `gradcheck`.
//!
//! JSON reals are written in scientific notation with 17 significant
//! digits, so they parse back to the exact `f64` that was computed.

use std::fmt::Write as _;

use nqa_core::metrics::{Agreement, AnswerSet, ConsensusReferences, ScoreReport, Taxonomy};
use nqa_core::numerics::GradCheckReport;
use nqa_core::qa_model::GradCheckCase;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

pub const SCHEMA_VERSION: u32 = 1;

/// An `f64` serialized with 17 significant digits; non-finite becomes `null`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precise(pub f64);

impl Serialize for Precise {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Score {
    pub raw: Precise,
    pub percent: Precise,
}

impl Score {
    fn new(raw: f64) -> Self {
        Self {
            raw: Precise(raw),
            percent: Precise(100.0 * raw),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AtThreshold {
    pub threshold: f64,
    #[serde(flatten)]
    pub score: Score,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsensusBlock {
    pub acm_accuracy: Score,
    pub mcm_accuracy: Score,
    pub acm: Vec<AtThreshold>,
    pub mcm: Vec<AtThreshold>,
}

/// Scores for one set of questions. An empty split carries `n = 0` only.
#[derive(Clone, Debug, Serialize)]
pub struct SplitReport {
    pub n: usize,
    pub accuracy: Option<Score>,
    pub wups: Vec<AtThreshold>,
    pub consensus: Option<ConsensusBlock>,
}

fn at(scores: &[nqa_core::metrics::ThresholdScore]) -> Vec<AtThreshold> {
    scores
        .iter()
        .map(|s| AtThreshold {
            threshold: s.threshold,
            score: Score::new(s.value),
        })
        .collect()
}

impl SplitReport {
    pub fn empty() -> Self {
        Self {
            n: 0,
            accuracy: None,
            wups: Vec::new(),
            consensus: None,
        }
    }

    /// Accuracy and WUPS against the canonical answers in `references`;
    /// ACM and MCM against `consensus`.
    pub fn evaluate(
        predictions: &[AnswerSet],
        references: &ConsensusReferences,
        consensus: &ConsensusReferences,
        taxonomy: Option<&Taxonomy>,
        thresholds: &[f64],
    ) -> nqa_core::Result<Self> {
        let base = ScoreReport::evaluate(predictions, references, taxonomy, thresholds, false)?;
        let c = ScoreReport::evaluate(predictions, consensus, taxonomy, thresholds, true)?
            .consensus
            .expect("consensus requested");
        Ok(Self {
            n: base.n,
            accuracy: Some(Score::new(base.accuracy)),
            wups: at(&base.wups),
            consensus: Some(ConsensusBlock {
                acm_accuracy: Score::new(c.acm_accuracy),
                mcm_accuracy: Score::new(c.mcm_accuracy),
                acm: at(&c.acm),
                mcm: at(&c.mcm),
            }),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub kind: &'static str,
    pub thresholds: Vec<f64>,
    pub overall: SplitReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<NamedSplit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NamedSplit {
    pub agreement: Agreement,
    #[serde(flatten)]
    pub report: SplitReport,
}

impl EvalReport {
    pub fn new(
        thresholds: Vec<f64>,
        overall: SplitReport,
        splits: Vec<(Agreement, SplitReport)>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: "eval",
            thresholds,
            overall,
            splits: splits
                .into_iter()
                .map(|(agreement, report)| NamedSplit { agreement, report })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String, super::CliError> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| super::CliError::Input(e.to_string()))
    }

    /// Rows are splits, columns are metrics, values in percent.
    pub fn to_table(&self) -> String {
        let mut header = vec!["split".to_string(), "n".to_string(), "accuracy".to_string()];
        for t in &self.thresholds {
            header.push(format!("WUPS@{t:?}"));
        }
        header.push("ACM acc".into());
        header.push("MCM acc".into());
        for t in &self.thresholds {
            header.push(format!("ACM@{t:?}"));
            header.push(format!("MCM@{t:?}"));
        }
        let mut rows = vec![header];
        let mut push = |name: &str, r: &SplitReport| {
            let pct =
                |s: Option<&Score>| s.map_or("-".to_string(), |s| format!("{:.2}", s.percent.0));
            let mut row = vec![name.to_string(), r.n.to_string(), pct(r.accuracy.as_ref())];
            for i in 0..self.thresholds.len() {
                row.push(pct(r.wups.get(i).map(|w| &w.score)));
            }
            let c = r.consensus.as_ref();
            row.push(pct(c.map(|c| &c.acm_accuracy)));
            row.push(pct(c.map(|c| &c.mcm_accuracy)));
            for i in 0..self.thresholds.len() {
                row.push(pct(c.and_then(|c| c.acm.get(i)).map(|w| &w.score)));
                row.push(pct(c.and_then(|c| c.mcm.get(i)).map(|w| &w.score)));
            }
            rows.push(row);
        };
        push("overall", &self.overall);
        for s in &self.splits {
            push(s.agreement.label(), &s.report);
        }
        render(&rows)
    }
}

fn render(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == 0 {
                    format!("{c:<w$}", w = widths[j])
                } else {
                    format!("{c:>w$}", w = widths[j])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: Precise,
    pub numeric: Precise,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    #[serde(flatten)]
    pub case: GradCheckCase,
    pub max_relative_error: Precise,
    pub passed: bool,
    pub worst: Option<WorstEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub schema_version: u32,
    pub kind: &'static str,
    pub epsilon: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckSummary {
    pub fn new(epsilon: f64, tolerance: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: "gradcheck",
            epsilon,
            tolerance,
            cases: Vec::new(),
        }
    }

    pub fn push(&mut self, case: GradCheckCase, report: &GradCheckReport) {
        self.cases.push(CaseResult {
            case,
            max_relative_error: Precise(report.max_relative_error()),
            passed: report.passed(),
            worst: report.worst().map(|w| WorstEntry {
                param: w.name.clone(),
                index: w.worst_index,
                analytic: Precise(w.analytic),
                numeric: Precise(w.numeric),
            }),
        });
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    fn worst_case(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_relative_error.0.total_cmp(&b.max_relative_error.0))
    }

    pub fn failure_message(&self) -> String {
        let failed = self.cases.iter().filter(|c| !c.passed).count();
        let mut msg = format!(
            "{failed} of {} cases exceed tolerance {:e}",
            self.cases.len(),
            self.tolerance
        );
        if let Some(c) = self.worst_case() {
            if let Some(w) = &c.worst {
                write!(
                    msg,
                    "; worst offender: {}[{}] in case seed {} (relative error {:e}, analytic {:e}, numeric {:e})",
                    w.param, w.index, c.case.seed, c.max_relative_error.0, w.analytic.0, w.numeric.0
                )
                .expect("writing to a String");
            }
        }
        msg
    }

    pub fn to_json(&self) -> Result<String, super::CliError> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| super::CliError::Input(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "seed",
            "|V|",
            "E",
            "H",
            "F",
            "T",
            "mode",
            "max rel err",
            "worst param",
            "",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
        for c in &self.cases {
            let k = &c.case;
            let steps = k.question_len
                + if k.mode == nqa_core::qa_model::AnswerMode::SingleWord {
                    0
                } else {
                    k.answer_len
                };
            rows.push(vec![
                k.seed.to_string(),
                k.vocab_size.to_string(),
                k.embedding_dim.to_string(),
                k.hidden_dim.to_string(),
                k.feature_dim.to_string(),
                steps.to_string(),
                k.mode.to_string(),
                format!("{:.3e}", c.max_relative_error.0),
                c.worst
                    .as_ref()
                    .map_or("-".into(), |w| format!("{}[{}]", w.param, w.index)),
                if c.passed { "ok" } else { "FAIL" }.into(),
            ]);
        }
        let mut out = render(&rows);
        let max = self.worst_case().map_or(0.0, |c| c.max_relative_error.0);
        writeln!(
            out,
            "{}: max relative error {:.3e} (tolerance {:e}, epsilon {:e})",
            if self.passed() { "PASS" } else { "FAIL" },
            max,
            self.tolerance,
            self.epsilon
        )
        .expect("writing to a String");
        out
    }
}

//! Accuracy, averaged incremental accuracy, G_IL and the six-way error typology.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreMatrix;

/// Percentage of samples whose label is among the `k` best scores.
///
/// Ranking ties go to the lower class id, so a label is a top-k hit when
/// fewer than `k` classes beat it strictly or tie it with a lower id.
pub fn topk_accuracy(scores: &ScoreMatrix, labels: &[usize], k: usize) -> Result<f64> {
    let classes = scores.num_classes();
    if k == 0 || k > classes {
        return Err(Error::Argument(format!("k = {k} outside 1..={classes}")));
    }
    if labels.len() != scores.num_samples() {
        return Err(Error::Argument(format!(
            "{} labels for {} scored samples",
            labels.len(),
            scores.num_samples()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let m = scores.matrix();
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Argument(format!("label {label} outside {classes} classes")));
        }
        let row = m.row(r);
        let target = row[label];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > target || (v == target && c < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Mean over the incremental states; the caller passes states `1..T` only.
pub fn average_incremental_accuracy(per_state: &[f64]) -> Result<f64> {
    if per_state.is_empty() {
        return Err(Error::Argument(
            "averaged incremental accuracy needs at least one incremental state".into(),
        ));
    }
    Ok(per_state.iter().sum::<f64>() / per_state.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GilInput {
    /// `(configuration accuracy, Full accuracy)` pairs, both in percent.
    pub pairs: Vec<(f64, f64)>,
    pub upper_bound: f64,
}

impl GilInput {
    pub fn new(pairs: Vec<(f64, f64)>) -> Self {
        Self {
            pairs,
            upper_bound: 100.0,
        }
    }
}

/// Mean over configurations of `(acc − full) / (upper_bound − full)`.
///
/// Zero means every configuration matches Full; more negative is worse.
pub fn g_il(input: &GilInput) -> Result<f64> {
    if input.pairs.is_empty() {
        return Err(Error::Argument("G_IL needs at least one configuration".into()));
    }
    let mut sum = 0.0;
    for &(acc, full) in &input.pairs {
        if full >= input.upper_bound {
            return Err(Error::Argument(format!(
                "Full accuracy {full} is not below the upper bound {}",
                input.upper_bound
            )));
        }
        sum += (acc - full) / (input.upper_bound - full);
    }
    Ok(sum / input.pairs.len() as f64)
}

/// Outcome percentages for one group of test samples; sums to 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupBreakdown {
    pub samples: usize,
    /// Correctly classified.
    pub correct: f64,
    /// Mistaken for a class of the same group.
    pub same_group: f64,
    /// Mistaken for a class of the other group.
    pub other_group: f64,
}

/// Top-1 outcomes split into `c(p), e(p,p), e(p,n)` and `c(n), e(n,n), e(n,p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Typology {
    pub past: Option<GroupBreakdown>,
    pub new: Option<GroupBreakdown>,
}

impl Typology {
    pub fn c_p(&self) -> Option<f64> {
        self.past.map(|g| g.correct)
    }
    pub fn e_pp(&self) -> Option<f64> {
        self.past.map(|g| g.same_group)
    }
    pub fn e_pn(&self) -> Option<f64> {
        self.past.map(|g| g.other_group)
    }
    pub fn c_n(&self) -> Option<f64> {
        self.new.map(|g| g.correct)
    }
    pub fn e_nn(&self) -> Option<f64> {
        self.new.map(|g| g.same_group)
    }
    pub fn e_np(&self) -> Option<f64> {
        self.new.map(|g| g.other_group)
    }
}

pub fn error_typology(
    scores: &ScoreMatrix,
    labels: &[usize],
    past: &BTreeSet<usize>,
    new: &BTreeSet<usize>,
) -> Result<Typology> {
    if let Some(c) = past.intersection(new).next() {
        return Err(Error::Argument(format!("class {c} is both past and new")));
    }
    if labels.len() != scores.num_samples() {
        return Err(Error::Argument(format!(
            "{} labels for {} scored samples",
            labels.len(),
            scores.num_samples()
        )));
    }
    let group_of = |c: usize| -> Result<bool> {
        if past.contains(&c) {
            Ok(true)
        } else if new.contains(&c) {
            Ok(false)
        } else {
            Err(Error::Argument(format!("class {c} is neither past nor new")))
        }
    };
    // [past, new] × [correct, same group, other group]
    let mut counts = [[0usize; 3]; 2];
    for (&label, pred) in labels.iter().zip(scores.argmax()) {
        let truth_past = group_of(label)?;
        let pred_past = group_of(pred)?;
        let g = usize::from(!truth_past);
        let kind = if pred == label {
            0
        } else if pred_past == truth_past {
            1
        } else {
            2
        };
        counts[g][kind] += 1;
    }
    let breakdown = |c: [usize; 3]| {
        let n: usize = c.iter().sum();
        (n > 0).then(|| GroupBreakdown {
            samples: n,
            correct: 100.0 * c[0] as f64 / n as f64,
            same_group: 100.0 * c[1] as f64 / n as f64,
            other_group: 100.0 * c[2] as f64 / n as f64,
        })
    };
    Ok(Typology {
        past: breakdown(counts[0]),
        new: breakdown(counts[1]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    pub state: usize,
    pub num_classes: usize,
    pub top1: f64,
    /// Top-5 accuracy, or top-`N_t` when fewer than five classes are seen.
    pub top5: f64,
    pub typology: Typology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub per_state: Vec<StateMetrics>,
    /// Mean over states `1..T`; absent for single-state runs.
    pub average_incremental_top1: Option<f64>,
    pub average_incremental_top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, per_state: Vec<StateMetrics>, warnings: Vec<String>) -> Self {
        let incremental: Vec<&StateMetrics> = per_state.iter().filter(|s| s.state > 0).collect();
        let avg = |f: fn(&StateMetrics) -> f64| {
            let v: Vec<f64> = incremental.iter().map(|s| f(s)).collect();
            average_incremental_accuracy(&v).ok()
        };
        Self {
            method: method.into(),
            average_incremental_top1: avg(|s| s.top1),
            average_incremental_top5: avg(|s| s.top5),
            per_state,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    /// One row per state: accuracies and the six typology percentages.
    pub fn states_csv(&self) -> String {
        let mut out = String::from("state,classes,top1,top5,c_p,e_pp,e_pn,c_n,e_nn,e_np\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for s in &self.per_state {
            let t = &s.typology;
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{},{},{},{},{},{}\n",
                s.state,
                s.num_classes,
                s.top1,
                s.top5,
                cell(t.c_p()),
                cell(t.e_pp()),
                cell(t.e_pn()),
                cell(t.c_n()),
                cell(t.e_nn()),
                cell(t.e_np())
            ));
        }
        out
    }
}

/// Methods × configurations accuracy table:
/// one row per method, one column per (dataset, T) configuration, and a
/// trailing G_IL column when a Full row is present.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccuracyTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    pub full: Option<Vec<f64>>,
}

impl AccuracyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        if self.full.is_some() {
            out.push_str(",G_IL");
        }
        out.push('\n');
        for (name, values) in &self.rows {
            out.push_str(name);
            for v in values {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.2}"));
                }
            }
            if let Some(full) = &self.full {
                out.push(',');
                if values.iter().all(Option::is_some) {
                    let pairs = values
                        .iter()
                        .map(|v| v.expect("checked"))
                        .zip(full.iter().copied())
                        .collect();
                    if let Ok(g) = g_il(&GilInput::new(pairs)) {
                        out.push_str(&format!("{g:.2}"));
                    }
                }
            }
            out.push('\n');
        }
        if let Some(full) = &self.full {
            out.push_str("Full");
            for v in full {
                out.push_str(&format!(",{v:.2}"));
            }
            out.push_str(",\n");
        }
        out
    }
}

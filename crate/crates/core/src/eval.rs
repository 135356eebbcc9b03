//! Open-world continual-learning metrics computed from per-sample
//! prediction records.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{OfclError, Result};
use crate::ita::parse_field;
use crate::label::Label;
use crate::scalar::Scalar;

/// Ground truth of a test sample at the time it was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Truth {
    Known(Label),
    /// Class not yet trained in this session.
    Open(Label),
}

impl Truth {
    pub fn class(self) -> Label {
        match self {
            Truth::Known(l) | Truth::Open(l) => l,
        }
    }

    pub fn is_open(self) -> bool {
        matches!(self, Truth::Open(_))
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truth::Known(l) => write!(f, "{l}"),
            Truth::Open(l) => write!(f, "unseen:{l}"),
        }
    }
}

impl FromStr for Truth {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (open, rest) = match s.strip_prefix("unseen:") {
            Some(r) => (true, r),
            None => (false, s),
        };
        let l: Label = rest
            .parse()
            .map_err(|e| format!("bad ground truth '{s}': {e}"))?;
        if l.is_pseudo() {
            return Err(format!("ground truth '{s}' cannot be a pseudo label"));
        }
        Ok(if open {
            Truth::Open(l)
        } else {
            Truth::Known(l)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    /// A known class or a pseudo label.
    Label(Label),
    Unknown,
}

impl Prediction {
    pub fn label(self) -> Option<Label> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Unknown => None,
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Label(l) => write!(f, "{l}"),
            Prediction::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for Prediction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "unknown" {
            return Ok(Prediction::Unknown);
        }
        s.parse()
            .map(Prediction::Label)
            .map_err(|e| format!("bad prediction '{s}': {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord<T> {
    /// Evaluation session the record belongs to.
    pub task: usize,
    pub truth: Truth,
    pub predicted: Prediction,
    /// Openness against the known spheres; larger means more likely open.
    pub score: T,
    /// Nearest known class regardless of radius (closed-mode prediction).
    pub nearest: Label,
    /// Known class a predicted pseudo label had been promoted into when the
    /// report was produced.
    pub resolved: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyMode {
    Closed,
    OpenWorld,
}

impl AccuracyMode {
    pub fn name(self) -> &'static str {
        match self {
            AccuracyMode::Closed => "closed",
            AccuracyMode::OpenWorld => "open-world",
        }
    }
}

/// Open-world verdict on one record: `Some(correct)` or `None` if it does
/// not take part.
fn open_world_outcome<T>(r: &PredictionRecord<T>) -> Option<bool> {
    let effective = match r.predicted {
        Prediction::Label(l) if l.is_pseudo() => r.resolved,
        Prediction::Label(l) => Some(l),
        Prediction::Unknown => None,
    };
    match r.truth {
        Truth::Known(c) => Some(effective == Some(c)),
        Truth::Open(c) => {
            let pseudo = matches!(r.predicted, Prediction::Label(l) if l.is_pseudo());
            (pseudo && effective == Some(c)).then_some(true)
        }
    }
}

/// Fraction of correct records. Closed mode scores known-class samples by
/// their nearest known class; open-world mode additionally counts detection
/// misses as errors and credits open samples whose pseudo label was later
/// promoted into their true class.
pub fn accuracy<T>(records: &[PredictionRecord<T>], mode: AccuracyMode) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in records {
        let outcome = match mode {
            AccuracyMode::Closed => match r.truth {
                Truth::Known(c) => Some(r.nearest == c),
                Truth::Open(_) => None,
            },
            AccuracyMode::OpenWorld => open_world_outcome(r),
        };
        if let Some(ok) = outcome {
            total += 1;
            hit += usize::from(ok);
        }
    }
    if total == 0 {
        return Err(OfclError::degenerate("no known-class records to score"));
    }
    Ok(hit as f64 / total as f64)
}

fn split_scores<T: Scalar>(records: &[PredictionRecord<T>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut known = Vec::new();
    let mut open = Vec::new();
    for r in records {
        let s = r.score.as_f64();
        if s.is_nan() {
            return Err(OfclError::numerical("NaN openness score"));
        }
        if r.truth.is_open() {
            open.push(s);
        } else {
            known.push(s);
        }
    }
    if known.is_empty() || open.is_empty() {
        return Err(OfclError::degenerate(
            "need at least one known and one open record",
        ));
    }
    Ok((known, open))
}

/// Area under the ROC curve with opens as positives, from average ranks.
pub fn auroc<T: Scalar>(records: &[PredictionRecord<T>]) -> Result<f64> {
    let (known, open) = split_scores(records)?;
    auroc_scores(&known, &open)
}

pub fn auroc_scores(known: &[f64], open: &[f64]) -> Result<f64> {
    if known.is_empty() || open.is_empty() {
        return Err(OfclError::degenerate(
            "need at least one known and one open score",
        ));
    }
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&s| (s, false))
        .chain(open.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut open_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        open_rank_sum += rank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (nk, no) = (known.len() as f64, open.len() as f64);
    Ok((open_rank_sum - no * (no + 1.0) / 2.0) / (nk * no))
}

/// False-positive rate at the largest threshold that still recalls at
/// least `tpr_target` of the opens.
pub fn fpr_at_tpr<T: Scalar>(records: &[PredictionRecord<T>], tpr_target: f64) -> Result<f64> {
    let (known, open) = split_scores(records)?;
    fpr_at_tpr_scores(&known, &open, tpr_target)
}

pub fn fpr_at_tpr_scores(known: &[f64], open: &[f64], tpr_target: f64) -> Result<f64> {
    if known.is_empty() || open.is_empty() {
        return Err(OfclError::degenerate(
            "need at least one known and one open score",
        ));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(OfclError::usage("tpr target must lie in (0, 1]"));
    }
    let mut desc = open.to_vec();
    desc.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let n = desc.len();
    let need = (1..=n)
        .find(|&c| c as f64 / n as f64 >= tpr_target)
        .unwrap_or(n);
    let tau = desc[need - 1];
    Ok(known.iter().filter(|&&s| s >= tau).count() as f64 / known.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionMetrics {
    pub task: usize,
    pub accuracy: f64,
    pub open_world_accuracy: f64,
    /// `None` when the session has no open samples.
    pub auroc: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: AccuracyMode,
    pub tpr_target: f64,
    pub acc_per_task: Vec<f64>,
    pub acc_n: f64,
    pub pd: f64,
    pub auc_n: f64,
    pub fpr_n: f64,
    pub open_world_acc: f64,
}

pub fn session_metrics<T: Scalar>(
    task: usize,
    records: &[PredictionRecord<T>],
    tpr_target: f64,
) -> Result<SessionMetrics> {
    let has_open = records.iter().any(|r| r.truth.is_open());
    let has_known = records.iter().any(|r| !r.truth.is_open());
    let (auroc, fpr) = if has_open && has_known {
        (
            Some(auroc(records)?),
            Some(fpr_at_tpr(records, tpr_target)?),
        )
    } else {
        (None, None)
    };
    Ok(SessionMetrics {
        task,
        accuracy: accuracy(records, AccuracyMode::Closed)?,
        open_world_accuracy: accuracy(records, AccuracyMode::OpenWorld)?,
        auroc,
        fpr,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Averages sessions `0..=N`. The drop is `acc_0 - acc_final`, floored at
/// zero so every field stays a rate.
pub fn aggregate(
    sessions: &[SessionMetrics],
    mode: AccuracyMode,
    tpr_target: f64,
) -> Result<MetricsReport> {
    if sessions.first().map(|s| s.task) != Some(0) {
        return Err(OfclError::usage("aggregate needs session 0 first"));
    }
    if sessions.iter().enumerate().any(|(i, s)| s.task != i) {
        return Err(OfclError::usage(
            "sessions must be numbered 0..N without gaps",
        ));
    }
    let acc_per_task: Vec<f64> = sessions
        .iter()
        .map(|s| match mode {
            AccuracyMode::Closed => s.accuracy,
            AccuracyMode::OpenWorld => s.open_world_accuracy,
        })
        .collect();
    let aucs: Vec<f64> = sessions.iter().filter_map(|s| s.auroc).collect();
    let fprs: Vec<f64> = sessions.iter().filter_map(|s| s.fpr).collect();
    let ow: Vec<f64> = sessions.iter().map(|s| s.open_world_accuracy).collect();
    Ok(MetricsReport {
        mode,
        tpr_target,
        acc_n: mean(&acc_per_task),
        pd: (acc_per_task[0] - acc_per_task[acc_per_task.len() - 1]).max(0.0),
        auc_n: if aucs.is_empty() {
            f64::NAN
        } else {
            mean(&aucs)
        },
        fpr_n: if fprs.is_empty() {
            f64::NAN
        } else {
            mean(&fprs)
        },
        open_world_acc: mean(&ow),
        acc_per_task,
    })
}

/// Groups records by session and aggregates them.
pub fn report_from_records<T: Scalar>(
    records: &[PredictionRecord<T>],
    mode: AccuracyMode,
    tpr_target: f64,
) -> Result<MetricsReport> {
    let last = records
        .iter()
        .map(|r| r.task)
        .max()
        .ok_or_else(|| OfclError::degenerate("no records"))?;
    let mut sessions = Vec::with_capacity(last + 1);
    for t in 0..=last {
        let rs: Vec<PredictionRecord<T>> =
            records.iter().filter(|r| r.task == t).copied().collect();
        if rs.is_empty() {
            return Err(OfclError::usage(format!("no records for session {t}")));
        }
        sessions.push(session_metrics(t, &rs, tpr_target)?);
    }
    aggregate(&sessions, mode, tpr_target)
}

impl MetricsReport {
    pub fn acc_final(&self) -> f64 {
        *self.acc_per_task.last().expect("at least one session")
    }

    pub fn render(&self) -> String {
        let per_task: Vec<String> = self.acc_per_task.iter().map(|a| a.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "mode={}", self.mode.name());
        let _ = writeln!(out, "sessions={}", self.acc_per_task.len());
        let _ = writeln!(out, "acc_per_task={}", per_task.join(","));
        let _ = writeln!(out, "ACC_N={}", self.acc_n);
        let _ = writeln!(out, "acc_final={}", self.acc_final());
        let _ = writeln!(out, "PD={}", self.pd);
        let _ = writeln!(out, "AUC_N={}", self.auc_n);
        let _ = writeln!(out, "FPR_N={}", self.fpr_n);
        let _ = writeln!(out, "tpr_target={}", self.tpr_target);
        let _ = writeln!(out, "open_world_acc={}", self.open_world_acc);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| OfclError::parse(i + 1, "expected key=value"))?;
            fields.insert(k.to_string(), (i + 1, v.to_string()));
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| OfclError::parse(0, format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            let (l, v) = get(k)?;
            parse_field(*l, v)
        };
        let (ml, mode) = get("mode")?;
        let mode = match mode.as_str() {
            "closed" => AccuracyMode::Closed,
            "open-world" => AccuracyMode::OpenWorld,
            other => return Err(OfclError::parse(*ml, format!("unknown mode '{other}'"))),
        };
        let (al, acc) = get("acc_per_task")?;
        let acc_per_task = acc
            .split(',')
            .map(|v| parse_field(*al, v))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            mode,
            tpr_target: num("tpr_target")?,
            acc_per_task,
            acc_n: num("ACC_N")?,
            pd: num("PD")?,
            auc_n: num("AUC_N")?,
            fpr_n: num("FPR_N")?,
            open_world_acc: num("open_world_acc")?,
        })
    }
}

pub const RECORDS_HEADER: &str = "task,true,predicted,score,nearest,resolved";

pub fn render_records<T: Scalar>(records: &[PredictionRecord<T>]) -> String {
    let mut out = String::with_capacity(records.len() * 48);
    out.push_str(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let resolved = r
            .resolved
            .map_or_else(|| "-".to_string(), |l| l.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.task, r.truth, r.predicted, r.score, r.nearest, resolved
        );
    }
    out
}

pub fn parse_records<T: Scalar>(text: &str) -> Result<Vec<PredictionRecord<T>>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h == RECORDS_HEADER => {}
        _ => {
            return Err(OfclError::parse(
                1,
                format!("expected header '{RECORDS_HEADER}'"),
            ))
        }
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(OfclError::parse(
                ln,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        let resolved = match f[5] {
            "-" => None,
            v => Some(parse_field(ln, v)?),
        };
        out.push(PredictionRecord {
            task: parse_field(ln, f[0])?,
            truth: f[1].parse().map_err(|e: String| OfclError::parse(ln, e))?,
            predicted: f[2].parse().map_err(|e: String| OfclError::parse(ln, e))?,
            score: parse_field(ln, f[3])?,
            nearest: parse_field(ln, f[4])?,
            resolved,
        });
    }
    Ok(out)
}

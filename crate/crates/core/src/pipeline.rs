//! End-to-end stream processing: train each task, evaluate its cumulative
//! test set, cluster what was flagged unknown into pseudo classes, and go on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::aks::{cluster_unknowns, Promotion};
use crate::config::RunConfig;
use crate::error::{OfclError, Result};
use crate::eval::{
    self, AccuracyMode, MetricsReport, Prediction, PredictionRecord, SessionMetrics, Truth,
};
use crate::geometry::{seeded_rng, Embedding};
use crate::label::Label;
use crate::scalar::fmt_full;
use crate::stream::{self, Episode};
use crate::trainer::{EpochLoss, Learner};

const STREAM_PROJECTION: u64 = 20;

/// Everything a run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<EpochLoss<f64>>,
    pub records: Vec<PredictionRecord<f64>>,
    pub sessions: Vec<SessionMetrics>,
    pub report: MetricsReport,
    /// Knowledge-space dump right after each task's training (promotions
    /// applied, before that session's unknowns are absorbed).
    pub space_dumps: Vec<String>,
    /// Token-bank dump right after each task's training.
    pub token_dumps: Vec<String>,
    /// Knowledge space after the last session's unknowns were absorbed.
    pub final_space_dump: String,
    pub promotions: Vec<Promotion>,
    /// Fraction of samples whose pseudo group was promoted that classify as
    /// their true class right after the promotion; `None` without promotions.
    pub promoted_accuracy: Option<f64>,
    pub projection: String,
    pub learner: Learner<f64>,
}

struct PseudoGroup {
    members: Vec<(Embedding<f64>, Label)>,
}

/// Runs every episode in order.
pub fn run(cfg: &RunConfig, episodes: &[Episode<f64>]) -> Result<RunOutput> {
    cfg.validate()?;
    let input_dim = episodes
        .iter()
        .find_map(|e| e.input_dim())
        .ok_or_else(|| OfclError::usage("stream has no samples"))?;
    let mut learner = Learner::new(
        cfg.backbone_spec(input_dim),
        cfg.ita,
        cfg.margin,
        cfg.train_config(),
    )?;

    let mut trace = Vec::new();
    let mut records = Vec::new();
    let mut space_dumps = Vec::new();
    let mut token_dumps = Vec::new();
    let mut promotions = Vec::new();
    let mut groups: BTreeMap<Label, PseudoGroup> = BTreeMap::new();
    let (mut promoted_hit, mut promoted_total) = (0usize, 0usize);
    let mut trained: BTreeSet<Label> = BTreeSet::new();
    let mut projected: Vec<(usize, String, Embedding<f64>)> = Vec::new();

    for (t, ep) in episodes.iter().enumerate() {
        let ctx = |e: OfclError| match e {
            OfclError::Numerical(m) => OfclError::Numerical(format!("task {t}: {m}")),
            OfclError::Usage(m) => OfclError::Usage(format!("task {t}: {m}")),
            other => other,
        };
        let outcome = learner.train_task(t, &ep.labeled_train()?).map_err(ctx)?;
        trace.extend(outcome.trace);
        for p in &outcome.promotions {
            if let Some(g) = groups.remove(&p.pseudo) {
                for (h, truth) in &g.members {
                    promoted_total += 1;
                    promoted_hit += usize::from(learner.classify(h)?.label == Some(*truth));
                }
            }
        }
        promotions.extend(outcome.promotions);
        trained.extend(ep.classes());
        space_dumps.push(learner.space().dump());
        token_dumps.push(learner.bank().dump());

        let mut unknown_points: Vec<(Embedding<f64>, Label)> = Vec::new();
        for sample in &ep.test {
            let class = sample
                .label
                .ok_or_else(|| OfclError::usage(format!("task {t}: unlabeled test sample")))?;
            let h = learner.embed(&sample.features).map_err(ctx)?;
            let det = learner.classify(&h)?;
            let known = learner.known_detection(&h)?;
            let truth = if trained.contains(&class) {
                Truth::Known(class)
            } else {
                Truth::Open(class)
            };
            records.push(PredictionRecord {
                task: t,
                truth,
                predicted: det.label.map_or(Prediction::Unknown, Prediction::Label),
                score: known.openness(),
                nearest: known.nearest_label,
                resolved: None,
            });
            if det.is_unknown() {
                unknown_points.push((h.clone(), class));
            }
            projected.push((t, truth.to_string(), h));
        }

        let refs: Vec<&[f64]> = unknown_points.iter().map(|(h, _)| h.as_slice()).collect();
        let clustering = cluster_unknowns(&refs, cfg.cluster);
        let minted = learner
            .space_mut()
            .absorb_unknowns(&clustering.groups, &refs, t, &cfg.margin)
            .map_err(ctx)?;
        for (sphere, members) in minted.iter().zip(&clustering.groups) {
            groups.insert(
                sphere.label,
                PseudoGroup {
                    members: members.iter().map(|&i| unknown_points[i].clone()).collect(),
                },
            );
        }
    }

    for r in &mut records {
        if let Prediction::Label(l) = r.predicted {
            if l.is_pseudo() {
                r.resolved = learner.space().resolve(l);
            }
        }
    }

    let mut sessions = Vec::with_capacity(episodes.len());
    for t in 0..episodes.len() {
        let rs: Vec<PredictionRecord<f64>> =
            records.iter().filter(|r| r.task == t).copied().collect();
        sessions.push(eval::session_metrics(t, &rs, cfg.tpr_target)?);
    }
    let report = eval::aggregate(&sessions, AccuracyMode::Closed, cfg.tpr_target)?;
    let projection = render_projection(cfg.seed, &projected, &learner)?;

    Ok(RunOutput {
        trace,
        records,
        sessions,
        report,
        space_dumps,
        token_dumps,
        final_space_dump: learner.space().dump(),
        promotions,
        promoted_accuracy: (promoted_total > 0)
            .then(|| promoted_hit as f64 / promoted_total as f64),
        projection,
        learner,
    })
}

/// Generates the configured stream, or reads it from the manifest.
pub fn load_episodes(cfg: &RunConfig) -> Result<Vec<Episode<f64>>> {
    match &cfg.manifest {
        Some(m) => stream::read_stream(m),
        None => stream::generate(&cfg.stream_spec()),
    }
}

/// Fixed seeded Gaussian projection to the plane of every evaluated sample
/// and of the final sphere centres.
fn render_projection(
    seed: u64,
    samples: &[(usize, String, Embedding<f64>)],
    learner: &Learner<f64>,
) -> Result<String> {
    let dim = learner.backbone().output_dim();
    let mut rng = seeded_rng(seed, &[STREAM_PROJECTION]);
    let axes: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt())
                .collect()
        })
        .collect();
    let project = |h: &[f64]| -> (f64, f64) {
        let p = |a: &[f64]| a.iter().zip(h).map(|(x, y)| x * y).sum::<f64>();
        (p(&axes[0]), p(&axes[1]))
    };
    let mut out = String::from("session,kind,label,x,y,radius\n");
    for (t, label, h) in samples {
        let (x, y) = project(h);
        let _ = writeln!(out, "{t},sample,{label},{},{},", fmt_full(x), fmt_full(y));
    }
    let last = samples.last().map_or(0, |s| s.0);
    for s in learner.space().spheres() {
        let (x, y) = project(&s.centroid);
        let _ = writeln!(
            out,
            "{last},{},{},{},{},{}",
            s.provenance,
            s.label,
            fmt_full(x),
            fmt_full(y),
            fmt_full(s.radius)
        );
    }
    Ok(out)
}

pub fn render_loss_log(trace: &[EpochLoss<f64>]) -> String {
    let mut out = String::from("task,epoch,margin,aug,total\n");
    for e in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.task,
            e.epoch,
            fmt_full(e.margin),
            fmt_full(e.aug),
            fmt_full(e.total)
        );
    }
    out
}

pub fn space_dump_name(task: usize) -> String {
    format!("ks_task{task:03}.txt")
}

pub fn token_dump_name(task: usize) -> String {
    format!("tokens_task{task:03}.txt")
}

/// Writes the run directory: effective config, loss log, records, metrics,
/// per-session dumps and projection data.
pub fn write_run(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.render())?;
    std::fs::write(dir.join("loss_log.csv"), render_loss_log(&out.trace))?;
    std::fs::write(dir.join("records.csv"), eval::render_records(&out.records))?;
    std::fs::write(dir.join("metrics.txt"), out.report.render())?;
    for (t, (ks, tok)) in out.space_dumps.iter().zip(&out.token_dumps).enumerate() {
        std::fs::write(dir.join(space_dump_name(t)), ks)?;
        std::fs::write(dir.join(token_dump_name(t)), tok)?;
    }
    std::fs::write(dir.join("ks_final.txt"), &out.final_space_dump)?;
    std::fs::write(dir.join("projection.csv"), &out.projection)?;
    let mut summary = String::new();
    for p in &out.promotions {
        let _ = writeln!(
            summary,
            "task {} promoted {} into {}",
            p.task, p.pseudo, p.into
        );
    }
    match out.promoted_accuracy {
        Some(a) => {
            let _ = writeln!(summary, "promoted_accuracy={a}");
        }
        None => summary.push_str("promoted_accuracy=-\n"),
    }
    std::fs::write(dir.join("promotions.txt"), summary)?;
    Ok(())
}

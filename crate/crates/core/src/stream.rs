//! Synthetic open-world task streams: Gaussian class clusters laid out as a
//! base task followed by N-way K-shot incremental tasks, with each test set
//! also holding samples of the next task's (still unseen) classes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{OfclError, Result};
use crate::features::RawSample;
use crate::geometry::{self, seeded_rng};
use crate::ita::parse_field;
use crate::label::Label;
use crate::scalar::{fmt_full, Scalar};

pub const EPISODE_MAGIC: &str = "OFCL-EPISODE v1";
pub const MANIFEST_MAGIC: &str = "OFCL-MANIFEST v1";
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

const STREAM_MEANS: u64 = 10;
const STREAM_TRAIN: u64 = 11;
const STREAM_TEST: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamSpec<T> {
    pub input_dim: usize,
    pub num_base_classes: usize,
    pub base_samples_per_class: usize,
    /// Incremental tasks after the base task.
    pub num_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub test_per_class: usize,
    /// Minimum distance between any two class means.
    pub cluster_separation: T,
    /// Per-coordinate standard deviation around each mean.
    pub cluster_spread: T,
    pub seed: u64,
}

impl<T: Scalar> Default for StreamSpec<T> {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_base_classes: 6,
            base_samples_per_class: 50,
            num_tasks: 3,
            n_way: 3,
            k_shot: 5,
            test_per_class: 20,
            cluster_separation: T::lit(3.0),
            cluster_spread: T::lit(0.5),
            seed: 0,
        }
    }
}

impl<T: Scalar> StreamSpec<T> {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("num_base_classes", self.num_base_classes),
            ("base_samples_per_class", self.base_samples_per_class),
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("test_per_class", self.test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(OfclError::usage(format!("{name} must be at least 1")));
        }
        if !(self.cluster_separation > T::zero()) || !self.cluster_separation.is_finite() {
            return Err(OfclError::usage(
                "cluster separation must be a positive finite number",
            ));
        }
        if !(self.cluster_spread >= T::zero()) || !self.cluster_spread.is_finite() {
            return Err(OfclError::usage(
                "cluster spread must be a non-negative finite number",
            ));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.num_base_classes + self.num_tasks * self.n_way
    }

    /// Class ids trained in episode `task` (0 is the base task).
    pub fn task_classes(&self, task: usize) -> Vec<Label> {
        let (start, n) = if task == 0 {
            (0, self.num_base_classes)
        } else {
            (self.num_base_classes + (task - 1) * self.n_way, self.n_way)
        };
        (start..start + n).map(|c| Label::class(c as u32)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub task_index: usize,
    pub train: Vec<RawSample<T>>,
    /// Labels may name classes no training split has contained yet.
    pub test: Vec<RawSample<T>>,
}

impl<T: Scalar> Episode<T> {
    /// Distinct training classes in first-appearance order.
    pub fn classes(&self) -> Vec<Label> {
        let mut out = Vec::new();
        for s in &self.train {
            if let Some(l) = s.label {
                if !out.contains(&l) {
                    out.push(l);
                }
            }
        }
        out
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| s.features.len())
            .next()
    }

    /// Training pairs in the form the learner consumes.
    pub fn labeled_train(&self) -> Result<Vec<(Vec<T>, Label)>> {
        self.train
            .iter()
            .map(|s| {
                s.label.map(|l| (s.features.clone(), l)).ok_or_else(|| {
                    OfclError::usage(format!(
                        "unlabeled training sample in task {}",
                        self.task_index
                    ))
                })
            })
            .collect()
    }
}

fn gaussian_around<T: Scalar, R: Rng>(mean: &[T], spread: T, rng: &mut R) -> Vec<T> {
    mean.iter()
        .map(|&m| {
            let z: f64 = rng.sample(StandardNormal);
            m + spread * T::lit(z)
        })
        .collect()
}

/// Class means on the sphere of radius `separation`, drawn by seeded
/// rejection sampling until every pair is at least `separation` apart.
fn class_means<T: Scalar>(spec: &StreamSpec<T>) -> Result<Vec<Vec<T>>> {
    let mut rng = seeded_rng(spec.seed, &[STREAM_MEANS]);
    let mut means: Vec<Vec<T>> = Vec::with_capacity(spec.total_classes());
    for c in 0..spec.total_classes() {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let raw: Vec<T> = (0..spec.input_dim)
                .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let n = geometry::norm(&raw);
            if !(n > T::zero()) {
                continue;
            }
            let cand: Vec<T> = raw
                .iter()
                .map(|&v| v / n * spec.cluster_separation)
                .collect();
            if means
                .iter()
                .all(|m| geometry::dist(m, &cand) >= spec.cluster_separation)
            {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(OfclError::Generation(format!(
                "could not place class {c} of {} at separation {} in {} dimensions after {MAX_PLACEMENT_ATTEMPTS} attempts; try a smaller separation or fewer classes",
                spec.total_classes(),
                spec.cluster_separation,
                spec.input_dim
            )));
        }
    }
    Ok(means)
}

/// The full stream: base episode followed by `num_tasks` incremental ones.
pub fn generate<T: Scalar>(spec: &StreamSpec<T>) -> Result<Vec<Episode<T>>> {
    spec.validate()?;
    let means = class_means(spec)?;

    // one fixed test pool per class, shared by every episode that evaluates it
    let test_pool: Vec<Vec<RawSample<T>>> = means
        .iter()
        .enumerate()
        .map(|(c, mean)| {
            let mut rng = seeded_rng(spec.seed, &[STREAM_TEST, c as u64]);
            (0..spec.test_per_class)
                .map(|_| RawSample {
                    features: gaussian_around(mean, spec.cluster_spread, &mut rng),
                    label: Some(Label::class(c as u32)),
                })
                .collect()
        })
        .collect();

    let mut episodes = Vec::with_capacity(spec.num_tasks + 1);
    let mut seen: Vec<Label> = Vec::new();
    for t in 0..=spec.num_tasks {
        let classes = spec.task_classes(t);
        let per_class = if t == 0 {
            spec.base_samples_per_class
        } else {
            spec.k_shot
        };
        let mut train = Vec::with_capacity(classes.len() * per_class);
        for &label in &classes {
            let c = label.raw() as usize;
            let mut rng = seeded_rng(spec.seed, &[STREAM_TRAIN, c as u64]);
            for _ in 0..per_class {
                train.push(RawSample {
                    features: gaussian_around(&means[c], spec.cluster_spread, &mut rng),
                    label: Some(label),
                });
            }
        }
        seen.extend(&classes);
        let opens = if t < spec.num_tasks {
            spec.task_classes(t + 1)
        } else {
            Vec::new()
        };
        let test = seen
            .iter()
            .chain(&opens)
            .flat_map(|l| test_pool[l.raw() as usize].iter().cloned())
            .collect();
        episodes.push(Episode {
            task_index: t,
            train,
            test,
        });
    }
    Ok(episodes)
}

fn write_rows<T: Scalar>(out: &mut String, split: &str, rows: &[RawSample<T>]) -> Result<()> {
    for s in rows {
        let label = s
            .label
            .ok_or_else(|| OfclError::usage("episode rows need a class id"))?;
        if label.is_pseudo() {
            return Err(OfclError::usage("episode rows cannot carry pseudo labels"));
        }
        out.push_str(split);
        let _ = write!(out, ",{label}");
        for &v in &s.features {
            out.push(',');
            out.push_str(&fmt_full(v));
        }
        out.push('\n');
    }
    Ok(())
}

pub fn render_episode<T: Scalar>(ep: &Episode<T>) -> Result<String> {
    let dim = ep.input_dim().unwrap_or(0);
    if ep
        .train
        .iter()
        .chain(&ep.test)
        .any(|s| s.features.len() != dim)
    {
        return Err(OfclError::usage("episode rows have differing lengths"));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{EPISODE_MAGIC}");
    let _ = writeln!(
        out,
        "task {} dim {dim} train {} test {}",
        ep.task_index,
        ep.train.len(),
        ep.test.len()
    );
    write_rows(&mut out, "train", &ep.train)?;
    write_rows(&mut out, "test", &ep.test)?;
    Ok(out)
}

pub fn parse_episode<T: Scalar>(text: &str) -> Result<Episode<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == EPISODE_MAGIC => {}
        _ => return Err(OfclError::parse(1, format!("expected '{EPISODE_MAGIC}'"))),
    }
    let (hl, header) = lines
        .next()
        .ok_or_else(|| OfclError::parse(2, "missing header"))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 8 || h[0] != "task" || h[2] != "dim" || h[4] != "train" || h[6] != "test" {
        return Err(OfclError::parse(
            hl,
            "header must read 'task T dim D train N test M'",
        ));
    }
    let task_index: usize = parse_field(hl, h[1])?;
    let dim: usize = parse_field(hl, h[3])?;
    let n_train: usize = parse_field(hl, h[5])?;
    let n_test: usize = parse_field(hl, h[7])?;

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    let mut last = hl;
    for (ln, line) in lines {
        last = ln;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let split = fields.next().unwrap_or_default();
        let label: Label = match fields.next() {
            Some(f) => parse_field(ln, f)?,
            None => return Err(OfclError::parse(ln, "row is missing its class id")),
        };
        if label.is_pseudo() {
            return Err(OfclError::parse(ln, "rows cannot carry pseudo labels"));
        }
        let features = fields
            .map(|f| parse_field::<T>(ln, f))
            .collect::<Result<Vec<_>>>()?;
        if features.len() != dim {
            return Err(OfclError::parse(
                ln,
                format!(
                    "row has {} values, header declares dim {dim}",
                    features.len()
                ),
            ));
        }
        let sample = RawSample {
            features,
            label: Some(label),
        };
        match split {
            "train" if test.is_empty() => train.push(sample),
            "train" => return Err(OfclError::parse(ln, "train row after the test section")),
            "test" => test.push(sample),
            other => return Err(OfclError::parse(ln, format!("unknown split '{other}'"))),
        }
        if train.len() > n_train || test.len() > n_test {
            return Err(OfclError::parse(ln, "more rows than the header declares"));
        }
    }
    if train.len() != n_train || test.len() != n_test {
        return Err(OfclError::parse(
            last + 1,
            format!("truncated episode: header declares {n_train} train / {n_test} test rows, found {} / {}", train.len(), test.len()),
        ));
    }
    Ok(Episode {
        task_index,
        train,
        test,
    })
}

pub fn write_episode<T: Scalar>(path: &Path, ep: &Episode<T>) -> Result<()> {
    std::fs::write(path, render_episode(ep)?)?;
    Ok(())
}

pub fn read_episode<T: Scalar>(path: &Path) -> Result<Episode<T>> {
    parse_episode(&std::fs::read_to_string(path)?)
}

pub fn episode_file_name(task: usize) -> String {
    format!("task_{task:03}.episode")
}

/// Writes one file per episode plus `manifest.txt` listing them in order.
/// Returns the manifest path.
pub fn write_stream<T: Scalar>(dir: &Path, episodes: &[Episode<T>]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_MAGIC}\n");
    for ep in episodes {
        let name = episode_file_name(ep.task_index);
        write_episode(&dir.join(&name), ep)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Episode paths listed by a manifest, resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(OfclError::parse(1, format!("expected '{MANIFEST_MAGIC}'")));
    }
    Ok(lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| base.join(l.trim()))
        .collect())
}

pub fn read_stream<T: Scalar>(manifest: &Path) -> Result<Vec<Episode<T>>> {
    let mut out = Vec::new();
    for (i, p) in read_manifest(manifest)?.into_iter().enumerate() {
        let ep: Episode<T> = read_episode(&p)?;
        if ep.task_index != i {
            return Err(OfclError::usage(format!(
                "{} holds task {} but is listed at position {i}",
                p.display(),
                ep.task_index
            )));
        }
        out.push(ep);
    }
    Ok(out)
}

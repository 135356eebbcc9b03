//! Adaptive knowledge space: the union of known and pseudo hyperspheres,
//! density clustering of detected unknowns, and promotion of pseudo
//! classes once an overlapping known class is learned.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::error::{OfclError, Result};
use crate::geometry::{self, Embedding};
use crate::ita::parse_field;
use crate::label::Label;
use crate::mob::{self, Detection, Hypersphere, MarginConfig, Provenance};
use crate::scalar::{fmt_full, Scalar};

pub const DUMP_MAGIC: &str = "OFCL-KS v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams<T> {
    pub epsilon: T,
    pub min_pts: usize,
}

impl<T: Scalar> ClusterParams<T> {
    pub fn new(epsilon: T, min_pts: usize) -> Result<Self> {
        if !(epsilon > T::zero()) || min_pts == 0 {
            return Err(OfclError::usage(
                "clustering needs epsilon > 0 and min_pts >= 1",
            ));
        }
        Ok(Self { epsilon, min_pts })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Clustering {
    /// Point indices per group, ascending, groups in discovery order.
    pub groups: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// Density clustering over the `epsilon`-neighbourhood (which includes the
/// point itself). Points are scanned in index order; a border point joins
/// the first group that reaches it.
pub fn cluster_unknowns<T: Scalar>(points: &[&[T]], params: ClusterParams<T>) -> Clustering {
    let n = points.len();
    let eps2 = params.epsilon * params.epsilon;
    let neighbours = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| geometry::sq_dist(points[i], points[j]) <= eps2)
            .collect()
    };

    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();

    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let seeds = neighbours(start);
        if seeds.len() < params.min_pts {
            continue;
        }
        let gid = groups.len();
        let mut members = vec![start];
        assigned[start] = Some(gid);
        let mut queue: VecDeque<usize> = seeds.into_iter().collect();
        while let Some(j) = queue.pop_front() {
            if assigned[j].is_none() {
                assigned[j] = Some(gid);
                members.push(j);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let reach = neighbours(j);
            if reach.len() >= params.min_pts {
                queue.extend(
                    reach
                        .into_iter()
                        .filter(|&k| assigned[k].is_none() || !visited[k]),
                );
            }
        }
        members.sort_unstable();
        groups.push(members);
    }

    let noise = (0..n).filter(|&i| assigned[i].is_none()).collect();
    Clustering { groups, noise }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Promotion {
    pub pseudo: Label,
    pub into: Label,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeSpace<T> {
    spheres: Vec<Hypersphere<T>>,
    next_pseudo_id: u32,
    promotion_log: Vec<Promotion>,
}

impl<T: Scalar> Default for KnowledgeSpace<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> KnowledgeSpace<T> {
    pub fn new() -> Self {
        Self {
            spheres: Vec::new(),
            next_pseudo_id: 1,
            promotion_log: Vec::new(),
        }
    }

    pub fn spheres(&self) -> &[Hypersphere<T>] {
        &self.spheres
    }

    pub fn known(&self) -> impl Iterator<Item = &Hypersphere<T>> {
        self.spheres
            .iter()
            .filter(|s| s.provenance == Provenance::Known)
    }

    pub fn pseudo(&self) -> impl Iterator<Item = &Hypersphere<T>> {
        self.spheres
            .iter()
            .filter(|s| s.provenance == Provenance::Pseudo)
    }

    pub fn promotion_log(&self) -> &[Promotion] {
        &self.promotion_log
    }

    pub fn next_pseudo_id(&self) -> u32 {
        self.next_pseudo_id
    }

    pub fn len(&self) -> usize {
        self.spheres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spheres.is_empty()
    }

    pub fn sphere(&self, label: Label) -> Option<&Hypersphere<T>> {
        self.spheres.iter().find(|s| s.label == label)
    }

    /// Where a pseudo label ended up: the absorbing class, if promoted.
    pub fn resolve(&self, label: Label) -> Option<Label> {
        self.promotion_log
            .iter()
            .find(|p| p.pseudo == label)
            .map(|p| p.into)
    }

    /// Mints one pseudo sphere per group: centroid of its members, radius
    /// from the quantile rule against every point outside the group (or the
    /// positive-spread fallback when there are none). Noise is dropped.
    pub fn absorb_unknowns(
        &mut self,
        groups: &[Vec<usize>],
        points: &[&[T]],
        task: usize,
        cfg: &MarginConfig<T>,
    ) -> Result<Vec<Hypersphere<T>>> {
        let mut minted = Vec::with_capacity(groups.len());
        for group in groups {
            if group.is_empty() {
                return Err(OfclError::usage("empty cluster group"));
            }
            let members: BTreeSet<usize> = group.iter().copied().collect();
            let mut positives = Vec::with_capacity(group.len());
            for &i in group {
                positives.push(*points.get(i).ok_or_else(|| {
                    OfclError::usage(format!("group member {i} outside point list"))
                })?);
            }
            let negatives: Vec<&[T]> = points
                .iter()
                .enumerate()
                .filter(|(i, _)| !members.contains(i))
                .map(|(_, p)| *p)
                .collect();
            let centroid = mob::compute_centroid(&positives)?;
            let radius = if negatives.is_empty() {
                mob::fallback_radius(&centroid, &positives)?
            } else {
                mob::init_radius(&centroid, &negatives, cfg)?
            };
            let label = Label::pseudo(self.next_pseudo_id);
            self.next_pseudo_id += 1;
            minted.push(Hypersphere {
                label,
                centroid,
                radius,
                task_of_origin: task,
                provenance: Provenance::Pseudo,
            });
        }
        self.spheres.extend(minted.iter().cloned());
        Ok(minted)
    }

    /// Replaces every pseudo sphere overlapped (`d(c_P, c_S) < r_P + r_S`)
    /// by one of `new_known` with that class, the closest overlapping centre
    /// winning, then appends `new_known`.
    pub fn promote(
        &mut self,
        new_known: Vec<Hypersphere<T>>,
        task: usize,
    ) -> Result<Vec<Promotion>> {
        let mut seen: BTreeSet<Label> = self.known().map(|s| s.label).collect();
        for s in &new_known {
            if s.provenance != Provenance::Known {
                return Err(OfclError::usage(format!(
                    "sphere {} is not a known sphere",
                    s.label
                )));
            }
            if s.label.is_pseudo() || !seen.insert(s.label) {
                return Err(OfclError::usage(format!(
                    "label {} collides with an existing class",
                    s.label
                )));
            }
        }

        let mut applied = Vec::new();
        let mut kept = Vec::with_capacity(self.spheres.len());
        for sphere in self.spheres.drain(..) {
            if sphere.provenance != Provenance::Pseudo {
                kept.push(sphere);
                continue;
            }
            let mut winner: Option<(T, Label)> = None;
            for s in &new_known {
                let d = geometry::distance(&sphere.centroid, &s.centroid)?;
                if d < sphere.radius + s.radius {
                    let better = match winner {
                        None => true,
                        Some((wd, wl)) => d < wd || (d == wd && s.label < wl),
                    };
                    if better {
                        winner = Some((d, s.label));
                    }
                }
            }
            match winner {
                Some((_, into)) => applied.push(Promotion {
                    pseudo: sphere.label,
                    into,
                    task,
                }),
                None => kept.push(sphere),
            }
        }
        self.spheres = kept;
        self.spheres.extend(new_known);
        self.promotion_log.extend(applied.iter().copied());
        Ok(applied)
    }

    /// Nearest-centroid detection over known and pseudo spheres together.
    pub fn classify(&self, x: &[T]) -> Result<Detection<T>> {
        mob::detect(&self.spheres, x)
    }

    /// Versioned text dump: one record per sphere, then the promotion log.
    pub fn dump(&self) -> String {
        let dim = self.spheres.first().map_or(0, |s| s.centroid.dim());
        let mut out = String::new();
        writeln!(out, "{DUMP_MAGIC}").unwrap();
        writeln!(out, "next_pseudo_id {}", self.next_pseudo_id).unwrap();
        writeln!(out, "spheres {} dim {}", self.spheres.len(), dim).unwrap();
        for s in &self.spheres {
            write!(
                out,
                "sphere {} {} {} {}",
                s.provenance,
                s.label,
                s.task_of_origin,
                fmt_full(s.radius)
            )
            .unwrap();
            for &v in s.centroid.iter() {
                write!(out, " {}", fmt_full(v)).unwrap();
            }
            out.push('\n');
        }
        writeln!(out, "promotions {}", self.promotion_log.len()).unwrap();
        for p in &self.promotion_log {
            writeln!(out, "promotion {} {} {}", p.pseudo, p.into, p.task).unwrap();
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let all: Vec<&str> = text.lines().collect();
        let mut cursor = 0usize;
        let mut next = |what: &str| -> Result<(usize, &str)> {
            let line = all.get(cursor).ok_or_else(|| {
                OfclError::parse(
                    cursor + 1,
                    format!("unexpected end of dump, expected {what}"),
                )
            })?;
            cursor += 1;
            Ok((cursor, line))
        };

        let (n, magic) = next("header")?;
        if magic != DUMP_MAGIC {
            return Err(OfclError::parse(
                n,
                format!("expected header {DUMP_MAGIC:?}"),
            ));
        }
        let (n, line) = next("pseudo counter")?;
        let next_pseudo_id: u32 = match line.strip_prefix("next_pseudo_id ") {
            Some(v) => parse_field(n, v)?,
            None => return Err(OfclError::parse(n, "expected next_pseudo_id")),
        };
        if next_pseudo_id == 0 {
            return Err(OfclError::parse(n, "pseudo counter starts at 1"));
        }
        let (n, line) = next("sphere count")?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 4 || f[0] != "spheres" || f[2] != "dim" {
            return Err(OfclError::parse(n, "expected `spheres <count> dim <dim>`"));
        }
        let count: usize = parse_field(n, f[1])?;
        let dim: usize = parse_field(n, f[3])?;

        let mut spheres = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("sphere record")?;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 5 + dim || f[0] != "sphere" {
                return Err(OfclError::parse(
                    n,
                    format!(
                        "malformed sphere record ({} fields, expected {})",
                        f.len(),
                        5 + dim
                    ),
                ));
            }
            let provenance = match f[1] {
                "known" => Provenance::Known,
                "pseudo" => Provenance::Pseudo,
                other => return Err(OfclError::parse(n, format!("unknown provenance {other:?}"))),
            };
            let label: Label = f[2]
                .parse()
                .map_err(|e: OfclError| OfclError::parse(n, e.to_string()))?;
            if label.is_pseudo() != (provenance == Provenance::Pseudo) {
                return Err(OfclError::parse(
                    n,
                    format!("label {label} does not match provenance {provenance}"),
                ));
            }
            let task_of_origin: usize = parse_field(n, f[3])?;
            let radius: T = parse_field(n, f[4])?;
            if !(radius > T::zero()) {
                return Err(OfclError::parse(n, "radius must be positive"));
            }
            let centroid = f[5..]
                .iter()
                .map(|s| parse_field(n, s))
                .collect::<Result<Vec<T>>>()?;
            spheres.push(Hypersphere {
                label,
                centroid: Embedding::new(centroid)
                    .map_err(|e| OfclError::parse(n, e.to_string()))?,
                radius,
                task_of_origin,
                provenance,
            });
        }

        let (n, line) = next("promotion count")?;
        let count: usize = match line.strip_prefix("promotions ") {
            Some(v) => parse_field(n, v)?,
            None => return Err(OfclError::parse(n, "expected `promotions <count>`")),
        };
        let mut promotion_log = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("promotion record")?;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 || f[0] != "promotion" {
                return Err(OfclError::parse(n, "malformed promotion record"));
            }
            let label = |s: &str| {
                s.parse::<Label>()
                    .map_err(|e| OfclError::parse(n, e.to_string()))
            };
            promotion_log.push(Promotion {
                pseudo: label(f[1])?,
                into: label(f[2])?,
                task: parse_field(n, f[3])?,
            });
        }
        if let Some(extra) = all[cursor..].iter().position(|l| !l.is_empty()) {
            return Err(OfclError::parse(
                cursor + extra + 1,
                "trailing content after promotion log",
            ));
        }
        let mut labels = BTreeSet::new();
        for s in &spheres {
            if !labels.insert(s.label) {
                return Err(OfclError::parse(0, format!("duplicate label {}", s.label)));
            }
        }
        Ok(Self {
            spheres,
            next_pseudo_id,
            promotion_log,
        })
    }
}

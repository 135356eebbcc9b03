//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ofcl::aks::{cluster_unknowns, ClusterParams};
use ofcl::config::RunConfig;
use ofcl::eval::auroc_scores;
use ofcl::geometry::{finite_difference_gradient, relative_error, seeded_rng, Embedding};
use ofcl::mob::{self, ClassTerm, Hypersphere, MarginConfig, Provenance};
use ofcl::pipeline::{self, RunOutput};
use ofcl::trainer::{classification_loss, Classifier};
use ofcl::{ita::TokenBank, Label};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
}

fn margin_instance_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed, &[1]);
    let dim = rng.random_range(2..6);
    let classes = rng.random_range(1..4);
    let pos: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| {
            let n = rng.random_range(1..5);
            (0..n).map(|_| point(&mut rng, dim, 1.0)).collect()
        })
        .collect();
    let neg: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|_| {
            let n = rng.random_range(0..5);
            (0..n).map(|_| point(&mut rng, dim, 1.0)).collect()
        })
        .collect();
    let mut params = Vec::new();
    for _ in 0..classes {
        params.extend(point(&mut rng, dim, 1.0));
    }
    for _ in 0..classes {
        params.push(rng.random_range(0.2..1.5));
    }
    params.push(rng.random_range(0.1..0.8));
    let base = MarginConfig::new(
        0.5,
        rng.random_range(1.0..10.0),
        rng.random_range(1.0..10.0),
        rng.random_range(0.0..0.5),
        0.5,
    )
    .unwrap();

    let eval = |p: &[f64]| {
        let terms: Vec<ClassTerm<'_, f64>> = (0..classes)
            .map(|k| ClassTerm {
                label: Label::class(k as u32),
                centroid: &p[k * dim..(k + 1) * dim],
                radius: p[classes * dim + k],
                positives: pos[k].iter().map(|v| v.as_slice()).collect(),
                negatives: neg[k].iter().map(|v| v.as_slice()).collect(),
            })
            .collect();
        let cfg = MarginConfig {
            m: p[classes * dim + classes],
            ..base
        };
        mob::margin_loss(&terms, &cfg).unwrap()
    };
    let out = eval(&params);
    let mut analytic = out.centroid_grads.concat();
    analytic.extend(&out.radius_grads);
    analytic.push(out.margin_grad);
    let numeric = finite_difference_gradient(|p| eval(p).loss, &params, 1e-6).unwrap();
    relative_error(&analytic, &numeric)
}

fn key_pull_instance_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed, &[2]);
    let dim = rng.random_range(2..8);
    let mut bank = TokenBank::<f64>::new(dim, 2).unwrap();
    bank.init_task_tokens(0, 6, &mut rng).unwrap();
    let h = point(&mut rng, dim, 1.0);
    let k = rng.random_range(1..4);
    let selected: Vec<usize> = (0..k)
        .map(|i| (i * 2 + seed as usize) % 6)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let lambda = rng.random_range(0.1..2.0);
    let out = bank.key_pull_loss(&h, &selected, lambda).unwrap();
    let at: Vec<f64> = selected
        .iter()
        .flat_map(|&i| bank.tokens()[i].key.to_vec())
        .collect();
    let numeric = finite_difference_gradient(
        |keys| {
            let mut b = bank.clone();
            for (slot, &i) in selected.iter().enumerate() {
                b.token_mut(i).unwrap().key =
                    Embedding::new(keys[slot * dim..(slot + 1) * dim].to_vec()).unwrap();
            }
            b.key_pull_loss(&h, &selected, lambda).unwrap().loss
        },
        &at,
        1e-6,
    )
    .unwrap();
    relative_error(&out.key_grads.concat(), &numeric)
}

fn classification_instance_error(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed, &[3]);
    let dim = rng.random_range(2..8);
    let nc = rng.random_range(2..5);
    let b = rng.random_range(1..6);
    let mut clf = Classifier::new(dim);
    for c in 0..nc {
        clf.register(Label::class(c as u32));
    }
    let feats: Vec<Vec<f64>> = (0..b).map(|_| point(&mut rng, dim, 1.5)).collect();
    let labels: Vec<Label> = (0..b)
        .map(|_| Label::class(rng.random_range(0..nc) as u32))
        .collect();
    let mut params: Vec<f64> = point(&mut rng, dim * nc, 1.0);
    params.extend(point(&mut rng, nc, 1.0));
    let eval = |p: &[f64], f: &[Vec<f64>]| {
        let mut c = clf.clone();
        let cols = p[..dim * nc].chunks(dim).map(|c| c.to_vec()).collect();
        c.set_parameters(cols, p[dim * nc..].to_vec()).unwrap();
        classification_loss(&c, f, &labels).unwrap()
    };
    let out = eval(&params, &feats);
    let mut analytic = out.grad_columns.concat();
    analytic.extend(&out.grad_bias);
    analytic.extend(out.grad_inputs.concat());
    let mut numeric = finite_difference_gradient(|p| eval(p, &feats).loss, &params, 1e-6).unwrap();
    let flat_feats = feats.concat();
    numeric.extend(
        finite_difference_gradient(
            |z| {
                let f: Vec<Vec<f64>> = z.chunks(dim).map(|c| c.to_vec()).collect();
                eval(&params, &f).loss
            },
            &flat_feats,
            1e-6,
        )
        .unwrap(),
    );
    relative_error(&analytic, &numeric)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let worst = |f: fn(u64) -> f64| (0..50).map(f).fold(0.0f64, f64::max);
    let (m, k, c) = (
        worst(margin_instance_error),
        worst(key_pull_instance_error),
        worst(classification_instance_error),
    );
    let secs = start.elapsed().as_secs_f64();
    check(
        m <= 1e-4 && k <= 1e-4 && c <= 1e-4 && secs < 10.0,
        format!("worst relative error over 50 instances: margin {m:.2e}, key-pull {k:.2e}, classification {c:.2e}; {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..200 {
        let mut rng = seeded_rng(seed, &[4]);
        let dim = rng.random_range(2..6);
        let n = rng.random_range(20..80);
        let sigma = rng.random_range(0.01..1.0);
        let m = rng.random_range(0.0..0.5);
        let centroid = point(&mut rng, dim, 1.0);
        let negatives: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let dir = point(&mut rng, dim, 1.0);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = m + rng.random_range(0.1..3.0);
                centroid
                    .iter()
                    .zip(&dir)
                    .map(|(c, d)| c + d / norm * r)
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = negatives.iter().map(|v| v.as_slice()).collect();
        let cfg = MarginConfig::new(m, 1.0, 1.0, 0.0, sigma).unwrap();
        let r = mob::init_radius(&centroid, &refs, &cfg).unwrap();
        let inside = refs.iter().filter(|x| dist(&centroid, x) < r + m).count() as f64 / n as f64;
        let gap = (inside - sigma).abs() - 1.0 / n as f64;
        worst_gap = worst_gap.max(gap);
    }
    check(
        worst_gap <= 0.0,
        format!("200 instances; worst |fraction - sigma| - 1/n = {worst_gap:.3e}"),
    )
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn criterion_3() -> Outcome {
    let mut agree = 0;
    for seed in 0..1000u64 {
        let mut rng = seeded_rng(seed, &[5]);
        let dim = rng.random_range(1..5);
        let n = rng.random_range(1..8);
        let spheres: Vec<Hypersphere<f64>> = (0..n)
            .map(|i| Hypersphere {
                label: Label::class(i as u32),
                centroid: Embedding::new(point(&mut rng, dim, 2.0)).unwrap(),
                radius: rng.random_range(0.05..2.0),
                task_of_origin: 0,
                provenance: Provenance::Known,
            })
            .collect();
        let x = point(&mut rng, dim, 3.0);
        // exhaustive scan: nearest centre (first on ties), inclusion flags for all
        let dists: Vec<f64> = spheres.iter().map(|s| dist(&s.centroid, &x)).collect();
        let included: Vec<bool> = spheres
            .iter()
            .zip(&dists)
            .map(|(s, &d)| d <= s.radius)
            .collect();
        let mut best = 0;
        for i in 1..n {
            if dists[i] < dists[best] {
                best = i;
            }
        }
        let expected = included[best].then_some(spheres[best].label);
        let got = mob::detect(&spheres, &x).unwrap();
        if got.label == expected && got.nearest_label == spheres[best].label {
            agree += 1;
        }
    }
    check(
        agree == 1000,
        format!("{agree}/1000 instances agree with the exhaustive oracle"),
    )
}

/// Core points linked transitively within epsilon form components; a border
/// point joins the adjacent component with the smallest minimum core index.
fn dbscan_oracle(points: &[Vec<f64>], eps: f64, min_pts: usize) -> BTreeSet<Vec<usize>> {
    let n = points.len();
    let adj = |i: usize, j: usize| dist(&points[i], &points[j]) <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| adj(i, j)).count() >= min_pts)
        .collect();
    let mut comp: Vec<usize> = (0..n).collect();
    fn find(c: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while c[r] != r {
            r = c[r];
        }
        c[i] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && adj(i, j) {
                let (a, b) = (find(&mut comp, i), find(&mut comp, j));
                comp[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let root = find(&mut comp, i);
        groups.entry(root).or_default().push(i);
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let owner = (0..n)
            .filter(|&j| core[j] && adj(i, j))
            .map(|j| find(&mut comp, j))
            .min();
        if let Some(root) = owner {
            groups.get_mut(&root).unwrap().push(i);
        }
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut agree = 0;
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, &[6]);
        let n = rng.random_range(1..=40);
        let centres: Vec<Vec<f64>> = (0..3).map(|_| point(&mut rng, 2, 3.0)).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centres[rng.random_range(0..3)];
                c.iter().map(|v| v + rng.random_range(-0.8..0.8)).collect()
            })
            .collect();
        let eps = rng.random_range(0.2..1.0);
        let min_pts = rng.random_range(1..6);
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let got: BTreeSet<Vec<usize>> =
            cluster_unknowns(&refs, ClusterParams::new(eps, min_pts).unwrap())
                .groups
                .into_iter()
                .collect();
        if got == dbscan_oracle(&points, eps, min_pts) {
            agree += 1;
        }
    }
    check(
        agree == 100,
        format!("{agree}/100 partitions identical to the density-reachability oracle"),
    )
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed, &[7]);
        let nk = rng.random_range(1..40);
        let no = rng.random_range(1..40);
        let grid = rng.random_bool(0.5);
        let mut draw = |shift: f64| {
            let v: f64 = rng.random_range(-2.0..2.0) + shift;
            if grid {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        };
        let known: Vec<f64> = (0..nk).map(|_| draw(0.0)).collect();
        let open: Vec<f64> = (0..no).map(|_| draw(0.7)).collect();
        let mut pairs = 0.0;
        for &o in &open {
            for &k in &known {
                pairs += if o > k {
                    1.0
                } else if o == k {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let oracle = pairs / (nk * no) as f64;
        worst = worst.max((auroc_scores(&known, &open).unwrap() - oracle).abs());
    }
    check(
        worst <= 1e-12,
        format!("100 score sets; worst deviation from the pairwise oracle {worst:.2e}"),
    )
}

fn default_run(cfg: &RunConfig) -> RunOutput {
    let eps = pipeline::load_episodes(cfg).expect("stream");
    pipeline::run(cfg, &eps).expect("run")
}

fn criterion_6() -> Outcome {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let out = default_run(&cfg);
    let secs = start.elapsed().as_secs_f64();
    let r = &out.report;
    let promoted = out.promoted_accuracy.unwrap_or(0.0);
    check(
        r.acc_n >= 0.90 && r.auc_n >= 0.90 && r.pd <= 0.05 && !out.promotions.is_empty() && promoted >= 0.90 && secs < 60.0,
        format!(
            "ACC_N {:.4}, AUC_N {:.4}, PD {:.4}, {} promotions, promoted-sample accuracy {promoted:.4}, {secs:.2}s",
            r.acc_n,
            r.auc_n,
            r.pd,
            out.promotions.len()
        ),
    )
}

fn frozen_lines<'a>(dump: &'a str, prefix: &str, before: usize, task_field: usize) -> Vec<&'a str> {
    dump.lines()
        .filter(|l| l.starts_with(prefix))
        .filter(|l| {
            l.split(' ')
                .nth(task_field)
                .and_then(|t| t.parse::<usize>().ok())
                .is_some_and(|t| t < before)
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let out = default_run(&RunConfig::default());
    let mut checked = 0;
    for t in 1..out.space_dumps.len() {
        // "sphere known <label> <task> ..." and "token <task> ..."
        let old_s = frozen_lines(&out.space_dumps[t - 1], "sphere known ", t, 3);
        let new_s = frozen_lines(&out.space_dumps[t], "sphere known ", t, 3);
        let old_t = frozen_lines(&out.token_dumps[t - 1], "token ", t, 1);
        let new_t = frozen_lines(&out.token_dumps[t], "token ", t, 1);
        if old_s != new_s || old_t != new_t || old_s.is_empty() || old_t.is_empty() {
            return Err(format!(
                "session {t}: earlier-task spheres or tokens changed"
            ));
        }
        checked += old_s.len() + old_t.len();
    }
    Ok(format!(
        "{checked} frozen sphere/token records byte-identical across sessions"
    ))
}

fn criterion_8() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.stream.num_tasks = 7;
    let out = default_run(&cfg);
    let ys: Vec<f64> = out.space_dumps.iter().map(|d| d.len() as f64).collect();
    let xs: Vec<f64> = (1..=ys.len()).map(|t| t as f64).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    check(
        ys.len() == 8 && r2 >= 0.99,
        format!("{} sessions, dump bytes {:?}, R^2 {r2:.4}", ys.len(), ys),
    )
}

fn criterion_9() -> Outcome {
    let mut accs = Vec::new();
    for gamma in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let mut cfg = RunConfig::default();
        cfg.train.gamma = gamma;
        accs.push(default_run(&cfg).report.acc_n);
    }
    let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check(
        hi - lo <= 0.05,
        format!(
            "ACC_N over gamma grid {accs:.4?}; range {:.2} pp",
            (hi - lo) * 100.0
        ),
    )
}

fn criterion_10() -> Outcome {
    let cfg = RunConfig::default();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pipeline::write_run(d.path(), &cfg, &default_run(&cfg)).unwrap();
    }
    let mut compared = 0;
    for entry in std::fs::read_dir(dirs[0].path()).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dirs[0].path().join(&name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&name)).unwrap();
        if a != b {
            return Err(format!(
                "{} differs between identical runs",
                name.to_string_lossy()
            ));
        }
        compared += 1;
    }
    check(
        compared >= 4,
        format!("{compared} artifacts byte-identical across two runs"),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("gradient correctness", criterion_1),
        ("radius quantile law", criterion_2),
        ("detection oracle", criterion_3),
        ("clustering oracle", criterion_4),
        ("auroc oracle", criterion_5),
        ("end-to-end synthetic stream", criterion_6),
        ("forgetting freeze", criterion_7),
        ("linear dump growth", criterion_8),
        ("gamma robustness", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the target fails if any criterion does.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{optimal_assignment_mean, oracle_dbscan, oracle_iou, partition_of, voronoi_labels};
use nudgeseg_core::driver::{run_batch, run_sweep, RunConfig};
use nudgeseg_core::eval::{aggregate, iou, match_and_score, score_snapshot, scoring_labels, SweepRow};
use nudgeseg_core::flow::{decode_flo, encode_flo, FlowField};
use nudgeseg_core::geometry::Vec2;
use nudgeseg_core::hypothesis::{refine, SegmentationHypothesis};
use nudgeseg_core::motioncluster::{dbscan, ClusterParams, FlowPoint};
use nudgeseg_core::raster::{decode_pgm, encode_pgm16, Grid};
use nudgeseg_core::rng::forked_rng;
use nudgeseg_core::scene::ShapeSet;
use rand::Rng;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

fn clean_competence(r: &mut Report) {
    let mut cfg = RunConfig::default();
    cfg.scene.shape_set = ShapeSet::Convex;
    cfg.scene.n_min = 5;
    cfg.scene.n_max = 8;
    cfg.scene.glued_pairs = 0;
    cfg.noise.eps_m = 0.0;
    cfg.noise.eps_a = 0.0;
    let start = Instant::now();
    let outcomes = run_batch(&cfg, 0, 25);
    let elapsed = start.elapsed();
    let s = aggregate(&outcomes.iter().map(|o| o.record.clone()).collect::<Vec<_>>());
    r.check(
        "clean-flow competence",
        s.dr75 >= 0.90 && s.mean_nudges <= 12.0 && elapsed <= Duration::from_secs(300),
        format!(
            "DR75 {:.3} (>= 0.90), mean nudges {:.2} (<= 12), runtime {:.1}s (<= 300s), failures {}",
            s.dr75,
            s.mean_nudges,
            elapsed.as_secs_f64(),
            s.failures
        ),
    );
}

fn noise_trend(r: &mut Report) {
    let (em, ea) = ([0.0, 5.0, 10.0, 20.0], [0.0, 10.0, 20.0, 30.0]);
    let rows = run_sweep(&RunConfig::default(), &em, &ea, 0, 25);
    let cell = |m: f64, a: f64| -> f64 {
        rows.iter().find(|row: &&SweepRow| row.eps_m == m && row.eps_a == a).map(|row| row.summary.mean_iou).unwrap()
    };
    let along_m: Vec<f64> = em.iter().map(|&m| cell(m, 0.0)).collect();
    let along_a: Vec<f64> = ea.iter().map(|&a| cell(0.0, a)).collect();
    let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let drop_m = along_m[0] - along_m[3];
    let drop_a = along_a[0] - along_a[3];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    r.check(
        "noise sweep trend",
        monotone(&along_m) && monotone(&along_a) && drop_a > drop_m,
        format!(
            "IoU over eps_m [{}], over eps_a [{}]; drop eps_a=30 {drop_a:.3} vs eps_m=20 {drop_m:.3}",
            fmt(&along_m),
            fmt(&along_a)
        ),
    );
}

fn dbscan_oracle(r: &mut Report) {
    let mut rng = forked_rng(2024, "acceptance-dbscan");
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(0..=300);
        let centers: Vec<f64> = vec![0.02, 0.4, 3.1, TAU - 0.05];
        let points: Vec<FlowPoint> = (0..n)
            .map(|_| FlowPoint {
                pos: Vec2::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0)),
                mag: rng.random_range(0.0..6.0),
                ang: (centers[rng.random_range(0..centers.len())] + rng.random_range(-0.3..0.3f64)).rem_euclid(TAU),
            })
            .collect();
        let p = ClusterParams {
            tau_d: rng.random_range(4.0..25.0),
            tau_m: rng.random_range(0.5..3.0),
            tau_a: rng.random_range(0.1..0.8),
            min_pts: rng.random_range(1..12),
            ..Default::default()
        };
        let got: Vec<i64> = dbscan(&points, &p).labels.iter().map(|&l| l as i64).collect();
        let want = oracle_dbscan(&points, &p);
        if partition_of(&got, Some(-1)) != partition_of(&want, Some(-1)) {
            mismatches += 1;
        }
    }
    r.check("DBSCAN oracle equivalence", mismatches == 0, format!("{mismatches} of 200 point sets differ"));
}

fn refine_properties(r: &mut Report) {
    let (w, h) = (48, 40);
    let mut rng = forked_rng(7, "acceptance-refine");
    let mut idempotent = 0;
    for _ in 0..200 {
        let sites: Vec<(f64, f64)> =
            (0..rng.random_range(1..7)).map(|_| (rng.random_range(0.0..48.0), rng.random_range(0.0..40.0))).collect();
        let hyp = SegmentationHypothesis::from_labels(Grid::from_vec(w, h, voronoi_labels(w, h, &sites, 20.0)), 0);
        let tau = rng.random_range(0.01..0.99);
        idempotent += (refine(&hyp, &hyp, tau).partition() == hyp.partition()) as usize;
    }
    let rect = |x0: usize, y0: usize, x1: usize, y1: usize| -> Vec<usize> {
        (y0..y1).flat_map(|y| (x0..x1).map(move |x| y * w + x)).collect()
    };
    let prop = SegmentationHypothesis::from_masks(w, h, &[(1, rect(4, 4, 24, 20))]);
    let halves = SegmentationHypothesis::from_masks(w, h, &[(1, rect(4, 4, 14, 20)), (2, rect(14, 4, 24, 20))]);
    let split = refine(&prop, &halves, 0.5);
    let mut want = vec![rect(4, 4, 14, 20), rect(14, 4, 24, 20)];
    want.sort();
    let split_ok = split.mask_count() == 2 && split.partition() == want;
    let far = SegmentationHypothesis::from_masks(w, h, &[(1, rect(30, 24, 40, 34))]);
    let spawned = refine(&prop, &far, 0.5);
    let new_ok = spawned.mask_count() == 2
        && spawned.masks()[&1] == rect(4, 4, 24, 20)
        && spawned.masks().iter().any(|(&id, px)| id > 1 && *px == rect(30, 24, 40, 34));
    r.check(
        "refine properties",
        idempotent == 200 && split_ok && new_ok,
        format!("idempotent on {idempotent}/200, split example {split_ok}, new-mask example {new_ok}"),
    );
}

fn metric_axioms(r: &mut Report) {
    let (w, h) = (40, 32);
    let mut rng = forked_rng(11, "acceptance-metrics");
    let mut violations = 0;
    for _ in 0..1000 {
        let density_a: f64 = rng.random();
        let density_b: f64 = rng.random();
        let a: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density_a)).collect();
        let b: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density_b)).collect();
        let (ma, mb) = (Grid::from_vec(w, h, a.clone()), Grid::from_vec(w, h, b.clone()));
        let v = iou(&ma, &mb);
        let ok = (0.0..=1.0).contains(&v) && v == iou(&mb, &ma) && v == oracle_iou(&a, &b);
        // DR nesting on the pair read as a one-object scene
        let gt = Grid::from_vec(w, h, b.iter().map(|&x| x as u16).collect());
        let hyp = SegmentationHypothesis::from_labels(Grid::from_vec(w, h, a.iter().map(|&x| x as u32).collect()), 0);
        let m = score_snapshot(&hyp, &gt);
        violations += (!ok || m.dr50 < m.dr75) as usize;
    }
    let mut worst_gap: f64 = 0.0;
    let mut instances = 0;
    for _ in 0..500 {
        let n_gt = rng.random_range(1..=8);
        let sites: Vec<(f64, f64)> =
            (0..n_gt).map(|_| (rng.random_range(0.0..40.0), rng.random_range(0.0..32.0))).collect();
        let mut hs: Vec<(f64, f64)> =
            sites.iter().map(|s| (s.0 + rng.random_range(-6.0..6.0), s.1 + rng.random_range(-6.0..6.0))).collect();
        hs.truncate((n_gt - rng.random_range(0..3usize).min(n_gt - 1)).max(1));
        while hs.len() < 8 && rng.random_bool(0.3) {
            hs.push((rng.random_range(0.0..40.0), rng.random_range(0.0..32.0)));
        }
        let gt = Grid::from_vec(w, h, voronoi_labels(w, h, &sites, 14.0).into_iter().map(|v| v as u16).collect());
        let hyp = SegmentationHypothesis::from_labels(Grid::from_vec(w, h, voronoi_labels(w, h, &hs, 14.0)), 0);
        let scores = match_and_score(&hyp, &gt, 0.5);
        if scores.is_empty() {
            continue;
        }
        instances += 1;
        let greedy = scores.iter().map(|s| s.best_iou).sum::<f64>() / scores.len() as f64;
        let masks = hyp.masks();
        let matrix: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| {
                let a: Vec<bool> = gt.data.iter().map(|&v| v == s.gt_id).collect();
                masks
                    .keys()
                    .map(|&m| oracle_iou(&a, &hyp.labels.data.iter().map(|&v| v == m).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        worst_gap = worst_gap.max(optimal_assignment_mean(&matrix) - greedy);
    }
    r.check(
        "metric axioms",
        violations == 0 && worst_gap <= 0.05,
        format!("{violations} violations on 1000 mask pairs; worst greedy gap {worst_gap:.4} over {instances} instances (<= 0.05)"),
    );
}

fn format_fidelity(r: &mut Report) {
    let mut rng = forked_rng(5, "acceptance-formats");
    let mut bad = 0;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..64), rng.random_range(1..64));
        let mut f = FlowField::zeros(w, h);
        for i in 0..w * h {
            f.u[i] = f32::from_bits(rng.random::<u32>()) as f64;
            f.v[i] = rng.random_range(-100.0..100.0f32) as f64;
        }
        let bytes = encode_flo(&f);
        let back = decode_flo(&bytes).unwrap();
        let same = back.u.iter().zip(&f.u).chain(back.v.iter().zip(&f.v)).all(|(a, b)| a.to_bits() == b.to_bits());
        bad += (!same || encode_flo(&back) != bytes) as usize;

        let img = Grid::from_vec(w, h, (0..w * h).map(|_| rng.random::<u16>()).collect());
        let bytes = encode_pgm16(&img);
        let back = decode_pgm(&bytes).unwrap();
        bad += (back != img || encode_pgm16(&back) != bytes) as usize;
    }
    r.check("format fidelity", bad == 0, format!("{bad} of 200 round-trips differ"));
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap());
    }
    out
}

fn determinism(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_nudgeseg"))
            .args(["run", "--seed", "42", "--keep-going", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        trees.push(tree(&out));
    }
    r.check(
        "determinism",
        !trees[0].is_empty() && trees[0] == trees[1],
        format!("{} files per tree, identical: {}", trees[0].len(), trees[0] == trees[1]),
    );
}

fn glue_handling(r: &mut Report) {
    let mut cfg = RunConfig::default();
    cfg.scene.n_min = 5;
    cfg.scene.n_max = 5;
    cfg.scene.glued_pairs = 1;
    let outcomes = run_batch(&cfg, 0, 25);
    let mut ok = 0;
    for o in &outcomes {
        let (Some(scene), Some(hyp)) = (&o.final_scene, &o.final_hyp) else { continue };
        let pair_label = scene.objects.iter().filter(|ob| ob.glue_group == Some(0)).map(|ob| ob.id).min().unwrap();
        let gt = scoring_labels(scene, true);
        let pair_region: Vec<bool> = gt.data.iter().map(|&g| g == pair_label).collect();
        // the mask covering most of the pair
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, &l) in hyp.labels.data.iter().enumerate() {
            if l != 0 && pair_region[i] {
                *counts.entry(l).or_default() += 1;
            }
        }
        let Some((&mask, _)) = counts.iter().max_by_key(|(_, &c)| c) else { continue };
        let whole = oracle_iou(&hyp.labels.data.iter().map(|&l| l == mask).collect::<Vec<_>>(), &pair_region) > 0.5;
        let last_verdict = o.verification.iter().rev().find(|v| v.0 == mask).map(|v| v.1);
        if o.terminated && whole && last_verdict != Some(true) {
            ok += 1;
        }
    }
    r.check("glued pair stays unsplit", ok >= 24, format!("{ok}/25 trials terminated with the pair whole (>= 24)"));
}

fn main() {
    let mut r = Report { failed: 0 };
    dbscan_oracle(&mut r);
    refine_properties(&mut r);
    metric_axioms(&mut r);
    format_fidelity(&mut r);
    clean_competence(&mut r);
    glue_handling(&mut r);
    determinism(&mut r);
    noise_trend(&mut r);
    if r.failed > 0 {
        println!("{} acceptance criteria failed", r.failed);
        std::process::exit(1);
    }
}

//! Orchestration checks: teacher determinism, ablation grid shapes and
//! their reduction identities, chart schema errors, and the no-clipping
//! property of chart axes on random data.

use std::fs;
use std::path::Path;

use flowdistill::data::{ConditionMode, DatasetSpec, Family, MixtureComponent};
use flowdistill::harness::{
    emit_charts, line_chart, padded_range, run_ablation_ida_ttur, run_ablation_isg, run_distill,
    train_teacher, ChartSeries, ExperimentConfig,
};
use flowdistill::nets::NetConfig;
use flowdistill::Result;
use proptest::prelude::*;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::benchmark();
    cfg.dataset = DatasetSpec::new(
        Family::GaussianMixture {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: [0.0, 0.0],
                cov: [[1.0, 0.0], [0.0, 1.0]],
            }],
        },
        ConditionMode::Unconditional,
    )
    .unwrap();
    cfg.net =
        NetConfig { width: 8, depth: 2, time_embed_dim: 4, cond_embed_dim: 2, n_conditions: 1 };
    cfg.train.iters = 10;
    cfg.train.batch = 8;
    cfg.train.ttur_f = 5;
    cfg.train.track_samples = 4;
    cfg.train.disc_backbone_width = 16;
    cfg.train.disc_head_dim = 4;
    cfg.teacher_iters = 25;
    cfg.teacher_batch = 8;
    cfg.eval_every = 5;
    cfg.seeds = vec![0, 1, 2];
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn teacher_runs_are_byte_identical_across_invocations() -> Result<()> {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().expect("tempdir");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train_teacher(&cfg, 7, &a)?;
    train_teacher(&cfg, 7, &b)?;
    assert_eq!(read(&a.join("teacher.params")), read(&b.join("teacher.params")));
    assert_eq!(read(&a.join("teacher.csv")), read(&b.join("teacher.csv")));
    Ok(())
}

#[test]
fn teacher_divergence_guard_names_the_iteration() {
    let mut cfg = tiny_config();
    cfg.teacher_lr = 1e12;
    let dir = tempfile::tempdir().expect("tempdir");
    let msg = match train_teacher(&cfg, 0, dir.path()) {
        Ok(_) => panic!("teacher training should diverge at this learning rate"),
        Err(e) => e.to_string(),
    };
    assert!(msg.contains("diverged at iteration"), "got: {msg}");
}

#[test]
fn config_files_round_trip_with_a_stable_hash() -> Result<()> {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("exp.toml");
    cfg.save(&path)?;
    let loaded = ExperimentConfig::load(&path)?;
    assert_eq!(cfg.config_hash()?, loaded.config_hash()?);
    Ok(())
}

#[test]
fn ida_ttur_grid_writes_every_cell_and_reduces_at_unit_blend() -> Result<()> {
    let mut cfg = tiny_config();
    cfg.train.lambda_ida = 1.0;
    let dir = tempfile::tempdir().expect("tempdir");
    let (teacher, _) = train_teacher(&cfg, 0, &dir.path().join("teacher"))?;

    let out = dir.path().join("grid");
    let cells = run_ablation_ida_ttur(&cfg, &teacher, &out, false)?;
    assert_eq!(cells.len(), 18, "3 ratios x 2 settings x 3 seeds");

    let artifacts = [
        "config.toml",
        "manifest.toml",
        "train.csv",
        "track.csv",
        "generator_mid.params",
        "generator_final.params",
        "fake_final.params",
    ];
    for ttur in [5, 10, 20] {
        for ida in ["on", "off"] {
            for seed in [0, 1, 2] {
                let cell = out.join(format!("ttur-{ttur}-ida-{ida}")).join(format!("seed-{seed}"));
                for name in artifacts {
                    assert!(cell.join(name).exists(), "missing {name} in {}", cell.display());
                }
            }
        }
    }

    let summary = fs::read_to_string(out.join("summary.csv"))?;
    assert_eq!(summary.lines().count(), 20, "schema line, header, 18 rows");

    // With the blend factor pinned to 1 the on and off settings are the
    // same algorithm, so each pair of cells must match bit for bit.
    for ttur in [5, 10, 20] {
        for seed in [0, 1, 2] {
            let on = out.join(format!("ttur-{ttur}-ida-on")).join(format!("seed-{seed}"));
            let off = out.join(format!("ttur-{ttur}-ida-off")).join(format!("seed-{seed}"));
            assert_eq!(read(&on.join("train.csv")), read(&off.join("train.csv")));
            assert_eq!(
                read(&on.join("generator_final.params")),
                read(&off.join("generator_final.params"))
            );
        }
    }
    Ok(())
}

#[test]
fn isg_grid_has_the_full_row_count_and_reduces_at_zero_weight() -> Result<()> {
    let mut cfg = tiny_config();
    cfg.train.iters = 20;
    cfg.eval_every = 1;
    cfg.train.lambda_isg = 0.0;
    let dir = tempfile::tempdir().expect("tempdir");
    let (teacher, _) = train_teacher(&cfg, 0, &dir.path().join("teacher"))?;

    let out = dir.path().join("isg");
    let rows = run_ablation_isg(&cfg, &teacher, &out, false)?;
    assert_eq!(rows.len(), 24, "2 settings x 3 seeds x 4 checkpoints");
    let summary = fs::read_to_string(out.join("summary.csv"))?;
    assert_eq!(summary.lines().count(), 26);

    let pcts: Vec<usize> = rows.iter().map(|r| r.checkpoint_pct).collect();
    assert_eq!(&pcts[..4], &[10, 25, 50, 100]);
    for r in &rows {
        assert_eq!(r.iter, cfg.train.iters * r.checkpoint_pct / 100);
        assert!(r.fd.is_finite());
    }

    // Zero guidance weight makes the on cell the off algorithm.
    for seed in [0, 1, 2] {
        let on = out.join("isg-on").join(format!("seed-{seed}"));
        let off = out.join("isg-off").join(format!("seed-{seed}"));
        assert_eq!(read(&on.join("train.csv")), read(&off.join("train.csv")));
    }
    Ok(())
}

#[test]
fn rerunning_a_seed_reproduces_the_csv_logs() -> Result<()> {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().expect("tempdir");
    let (teacher, _) = train_teacher(&cfg, 0, &dir.path().join("teacher"))?;

    let a = run_distill(&cfg, &teacher, 1, &dir.path().join("a"), false)?;
    let b = run_distill(&cfg, &teacher, 1, &dir.path().join("b"), false)?;
    assert_eq!(read(&a.dir.join("train.csv")), read(&b.dir.join("train.csv")));
    assert_eq!(read(&a.dir.join("track.csv")), read(&b.dir.join("track.csv")));
    assert_eq!(
        read(&a.dir.join("generator_final.params")),
        read(&b.dir.join("generator_final.params"))
    );
    Ok(())
}

#[test]
fn charts_report_the_missing_column_by_name() {
    let dir = tempfile::tempdir().expect("tempdir");
    fs::write(dir.path().join("train.csv"), "# schema=1\niter,l_dmd\n1,0.5\n").unwrap();
    let msg = match emit_charts(dir.path()) {
        Ok(_) => panic!("expected a schema error"),
        Err(e) => e.to_string(),
    };
    assert!(msg.contains("fd_to_teacher"), "got: {msg}");
}

#[test]
fn charts_from_header_only_csvs_are_axes_only_and_deterministic() -> Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    fs::write(dir.path().join("train.csv"), "# schema=1\niter,fd_to_teacher\n")?;
    fs::write(dir.path().join("xi.csv"), "# schema=1\nt,xi_raw,xi\n")?;
    fs::write(
        dir.path().join("slack.csv"),
        "# schema=1\nk,slack_distance,slack_field,slack_tracking\n",
    )?;
    let written = emit_charts(dir.path())?;
    assert_eq!(written.len(), 3);
    let first: Vec<Vec<u8>> = written.iter().map(|p| read(p)).collect();
    let fd_svg = String::from_utf8(first[0].clone()).unwrap();
    assert!(!fd_svg.contains("<polyline"));
    assert!(fd_svg.contains("<line"));

    let again = emit_charts(dir.path())?;
    let second: Vec<Vec<u8>> = again.iter().map(|p| read(p)).collect();
    assert_eq!(first, second);
    Ok(())
}

#[test]
fn charts_error_when_no_known_csv_exists() {
    let dir = tempfile::tempdir().expect("tempdir");
    assert!(emit_charts(dir.path()).is_err());
}

fn polyline_coords(svg: &str) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for chunk in svg.split("points=\"").skip(1) {
        let body = chunk.split('"').next().unwrap();
        for pair in body.split(' ') {
            let mut it = pair.split(',');
            let x: f64 = it.next().unwrap().parse().unwrap();
            let y: f64 = it.next().unwrap().parse().unwrap();
            out.push((x, y));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chart_axes_cover_the_data(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let (lo, hi) = padded_range(values.iter().copied());
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= min);
        prop_assert!(hi >= max);
    }

    #[test]
    fn chart_points_stay_inside_the_plot_area(
        points in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..40)
    ) {
        let series = [ChartSeries { name: "s".to_string(), points: points.clone() }];
        let svg = line_chart("t", "x", "y", &series);
        let coords = polyline_coords(&svg);
        prop_assert_eq!(coords.len(), points.len());
        for (x, y) in coords {
            prop_assert!((64.0 - 0.01..=622.0 + 0.01).contains(&x), "x = {}", x);
            prop_assert!((36.0 - 0.01..=352.0 + 0.01).contains(&y), "y = {}", y);
        }
    }
}

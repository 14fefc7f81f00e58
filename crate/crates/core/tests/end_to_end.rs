use std::fs;
use std::path::Path;

use approx::assert_abs_diff_eq;
use nmqj::io::{self, RunConfig};
use nmqj::linalg::DensityMatrix;
use nmqj::naive;
use nmqj::oracle::{self, McPoint, McSeries, analytic_two_level};
use nmqj::run;
use nmqj::{Error, RateFunction};

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

const SIGN_CHANGING: &str = r#"
seed = 17
members = 20000
t_max = 3.0
[output]
spacing = 0.1
[step]
dt = 0.002
[model]
preset = "two_level"
initial = "superposition"
delta = { kind = "damped_oscillation", amplitude = 1.0, decay = 0.25, frequency = 2.0 }

[[observables]]
name = "P_e"
preset = "excited"

[[observables]]
name = "sigma_x"
operator = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]
"#;

#[test]
fn model_file_and_rate_table_resolve_relative_to_their_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("models")).unwrap();
    fs::write(
        dir.path().join("models/atom.toml"),
        r#"
preset = "two_level"
initial = "excited"
delta = { kind = "tabulated", file = "rate.csv" }
"#,
    )
    .unwrap();
    fs::write(dir.path().join("models/rate.csv"), "0,1\n2,1\n").unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "seed = 1\nmembers = 10\nt_max = 2.0\nmodel_file = \"models/atom.toml\"\n",
    )
    .unwrap();
    let cfg = io::load_config(&dir.path().join("run.toml")).unwrap();
    assert_eq!(cfg.model.channels[0].rate().evaluate(1.5).unwrap(), 1.0);

    // the table ends at 2, so a longer run is rejected up front
    fs::write(
        dir.path().join("run.toml"),
        "seed = 1\nmembers = 10\nt_max = 3.0\nmodel_file = \"models/atom.toml\"\n",
    )
    .unwrap();
    assert!(matches!(
        io::load_config(&dir.path().join("run.toml")),
        Err(Error::InvalidModel(_))
    ));
}

#[test]
fn naive_and_compressed_both_track_the_oracle() {
    let cfg = io::parse_config(SIGN_CHANGING, Path::new(".")).unwrap();
    let oracle = run::run_oracle(&cfg).unwrap();
    let compressed = run::run_ensemble(&cfg).unwrap();
    let slow = naive::run_naive(&RunConfig {
        members: 5000,
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(slow.counters.peak_classes, 2);
    for k in 0..cfg.observables.len() {
        let report = oracle::compare_to_oracle(
            &cfg.observables[k].name,
            &compressed.mc_series(k),
            &oracle.solution,
            &cfg.observables[k].operator,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
    // naive members are individual states, so the worst-case spread bounds its error
    let pe: Vec<f64> = oracle.records.iter().map(|r| r.values[0]).collect();
    for (r, exact) in slow.records.iter().zip(&pe) {
        assert!((r.values[0] - exact).abs() < 5.0 * (0.25f64 / 5000.0).sqrt(), "t = {}", r.t);
    }
}

#[test]
fn lamb_shift_rotates_the_coherence() {
    let text = SIGN_CHANGING.replace(
        "delta = { kind = \"damped_oscillation\", amplitude = 1.0, decay = 0.25, frequency = 2.0 }",
        "delta = { kind = \"damped_oscillation\", amplitude = 1.0, decay = 0.25, frequency = 2.0 }\nlamb_shift = { kind = \"constant\", value = 1.5 }",
    );
    let cfg = io::parse_config(&text, Path::new(".")).unwrap();
    let oracle = run::run_oracle(&cfg).unwrap();
    let mc = run::run_ensemble(&cfg).unwrap();
    let rho0 = DensityMatrix::from_pure(&cfg.model.initial_state);
    let sx = &cfg.observables[1].operator;
    let mut rotated = false;
    for (k, &t) in cfg.grid.iter().enumerate() {
        let exact = analytic_two_level(
            cfg.model.channels[0].rate(),
            &RateFunction::constant(1.5),
            &rho0,
            t,
        )
        .unwrap()
        .expectation(sx)
        .unwrap()
        .re;
        assert_abs_diff_eq!(oracle.records[k].values[1], exact, epsilon = 1e-7);
        rotated |= exact < -0.1;
    }
    assert!(rotated, "the Lamb shift should turn <sigma_x> negative within the window");
    let report = oracle::compare_to_oracle("sigma_x", &mc.mc_series(1), &oracle.solution, sx).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn three_level_config_agrees_with_oracle() {
    let cfg = io::load_config(&configs_dir().join("three_level.toml")).unwrap();
    let cmp = run::run_compare(&cfg).unwrap();
    assert!(cmp.passed(), "{:?}", cmp.reports);
    assert!(cmp.ensemble.summary.negative_events > 0);
    assert!(cmp.ensemble.summary.peak_n_eff >= 3);
}

#[test]
fn compare_flags_a_wrong_reference() {
    // a run of the sign-changing model judged against a purely Markovian oracle must fail
    let cfg = io::parse_config(SIGN_CHANGING, Path::new(".")).unwrap();
    let mc = run::run_ensemble(&cfg).unwrap();
    let markov = io::parse_config(
        &SIGN_CHANGING.replace(
            "{ kind = \"damped_oscillation\", amplitude = 1.0, decay = 0.25, frequency = 2.0 }",
            "{ kind = \"constant\", value = 0.3 }",
        ),
        Path::new("."),
    )
    .unwrap();
    let wrong = oracle::integrate_master_equation(&markov.model, &markov.grid).unwrap();
    let report = oracle::compare_to_oracle("P_e", &mc.mc_series(0), &wrong, &cfg.observables[0].operator).unwrap();
    assert!(!report.passed);
    assert!(report.exceedances > 0);
}

#[test]
fn compare_checks_grid_alignment() {
    let cfg = io::parse_config(SIGN_CHANGING, Path::new(".")).unwrap();
    let oracle = run::run_oracle(&cfg).unwrap();
    let short = McSeries {
        members: 10,
        points: vec![McPoint { t: 0.0, mean: 0.5, variance: 0.0 }],
    };
    assert!(matches!(
        oracle::compare_to_oracle("P_e", &short, &oracle.solution, &cfg.observables[0].operator),
        Err(Error::Grid(_))
    ));
}

#[test]
fn trajectory_outputs_round_trip() {
    let cfg = io::parse_config(SIGN_CHANGING, Path::new(".")).unwrap();
    let traj = run::run_trajectory(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run::write_trajectory_outputs(dir.path(), &traj).unwrap();
    let (names, records) = io::read_timeseries(fs::File::open(dir.path().join("trajectory.csv")).unwrap()).unwrap();
    assert_eq!(names, traj.names);
    assert_eq!(records, traj.records);
    let events = io::read_events(fs::File::open(dir.path().join("trajectory_events.jsonl")).unwrap()).unwrap();
    assert_eq!(events, traj.tracked_events);
    assert!(events.iter().all(|e| e.members_moved == 1));
}

use oar_core::config::ExperimentConfig;
use oar_core::eval::{read_results, run_experiment, summarize, ResultSink};
use oar_core::exec::Execution;

const BASE: &str = r#"
[run]
seeds = 3
seed = 5
[data]
n_train = 80
n_test = 100
[stage1]
epochs = 10
[stage2]
epochs = 10
"#;

const CELLS: [&str; 4] = [
    "[[cell]]\nmode = \"CR\"\nbase = 0.5\n",
    "[[cell]]\nmode = \"OAR\"\ninjector = \"noise\"\nbase = 1.0\n",
    "[[cell]]\nmodel = \"krr\"\nmode = \"OAR\"\nlearner = \"R\"\nbase = 0.5\n",
    "[[cell]]\nmode = \"dOAR\"\nbase = 0.5\nnuisance = \"oracle\"\n",
];

fn config(order: &[usize]) -> ExperimentConfig {
    let mut text = BASE.to_string();
    for &i in order {
        text.push_str(CELLS[i]);
    }
    ExperimentConfig::from_toml_str(&text, &[]).unwrap()
}

#[test]
fn single_cell_single_seed() {
    let cfg =
        ExperimentConfig::from_toml_str(&format!("{BASE}{}", CELLS[0]), &["run.seeds=1".into()])
            .unwrap();
    let r = run_experiment(&cfg, Execution::Sequential, None, &[]).unwrap();
    assert_eq!(r.len(), 1);
    assert!(r[0].rpehe_out >= 0.0 && r[0].error.is_none());
}

#[test]
fn cell_order_and_execution_do_not_change_results() {
    let a = run_experiment(&config(&[0, 1, 2, 3]), Execution::Sequential, None, &[]).unwrap();
    let b = run_experiment(&config(&[3, 2, 1, 0]), Execution::Parallel, None, &[]).unwrap();
    assert_eq!(a.len(), 12);
    for r in &a {
        let s = b
            .iter()
            .find(|s| s.fingerprint == r.fingerprint && s.seed == r.seed)
            .unwrap();
        assert_eq!(r.rpehe_out.to_bits(), s.rpehe_out.to_bits(), "{}", r.cell);
        assert_eq!(r.rpehe_in.to_bits(), s.rpehe_in.to_bits());
    }
    let s = summarize(&a, None).unwrap();
    assert_eq!(s.rows.len(), 4);
}

#[test]
fn interrupted_sweep_resumes_from_sink() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let partial = config(&[0, 1]);
    let sink = ResultSink::open(&path).unwrap();
    run_experiment(&partial, Execution::Sequential, Some(&sink), &[]).unwrap();
    let previous = read_results(&path).unwrap();
    assert_eq!(previous.len(), 6);

    let full = config(&[0, 1, 2, 3]);
    let resumed = run_experiment(&full, Execution::Sequential, Some(&sink), &previous).unwrap();
    let fresh = run_experiment(&full, Execution::Sequential, None, &[]).unwrap();
    assert_eq!(read_results(&path).unwrap().len(), 12);
    let key =
        |r: &oar_core::eval::RunResult| (r.fingerprint.clone(), r.seed, r.rpehe_out.to_bits());
    let mut x: Vec<_> = resumed.iter().map(key).collect();
    let mut y: Vec<_> = fresh.iter().map(key).collect();
    x.sort();
    y.sort();
    assert_eq!(x, y);
}
